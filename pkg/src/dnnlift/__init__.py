"""dnnlift: recover full DNN model specs from execution-trace bundles."""

__version__ = "0.1.0"
