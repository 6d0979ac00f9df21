import numpy as np
import pytest

from dnnlift import opid, zoo
from dnnlift.harness import EmitOptions, emit_bundle, emit_corpus

CORPUS_SEEDS = (2, 3)
SAMPLED_MODELS = 20


def standard_corpus():
    specs = [zoo.get_model(n) for n in zoo.ROUND_TRIP_MODELS]
    specs += zoo.sample_models(11, SAMPLED_MODELS)
    entries = []
    for s in CORPUS_SEEDS:
        entries += emit_corpus(specs, ["tvm-o0", "tvm-o3", "glow"], s)
    return entries


@pytest.fixture(scope="session")
def corpus():
    return standard_corpus()


@pytest.fixture(scope="session")
def split_corpus(corpus):
    rng = np.random.default_rng(0)
    idx = rng.permutation(len(corpus))
    cut = int(0.7 * len(corpus))
    return ([corpus[i] for i in idx[:cut]], [corpus[i] for i in idx[cut:]])


@pytest.fixture(scope="session")
def classifier(split_corpus):
    train, _ = split_corpus
    return opid.train_classifier(train)


_BUNDLE_CACHE = {}


@pytest.fixture(scope="session")
def make_bundle():
    def _make(model_name, style, seed=1, **opts):
        key = (model_name, style, seed, tuple(sorted(opts.items())))
        if key not in _BUNDLE_CACHE:
            _BUNDLE_CACHE[key] = emit_bundle(
                zoo.get_model(model_name), style, seed, EmitOptions(**opts))
        return _BUNDLE_CACHE[key]
    return _make
