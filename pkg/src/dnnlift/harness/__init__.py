from .emit import CorpusEntry, EmitOptions, FuncTruth, GroundTruth, emit_bundle, emit_corpus
from .styles import STYLE_NAMES, CodegenStyle, style_named

__all__ = ["CorpusEntry", "EmitOptions", "FuncTruth", "GroundTruth", "emit_bundle",
           "emit_corpus", "STYLE_NAMES", "CodegenStyle", "style_named"]
