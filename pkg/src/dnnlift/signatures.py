"""Per-style assembly-function argument role tables.

Callsites pass tensor pointers positionally; these tables record what each
argument means for every (codegen family, operator) pair.  The TVM family
puts outputs last; the Glow family puts outputs first and has in-place
operators whose first argument serves as both input and output.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import MissingSignature

ROLE_REGION = ("in", "in1", "in2", "weights", "biases", "out")
ROLE_SCALAR = ("offset", "dims")


@dataclass(frozen=True)
class SigEntry:
    roles: tuple[str, ...]
    inplace_out: int | None = None  # arg index doubling as the output

    def out_index(self) -> int:
        if self.inplace_out is not None:
            return self.inplace_out
        return self.roles.index("out")

    def in_roles(self) -> list[int]:
        idx = [i for i, r in enumerate(self.roles) if r in ("in", "in1", "in2")]
        return idx


_TVM = {
    "Conv":          SigEntry(("in", "weights", "out")),
    "ConvBias":      SigEntry(("in", "weights", "biases", "out")),
    "Dense":         SigEntry(("in", "weights", "out")),
    "DenseBias":     SigEntry(("in", "weights", "biases", "out")),
    "BiasAdd":       SigEntry(("in", "biases", "out")),
    "Add":           SigEntry(("in1", "in2", "out")),
    "Multiply":      SigEntry(("in1", "in2", "out")),
    "Divide":        SigEntry(("in1", "in2", "out")),
    "Concat":        SigEntry(("in1", "in2", "out")),
    "MaxPool":       SigEntry(("in", "out")),
    "AvgPool":       SigEntry(("in", "out")),
    "LRN":           SigEntry(("in", "out")),
    "ReLU":          SigEntry(("in", "out")),
    "Sqrt":          SigEntry(("in", "out")),
    "Negative":      SigEntry(("in", "out")),
    "Softmax":       SigEntry(("in", "out")),
    "Reshape":       SigEntry(("in", "out")),
    "ExpandDims":    SigEntry(("in", "out")),
    "Flatten":       SigEntry(("in", "out")),
    "Transpose":     SigEntry(("in", "out")),
    "Split":         SigEntry(("in", "out")),
    "Embedding":     SigEntry(("in", "weights", "out")),
}

_GLOW = {
    "Conv":          SigEntry(("out", "in", "weights", "biases")),
    "ConvBias":      SigEntry(("out", "in", "weights", "biases")),
    "Dense":         SigEntry(("out", "in", "weights")),
    "DenseBias":     SigEntry(("out", "in", "weights", "biases")),
    "BiasAdd":       SigEntry(("out", "in", "biases")),
    "Add":           SigEntry(("in1", "in2", "out")),
    "Multiply":      SigEntry(("in1", "in2", "out")),
    "Divide":        SigEntry(("in1", "in2", "out")),
    "MaxPool":       SigEntry(("in", "out")),
    "AvgPool":       SigEntry(("in", "out")),
    "LRN":           SigEntry(("out", "in")),
    "ReLU":          SigEntry(("in",), inplace_out=0),
    "Sqrt":          SigEntry(("in", "out")),
    "Negative":      SigEntry(("in", "out")),
    "Softmax":       SigEntry(("out", "in")),
    "Reshape":       SigEntry(("in", "out")),
    "ExpandDims":    SigEntry(("in", "out")),
    "Flatten":       SigEntry(("in", "out")),
    "Transpose":     SigEntry(("in", "out", "dims")),
    "Split":         SigEntry(("in", "out")),
    "InsertTensor":  SigEntry(("in1", "in2", "offset"), inplace_out=0),
    "ExtractTensor": SigEntry(("in", "out", "offset")),
    "Embedding":     SigEntry(("out", "in", "weights")),
}


def _family(style: str) -> dict:
    return _GLOW if style == "glow" else _TVM


def signature_key(labels: tuple[str, ...] | set[str]) -> str:
    """Canonical lookup key for a (possibly fused) label set."""
    labels = set(labels)
    if "Conv" in labels:
        return "ConvBias" if "BiasAdd" in labels else "Conv"
    if "Dense" in labels:
        return "DenseBias" if "BiasAdd" in labels else "Dense"
    rest = labels - {"ReLU"}
    if not rest:
        return "ReLU"
    if len(rest) == 1:
        return next(iter(rest))
    raise MissingSignature(f"no signature for label set {sorted(labels)}")


def lookup(style: str, labels) -> SigEntry:
    key = signature_key(labels)
    table = _family(style)
    if key not in table:
        raise MissingSignature(f"no {style} signature for {key}")
    entry = table[key]
    # Glow convs always carry a bias argument, fused BiasAdd label or not.
    return entry
