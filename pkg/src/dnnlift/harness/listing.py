"""Synthetic static opcode listings for assembly functions.

The dynamic traces carry only the modeled FP data flow; the static listing
is what the operator identifier sees, so it mixes the style's FP idioms
with integer scaffolding (address math, loop control) in realistic
proportions.  Counts and filler positions are jittered per function so the
classifier has to generalize rather than memorize sequences.
"""
from __future__ import annotations

import numpy as np

_PROLOGUE = {
    "tvm-o0": ["endbr64", "push", "mov", "sub", "mov"],
    "tvm-o3": ["endbr64", "push", "push", "mov", "lea", "and"],
    "glow":   ["push", "mov", "push", "push", "sub"],
}
_EPILOGUE = {
    "tvm-o0": ["add", "pop", "ret"],
    "tvm-o3": ["lea", "pop", "pop", "ret"],
    "glow":   ["add", "pop", "pop", "pop", "ret"],
}
_LOOP = ["add", "cmp", "jb"]

# Inner-loop idiom per (style family, operator kind).  Conv carries the
# blocked-loop address arithmetic (imul/shl, prefetch) that simpler
# single-stream operators never emit.
_BODY = {
    ("tvm-o0", "Conv"):      ["imul", "lea", "movss", "mulss", "addss", "shl"],
    ("tvm-o3", "Conv"):      ["imul", "vbroadcastss", "vfmadd231ps", "vfmadd231ps",
                              "prefetcht0", "lea"],
    ("glow", "Conv"):        ["imul", "vbroadcastss", "vmovaps", "vmulps", "vaddps",
                              "prefetcht0", "vextractps"],
    ("tvm-o0", "Dense"):     ["movss", "mulss", "addss", "inc"],
    ("tvm-o3", "Dense"):     ["vbroadcastss", "vmovups", "vfmadd231ps", "add",
                              "vhaddps"],
    ("glow", "Dense"):       ["vbroadcastss", "vmovups", "vmulps", "vaddps",
                              "vhaddps"],
    ("tvm-o0", "BiasAdd"):   ["movss", "addss", "movss", "mov"],
    ("tvm-o3", "BiasAdd"):   ["vmovups", "vaddps", "vmovups"],
    ("glow", "BiasAdd"):     ["vmovaps", "vbroadcastss", "vaddps", "vmovaps"],
    ("tvm-o0", "Add"):       ["movss", "movss", "addss", "movss", "inc"],
    ("tvm-o3", "Add"):       ["vmovups", "vmovups", "vaddps", "vmovups"],
    ("glow", "Add"):         ["vmovaps", "vaddps", "vmovaps"],
    ("tvm-o0", "Multiply"):  ["movss", "mulss", "movss", "inc"],
    ("tvm-o3", "Multiply"):  ["vmovups", "vmulps", "vmovups"],
    ("glow", "Multiply"):    ["vmovaps", "vmulps", "vmovaps"],
    ("tvm-o0", "Divide"):    ["movss", "divss", "movss"],
    ("tvm-o3", "Divide"):    ["vmovups", "vdivps", "vmovups"],
    ("glow", "Divide"):      ["vmovaps", "vdivps", "vmovaps"],
    ("tvm-o0", "Sqrt"):      ["movss", "sqrtss", "movss"],
    ("tvm-o3", "Sqrt"):      ["vmovups", "vsqrtps", "vmovups"],
    ("glow", "Sqrt"):        ["vmovaps", "vsqrtps", "vmovaps"],
    ("tvm-o0", "Negative"):  ["xorps", "movss", "subss", "movss"],
    ("tvm-o3", "Negative"):  ["vxorps", "vmovups", "vsubps", "vmovups"],
    ("glow", "Negative"):    ["vxorps", "vmovaps", "vsubps", "vmovaps"],
    ("tvm-o0", "ReLU"):      ["xorps", "movss", "maxss", "movss"],
    ("tvm-o3", "ReLU"):      ["vxorps", "vmovups", "vmaxps", "vmovups"],
    ("glow", "ReLU"):        ["vxorps", "vmovaps", "vmaxps", "vmovaps"],
    ("tvm-o0", "MaxPool"):   ["movss", "maxss", "maxss", "lea", "shl", "movss"],
    ("tvm-o3", "MaxPool"):   ["vmovups", "vmaxps", "vmaxps", "lea", "shl"],
    ("glow", "MaxPool"):     ["vmovaps", "vmaxps", "vmaxps", "lea", "vmovaps"],
    ("tvm-o0", "AvgPool"):   ["movss", "addss", "mulss", "movss"],
    ("tvm-o3", "AvgPool"):   ["vmovups", "vaddps", "vmulps", "vmovups"],
    ("glow", "AvgPool"):     ["vmovaps", "vaddps", "vmulps", "vmovaps"],
    ("tvm-o0", "LRN"):       ["movss", "mulss", "addss", "sqrtss", "divss"],
    ("tvm-o3", "LRN"):       ["vmovups", "vmulps", "vaddps", "vsqrtps", "vdivps"],
    ("glow", "LRN"):         ["vmovaps", "vmulps", "vaddps", "vsqrtps", "vdivps"],
    ("tvm-o0", "Softmax"):   ["movss", "maxss", "subss", "expss", "addss", "divss"],
    ("tvm-o3", "Softmax"):   ["vmovups", "vmaxps", "vsubps", "vexpps", "vaddps", "vdivps"],
    ("glow", "Softmax"):     ["vmovaps", "vmaxps", "vsubps", "vexpps", "vaddps", "vdivps"],
    ("tvm-o0", "Embedding"): ["movsxd", "lea", "movss", "movss", "inc"],
    ("tvm-o3", "Embedding"): ["movsxd", "lea", "vmovups", "vmovups"],
    ("glow", "Embedding"):   ["movsxd", "vmovups", "vmovups", "lea"],
    ("tvm-o0", "Reshape"):   ["lea", "rep", "movsb", "mov", "add"],
    ("tvm-o3", "Reshape"):   ["lea", "rep", "movsb", "vmovups", "add"],
    ("glow", "Reshape"):     ["lea", "rep", "movsb", "vmovaps", "add"],
    ("tvm-o0", "ExpandDims"): ["mov", "movss", "movss", "test"],
    ("tvm-o3", "ExpandDims"): ["mov", "vmovups", "vmovups", "test"],
    ("glow", "ExpandDims"):  ["mov", "vmovaps", "vmovaps", "test"],
    ("glow", "InsertTensor"): ["vxorps", "vmovaps", "mov", "vmovaps", "lea"],
}

_FILLER = ["mov", "lea", "test", "nop", "add"]

UTILITY_BODY = ["mov", "test", "jz", "sub", "mov", "shr", "call", "add", "mov"]


def _body_for(style: str, kind: str) -> list[str]:
    if (style, kind) in _BODY:
        return _BODY[(style, kind)]
    return _BODY[("tvm-o0" if style == "tvm-o0" else style, "Reshape")]


def function_listing(style: str, kinds: tuple[str, ...], work: int,
                     rng: np.random.Generator) -> list[str]:
    """Static mnemonic sequence for one (possibly fused) operator function."""
    seq = list(_PROLOGUE[style])
    reps_scale = max(2, min(10, int(np.log2(max(2, work)))))
    for kind in kinds:
        body = _body_for(style, kind)
        reps = reps_scale + int(rng.integers(0, 3))
        for _ in range(reps):
            seq.extend(body)
            if rng.random() < 0.35:
                seq.append(str(rng.choice(_FILLER)))
        seq.extend(_LOOP)
    seq.extend(_EPILOGUE[style])
    return seq


def utility_listing(rng: np.random.Generator) -> list[str]:
    seq = ["endbr64", "push", "mov"]
    for _ in range(int(rng.integers(2, 5))):
        seq.extend(UTILITY_BODY)
        if rng.random() < 0.5:
            seq.append(str(rng.choice(_FILLER)))
    seq.extend(["pop", "ret"])
    return seq
