"""Vector-blocked weight layout transforms and their inverses.

Plain convolution weights are [O_C, I_C, K, K] row-major.  To feed SIMD
lanes from contiguous memory, backends re-tile them:

* 5-d blocking: ``[O_C/A, I_C, K, K, A]`` -- output channels interleaved in
  groups of A (A=8 for the 8-lane kernels).
* 6-d blocking: ``[O_C/B, I_C/A, K, K, A, B]`` -- both channel axes blocked.

``to_*`` is what the codegen harness applies before placing weights in the
snapshot; ``from_*`` is the inversion used by parameter extraction.  Both
are exact permutations, so round trips are bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LayoutDesc:
    kind: str       # "plain" | "glow5d" | "tvm6d"
    a: int = 0
    b: int = 0

    def blocked_shape(self, o_c: int, i_c: int, k: int) -> list[int]:
        if self.kind == "plain":
            return [o_c, i_c, k, k]
        if self.kind == "glow5d":
            return [o_c // self.a, i_c, k, k, self.a]
        return [o_c // self.b, i_c // self.a, k, k, self.a, self.b]


PLAIN = LayoutDesc("plain")


def to_glow5d(w: np.ndarray, a: int) -> np.ndarray:
    o, i, k, _ = w.shape
    assert o % a == 0
    return np.ascontiguousarray(
        w.reshape(o // a, a, i, k, k).transpose(0, 2, 3, 4, 1)).ravel()


def from_glow5d(flat: np.ndarray, a: int, o: int, i: int, k: int) -> np.ndarray:
    return np.ascontiguousarray(
        flat.reshape(o // a, i, k, k, a).transpose(0, 4, 1, 2, 3)).reshape(o, i, k, k)


def to_tvm6d(w: np.ndarray, a: int, b: int) -> np.ndarray:
    o, i, k, _ = w.shape
    assert o % b == 0 and i % a == 0
    return np.ascontiguousarray(
        w.reshape(o // b, b, i // a, a, k, k).transpose(0, 2, 4, 5, 3, 1)).ravel()


def from_tvm6d(flat: np.ndarray, a: int, b: int, o: int, i: int, k: int) -> np.ndarray:
    return np.ascontiguousarray(
        flat.reshape(o // b, i // a, k, k, a, b).transpose(0, 5, 1, 4, 2, 3)).reshape(o, i, k, k)


def transform(w: np.ndarray, desc: LayoutDesc) -> np.ndarray:
    if desc.kind == "plain":
        return np.ascontiguousarray(w).ravel()
    if desc.kind == "glow5d":
        return to_glow5d(w, desc.a)
    return to_tvm6d(w, desc.a, desc.b)


def invert(flat: np.ndarray, desc: LayoutDesc, o: int, i: int, k: int) -> np.ndarray:
    if desc.kind == "plain":
        return flat.reshape(o, i, k, k)
    if desc.kind == "glow5d":
        return from_glow5d(flat, desc.a, o, i, k)
    return from_tvm6d(flat, desc.a, desc.b, o, i, k)


def weight_element_index(desc: LayoutDesc, o_c: int, i_c: int, k: int,
                         ko: int, ci: int, ky: int, kx: int) -> int:
    """Flat element index of plain weight (ko, ci, ky, kx) under ``desc``."""
    if desc.kind == "plain":
        return ((ko * i_c + ci) * k + ky) * k + kx
    if desc.kind == "glow5d":
        return (((ko // desc.a * i_c + ci) * k + ky) * k + kx) * desc.a + ko % desc.a
    a, b = desc.a, desc.b
    return (((((ko // b) * (i_c // a) + ci // a) * k + ky) * k + kx) * a
            + ci % a) * b + ko % b
