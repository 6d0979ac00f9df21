"""Backward taint analysis over an instruction trace.

Starting from an operator's output cells (the sinks), walk the trace last to
first and keep only instructions on the data-dependency cone: an instruction
is kept iff it writes a currently-tainted byte; its written bytes are then
untainted and the source bytes of the hit lanes become tainted.  Flows are
direct data dependencies only -- addresses are concrete, so no taint moves
through pointer arithmetic or control flow.

The propagation loop is the hot kernel.  A compiled extension
(``dnnlift._taintcore``) is picked at import when available; the pure-Python
twin (``dnnlift._taint_py``) computes identical results and is forced with
DNNLIFT_NO_NATIVE=1.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import isa
from .bundle import TraceEntry
from .errors import EmptyTrace
from ._taint_py import propagate_py

if os.environ.get("DNNLIFT_NO_NATIVE") == "1":
    _native = None
else:
    try:
        from ._taintcore import propagate_native as _native
    except ImportError:
        _native = None

KERNEL = "native" if _native is not None else "python"

# Per measured pipelines, taint is only worth its cost on the operators with
# long traces; everything else goes straight to symbolic execution.
TAINT_DEFAULT_KINDS = frozenset({"Conv", "Dense"})


@dataclass
class TaintedSubtrace:
    entries: list[TraceEntry]
    total_entries: int

    @property
    def reduction(self) -> float:
        return len(self.entries) / self.total_entries if self.total_entries else 0.0


def build_lane_csr(trace: list[TraceEntry]):
    """Flatten per-entry dataflow lanes into CSR arrays for the kernels."""
    intern: dict[str, int] = {}
    entry_lane_ptr = [0]
    lane_w_ptr, lane_r_ptr = [0], [0]
    w_key, w_len, r_key, r_len = [], [], [], []
    for entry in trace:
        lanes = isa.taint_lanes(entry, intern)
        for writes, reads in lanes:
            for key, size in writes:
                w_key.append(key)
                w_len.append(size)
            lane_w_ptr.append(len(w_key))
            for key, size in reads:
                r_key.append(key)
                r_len.append(size)
            lane_r_ptr.append(len(r_key))
        entry_lane_ptr.append(len(lane_w_ptr) - 1)
    return (np.asarray(entry_lane_ptr, dtype=np.int64),
            np.asarray(lane_w_ptr, dtype=np.int64),
            np.asarray(lane_r_ptr, dtype=np.int64),
            np.asarray(w_key, dtype=np.int64), np.asarray(w_len, dtype=np.int32),
            np.asarray(r_key, dtype=np.int64), np.asarray(r_len, dtype=np.int32))


def _run_kernel(csr, sinks, kernel=None):
    sink_key = np.asarray([a for a, _ in sinks], dtype=np.int64)
    sink_len = np.asarray([w for _, w in sinks], dtype=np.int32)
    fn = {"native": _native, "python": propagate_py, None: _native or propagate_py}[kernel]
    return fn(*csr, sink_key, sink_len)


def taint_backward(trace: list[TraceEntry], sinks: set[tuple[int, int]],
                   kernel: str | None = None) -> TaintedSubtrace:
    """Keep the subsequence of ``trace`` that the sink cells depend on."""
    if not trace:
        raise EmptyTrace("cannot taint an empty trace")
    if not sinks:
        raise ValueError("sinks must be non-empty")
    sink_list = sorted(sinks)
    written = set()
    for e in trace:
        for addr, width in e.writes:
            written.update(range(addr, addr + width))
    if not any(any(a + i in written for i in range(w)) for a, w in sink_list):
        warnings.warn("sink cells are never written in this trace; empty subtrace")
        return TaintedSubtrace(entries=[], total_entries=len(trace))
    csr = build_lane_csr(trace)
    kept = _run_kernel(csr, sink_list, kernel)
    entries = [e for e, k in zip(trace, kept) if k]
    return TaintedSubtrace(entries=entries, total_entries=len(trace))


def passthrough(trace: list[TraceEntry]) -> TaintedSubtrace:
    """Wrap a full trace unchanged (taint policy 'never' / non-Conv/FC ops)."""
    return TaintedSubtrace(entries=list(trace), total_entries=len(trace))


def should_taint(labels: set[str], policy: str = "auto") -> bool:
    if policy == "always":
        return True
    if policy == "never":
        return False
    return bool(labels & TAINT_DEFAULT_KINDS)
