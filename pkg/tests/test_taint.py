import warnings

import numpy as np
import pytest

from dnnlift import signatures, symexec, taint, zoo
from dnnlift.bundle import Operand, TraceEntry
from dnnlift.errors import EmptyTrace


def _entry(seq, opcode, ops, reads=(), writes=()):
    return TraceEntry(seq_no=seq, opcode=opcode, operands=ops,
                      reads=list(reads), writes=list(writes))


def _spec_example_trace():
    # mulss xmm0 <- xmm0 * [w]; movss [out] <- xmm0; movss [scratch] <- xmm1
    return [
        _entry(0, "mulss", [Operand.r("xmm0"), Operand.m(0x2000, 4)],
               reads=[(0x2000, 4)]),
        _entry(1, "movss", [Operand.m(0x3000, 4), Operand.r("xmm0")],
               writes=[(0x3000, 4)]),
        _entry(2, "movss", [Operand.m(0x4000, 4), Operand.r("xmm1")],
               writes=[(0x4000, 4)]),
    ]


def test_dependency_cone_drops_scratch_store():
    sub = taint.taint_backward(_spec_example_trace(), {(0x3000, 4)})
    assert [e.seq_no for e in sub.entries] == [0, 1]


def test_sink_never_written_warns_and_returns_empty():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        sub = taint.taint_backward(_spec_example_trace(), {(0x9999000, 4)})
    assert sub.entries == []
    assert any("never written" in str(x.message) for x in w)


def test_empty_trace_raises():
    with pytest.raises(EmptyTrace):
        taint.taint_backward([], {(0x1000, 4)})


def test_monotone_in_sinks():
    trace = _spec_example_trace()
    small = taint.taint_backward(trace, {(0x3000, 4)})
    big = taint.taint_backward(trace, {(0x3000, 4), (0x4000, 4)})
    assert set(e.seq_no for e in small.entries) <= set(e.seq_no for e in big.entries)


def test_lane_granular_vector_taint():
    # vmulps writes 8 lanes; only the sink lane's sources matter, but the
    # instruction itself is kept and scratch vector work is dropped
    trace = [
        _entry(0, "vmovups", [Operand.r("ymm1"), Operand.m(0x1000, 32)],
               reads=[(0x1000, 32)]),
        _entry(1, "vmulps", [Operand.r("ymm0"), Operand.r("ymm0"), Operand.r("ymm1")]),
        _entry(2, "vmulps", [Operand.r("ymm5"), Operand.r("ymm5"), Operand.r("ymm6")]),
        _entry(3, "vmovups", [Operand.m(0x2000, 32), Operand.r("ymm0")],
               writes=[(0x2000, 32)]),
    ]
    sub = taint.taint_backward(trace, {(0x2000, 4)})  # lane 0 only
    assert [e.seq_no for e in sub.entries] == [0, 1, 3]


def test_kernels_agree(make_bundle):
    bundle, truth = make_bundle("cnn_small", "tvm-o3", seed=1)
    for fid, ft in truth.funcs.items():
        if ft.family not in ("Conv", "Dense"):
            continue
        trace = bundle.traces[fid]
        cs = [c for c in bundle.callsites if c.func_id == fid][0]
        sig = signatures.lookup("tvm-o3", ft.labels)
        regions = symexec.scope_regions(bundle.access_logs[fid], cs, sig)
        sinks = symexec.find_sinks(trace, regions["out"], 1)
        a = taint.taint_backward(trace, set(sinks), kernel="python")
        b = taint.taint_backward(trace, set(sinks),
                                 kernel="native" if taint._native else "python")
        assert [e.seq_no for e in a.entries] == [e.seq_no for e in b.entries]


def test_policy_knob():
    assert taint.should_taint({"Conv"}, "auto")
    assert taint.should_taint({"Dense", "BiasAdd"}, "auto")
    assert not taint.should_taint({"MaxPool"}, "auto")
    assert taint.should_taint({"MaxPool"}, "always")
    assert not taint.should_taint({"Conv"}, "never")
