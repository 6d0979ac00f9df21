import numpy as np
import pytest

from dnnlift import layouts, recover, signatures, symexec, taint, zoo
from dnnlift.bundle import MemAccessLog, MemorySnapshot
from dnnlift.errors import (IdenticalConstraints, LayoutUnrecognized,
                            MissingRole, NoContiguousRun, NonIntegerDim,
                            RegionOutOfSnapshot, SizeMismatch, ZeroMuls)
from dnnlift.exprs import App, Cell, Const, app
from dnnlift.symexec import MemRegion, RoleTaggedConstraint


def _rtc(in_offs=(), w_offs=(), expr=None, base_in=0x1000, base_w=0x2000):
    ins = [Cell(base_in + o, 4) for o in in_offs]
    ws = [Cell(base_w + o, 4) for o in w_offs]
    if expr is None:
        terms = [app("mul", i, w) for i, w in zip(ins, ws)] or ins
        expr = App("add", tuple(terms)) if len(terms) > 1 else terms[0]
    return RoleTaggedConstraint(expr=expr, input_cells=ins, weight_cells=ws,
                                bias_cells=[], output_cell=(0x3000, 4))


# ---- kernel / channel / input-height pattern ----

def test_worked_example_offsets():
    c = _rtc(in_offs=[0, 4, 12, 16], w_offs=[0, 4, 8, 12])
    assert recover.conv_kernel_and_ic(c) == (2, 1, 3)


def test_one_by_one_kernel():
    # 1x1 kernel over 3 channels: one cell per channel, channel gap IH^2
    c = _rtc(in_offs=[0, 64, 128], w_offs=[0, 4, 8])
    k, i_c, ih = recover.conv_kernel_and_ic(c)
    assert (k, i_c, ih) == (1, 3, 4)  # gap 64B = 16 cells = 4*4


def test_multichannel_pattern(make_bundle):
    bundle, truth = make_bundle("cnn_small", "tvm-o0", seed=1)
    fid = [f for f, ft in truth.funcs.items()
           if ft.family == "Conv" and ft.dims["I_C"] == 4][0]
    cs = [c for c in bundle.callsites if c.func_id == fid][0]
    sig = signatures.lookup("tvm-o0", {"Conv"})
    regions = symexec.scope_regions(bundle.access_logs[fid], cs, sig)
    sinks = symexec.find_sinks(bundle.traces[fid], regions["out"], 1)
    sub = taint.taint_backward(bundle.traces[fid], {sinks[0]})
    e = symexec.simplify(symexec.sym_execute(sub, sinks[0]))
    rtc = symexec.tag_roles(e, cs, sig, bundle.access_logs[fid],
                            bundle.snapshot, sinks[0])
    assert recover.conv_kernel_and_ic(rtc) == (3, 4, 4)


def test_irregular_runs_rejected():
    c = _rtc(in_offs=[0, 4, 8, 16, 20], w_offs=[0] * 5)
    with pytest.raises(NonIntegerDim):
        recover.conv_kernel_and_ic(c)


# ---- padding ----

def test_padding_worked_example():
    assert recover.conv_padding(3, 1) == 1


def test_padding_zero_when_equal():
    assert recover.conv_padding(4, 4) == 0


def test_padding_odd_difference_rejected():
    with pytest.raises(NonIntegerDim):
        recover.conv_padding(4, 1)


# ---- output channels and stride ----

def test_oc_from_weight_region():
    # M_w = 4*2*3*3 floats = 288 bytes -> O_C = 4
    o_c, ih, oh, s = recover.conv_oc_and_stride(3, 2, None, 288, 200, 64)
    assert (o_c, ih, oh) == (4, 5, 2)
    assert s is None  # padding unknown at this point


def test_stride_forced_by_geometry():
    assert recover.solve_stride(5, 3, 0, 2) == 2
    assert recover.solve_pad_and_stride(5, 3, 2) == (0, 2)


def test_fig4_full_geometry():
    # M_w=16B, I_C=1, K=2 -> O_C=1; IH=3, OH=2 -> S=1, P=0
    o_c, ih, oh, s = recover.conv_oc_and_stride(2, 1, 0, 16, 36, 16)
    assert (o_c, ih, oh, s) == (1, 3, 2, 1)


def test_floor_truncation_geometry():
    # 56 -> 28 with K=3: only (P=1, S=2) closes the floor relation
    assert recover.solve_pad_and_stride(56, 3, 28) == (1, 2)


# ---- fully connected ----

def test_fc_dims_by_counting_muls():
    cells = [Cell(0x1000 + 4 * i) for i in range(4)]
    expr = App("add", tuple(app("mul", c, Cell(0x2000 + 4 * i))
                            for i, c in enumerate(cells)))
    c = RoleTaggedConstraint(expr=expr, input_cells=cells, weight_cells=[],
                             bias_cells=[], output_cell=(0x3000, 4))
    assert recover.fc_dims(c, 12) == (4, 3)


def test_fc_one_by_one():
    c = RoleTaggedConstraint(expr=app("mul", Cell(0x1000), Cell(0x2000)),
                             input_cells=[Cell(0x1000)], weight_cells=[],
                             bias_cells=[], output_cell=(0x3000, 4))
    assert recover.fc_dims(c, 4) == (1, 1)


def test_fc_zero_muls():
    c = RoleTaggedConstraint(expr=Cell(0x1000), input_cells=[Cell(0x1000)],
                             weight_cells=[], bias_cells=[], output_cell=(0x3000, 4))
    with pytest.raises(ZeroMuls):
        recover.fc_dims(c, 4)


# ---- pooling ----

def test_pool_stride_from_min_addr_delta():
    c1 = _rtc(in_offs=[0, 4, 12, 16])          # 2x2 window, IH=3... row gap 12
    c2 = RoleTaggedConstraint(expr=Cell(0x1008), input_cells=[Cell(0x1008), Cell(0x100C)],
                              weight_cells=[], bias_cells=[], output_cell=(0x3004, 4))
    k, s = recover.pool_dims(c1, c2)
    assert (k, s) == (2, 2)


def test_pool_identical_constraints_rejected():
    c1 = _rtc(in_offs=[0, 4, 12, 16])
    with pytest.raises(IdenticalConstraints):
        recover.pool_dims(c1, c1)


def test_pool_harness_dims(make_bundle):
    bundle, truth = make_bundle("cnn_lrn", "glow", seed=1)
    fid = [f for f, ft in truth.funcs.items() if ft.family == "AvgPool"][0]
    cs = [c for c in bundle.callsites if c.func_id == fid][0]
    sig = signatures.lookup("glow", {"AvgPool"})
    regions = symexec.scope_regions(bundle.access_logs[fid], cs, sig)
    sinks = symexec.find_sinks(bundle.traces[fid], regions["out"], 2)
    rtcs = [symexec.tag_roles(
        symexec.simplify(symexec.sym_execute(bundle.traces[fid], s)),
        cs, sig, bundle.access_logs[fid], bundle.snapshot, s) for s in sinks]
    assert recover.pool_dims(rtcs[0], rtcs[1]) == (2, 1)


# ---- LRN / softmax-style counting ----

def test_lrn_neighbors_by_counting():
    cells = [Cell(0x1000 + 16 * i) for i in range(5)]
    c = RoleTaggedConstraint(expr=Cell(0x1000), input_cells=cells,
                             weight_cells=[], bias_cells=[], output_cell=(0x2000, 4))
    assert recover.lrn_neighbors(c) == 5


def test_lrn_attrs_from_structure(make_bundle):
    bundle, truth = make_bundle("cnn_lrn", "tvm-o0", seed=1)
    fid = [f for f, ft in truth.funcs.items() if ft.family == "LRN"][0]
    cs = [c for c in bundle.callsites if c.func_id == fid][0]
    sig = signatures.lookup("tvm-o0", {"LRN"})
    regions = symexec.scope_regions(bundle.access_logs[fid], cs, sig)
    sinks = symexec.find_sinks(bundle.traces[fid], regions["out"], 1)
    rtc = symexec.tag_roles(
        symexec.simplify(symexec.sym_execute(bundle.traces[fid], sinks[0])),
        cs, sig, bundle.access_logs[fid], bundle.snapshot, sinks[0])
    attrs = recover.lrn_attrs(rtc)
    assert attrs["n"] == 3 and attrs["beta"] == 0.75
    assert abs(attrs["alpha"] - 0.5) < 1e-6
    assert abs(attrs["k"] - 2.0) < 1e-6


# ---- embedding ----

def _embedding_access(base, rows, d, n):
    reads = set()
    for r in rows:
        for i in range(d):
            reads.add((base + 4 * (r * d + i), 4))
    return MemAccessLog(0, reads, set())


def test_embedding_dims():
    region = MemRegion(0x8000, 10 * 8 * 4)
    access = _embedding_access(0x8000, [0, 2, 5, 9], 8, 10)
    assert recover.embedding_dims(access, region) == (8, 10)


def test_embedding_single_row_table():
    region = MemRegion(0x8000, 8 * 4)
    access = _embedding_access(0x8000, [0], 8, 1)
    assert recover.embedding_dims(access, region) == (8, 1)


def test_embedding_no_reads():
    with pytest.raises(NoContiguousRun):
        recover.embedding_dims(MemAccessLog(0, set(), set()), MemRegion(0x8000, 64))


def test_embedding_cross_style(make_bundle):
    for style in ("tvm-o0", "glow"):
        bundle, truth = make_bundle("text_fc", style, seed=1)
        fid = [f for f, ft in truth.funcs.items() if ft.family == "Embedding"][0]
        cs = [c for c in bundle.callsites if c.func_id == fid][0]
        sig = signatures.lookup(style, {"Embedding"})
        regions = symexec.scope_regions(bundle.access_logs[fid], cs, sig)
        assert recover.embedding_dims(bundle.access_logs[fid],
                                      regions["weights"]) == (8, 12), style


# ---- bias region ----

def test_bias_region_and_missing_role():
    assert recover.bias_region({"biases": MemRegion(0x100, 256)}).size == 256
    with pytest.raises(MissingRole):
        recover.bias_region({"in": MemRegion(0x100, 64)})


# ---- layout detection (the blocked-weights patterns) ----

def test_layout_worked_example_6d():
    # element offsets [0,1024,2048,32,...] with filter [256,128,3,3]
    a, b, k, i_c = 32, 32, 3, 128
    offsets = [4 * ((((cb * k + ky) * k + kx) * a + ca) * b)
               for cb in range(i_c // a) for ky in range(k)
               for ca in range(a) for kx in range(k)]
    assert [o // 4 for o in offsets[:4]] == [0, 1024, 2048, 32]
    desc = recover.detect_layout(offsets, 256, 128, 3)
    assert desc == layouts.LayoutDesc("tvm6d", 32, 32)
    assert desc.blocked_shape(256, 128, 3) == [8, 4, 3, 3, 32, 32]


def test_layout_contiguous_is_plain():
    offsets = [4 * i for i in range(2 * 3 * 3)]
    assert recover.detect_layout(offsets, 4, 2, 3) == layouts.PLAIN


def test_layout_glow5d_constant_stride():
    offsets = [4 * 8 * i for i in range(4 * 3 * 3)]
    assert recover.detect_layout(offsets, 16, 4, 3) == layouts.LayoutDesc("glow5d", 8)


def test_layout_unrecognized_on_permuted_order():
    a, b, k, i_c = 8, 8, 3, 16
    offsets = [4 * ((((cb * k + ky) * k + kx) * a + ca) * b)
               for kx in range(k) for cb in range(i_c // a)
               for ky in range(k) for ca in range(a)]
    with pytest.raises(LayoutUnrecognized):
        recover.detect_layout(offsets, 16, 16, 3)


# ---- parameter extraction ----

def _snap(base, values):
    return MemorySnapshot([(base, np.asarray(values, dtype="<f4").tobytes())])


def test_extract_plain_identity():
    snap = _snap(0x2000, [0.1, 0.2, 0.3, 0.4])
    t = recover.extract_params(snap, MemRegion(0x2000, 16), layouts.PLAIN,
                               (1, 1, 2, 2))
    assert np.allclose(t, np.float32([[[[0.1, 0.2], [0.3, 0.4]]]]))


def test_extract_tvm6d_bit_exact():
    rng = np.random.default_rng(2)
    w = rng.uniform(-1, 1, size=(8, 8, 3, 3)).astype(np.float32)
    desc = layouts.LayoutDesc("tvm6d", 8, 8)
    snap = _snap(0x4000, layouts.transform(w, desc))
    t = recover.extract_params(snap, MemRegion(0x4000, w.size * 4), desc,
                               (8, 8, 3, 3))
    assert np.array_equal(t, w)


def test_extract_size_mismatch():
    snap = _snap(0x2000, [0.0] * 71)
    with pytest.raises(SizeMismatch):
        recover.extract_params(snap, MemRegion(0x2000, 284), layouts.PLAIN,
                               (4, 2, 3, 3))


def test_extract_region_out_of_snapshot():
    snap = _snap(0x2000, [0.0] * 4)
    with pytest.raises(RegionOutOfSnapshot):
        recover.extract_params(snap, MemRegion(0x9000, 16), layouts.PLAIN, (4,))
