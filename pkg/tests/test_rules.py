import copy

import numpy as np
import pytest

from dnnlift import layouts, opid, recover, rules
from dnnlift.bundle import MemorySnapshot
from dnnlift.exprs import App, Cell, app
from dnnlift.opid import OperatorLabelVec
from dnnlift.recover import RecoveredOp
from dnnlift.rules import Finding, OpContext, apply_rules
from dnnlift.symexec import MemRegion, RoleTaggedConstraint


def _lv(labels, conf_hi=0.97):
    bits = [n in labels for n in opid.LABELS]
    conf = [conf_hi if b else 0.02 for b in bits]
    return OperatorLabelVec(bits=bits, confidences=conf)


def _ctx(call, family, fused=None, dims=None, attrs=None, in_sources=None,
         sem_prev=None, regions=None, constraints=None, labels=None,
         needs_conf=0.97):
    rec = RecoveredOp(family=family, fused=fused or (family,),
                      dims=dims or {}, attrs=attrs or {})
    return OpContext(call_index=call, func_id=call, labels=labels or
                     _lv(set(rec.fused) & set(opid.LABELS), needs_conf),
                     rec=rec, constraints=constraints or [],
                     regions=regions or {},
                     in_sources=in_sources or [("input",)], sem_prev=sem_prev)


def _appendix_case():
    """Broken conv between a good [1,64,56,56] producer and a pool."""
    i_c, k, o_c = 64, 3, 128
    w = np.random.default_rng(0).uniform(-1, 1, size=(o_c, i_c, k, k)).astype("<f4")
    w_base = 0x100000
    snapshot = MemorySnapshot([(w_base, w.tobytes())])
    prev = _ctx(1, "Conv", dims={"K": 3, "S": 1, "P": 1, "O_C": 64, "I_C": 3,
                                 "IH": 56, "OH": 56})
    offsets = [4 * ((ci * k + ky) * k + kx)
               for ci in range(i_c) for ky in range(k) for kx in range(k)]
    c = RoleTaggedConstraint(
        expr=Cell(0x1), input_cells=[], weight_cells=[Cell(w_base + o) for o in offsets],
        bias_cells=[], output_cell=(0x2, 4))
    broken = _ctx(2, "Conv",
                  attrs={"dim_error": "I_C = cells/K^2 = 0.25 is not a positive integer",
                         "n_muls": 576, "m_w": o_c * i_c * k * k * 4,
                         "m_i": 64 * 56 * 56 * 4, "m_o": 128 * 28 * 28 * 4},
                  in_sources=[("op", 1)], sem_prev=1,
                  regions={"weights": MemRegion(w_base, w.size * 4)},
                  constraints=[c])
    return [prev, broken], snapshot, w


def test_rule1_appendix_repair():
    ops, snapshot, w = _appendix_case()
    findings = apply_rules(ops, snapshot, (1, 3, 56, 56), style="tvm-o0")
    fixed = [f for f in findings if f.rule_id == 1 and f.fix_applied]
    assert fixed, findings
    dims = ops[1].rec.dims
    assert (dims["O_C"], dims["I_C"], dims["K"], dims["K"]) == (128, 64, 3, 3)
    assert (dims["S"], dims["P"]) == (2, 1)
    assert np.array_equal(ops[1].rec.params["weights"], w)


def test_rule1_unrepairable_flags_review():
    ops, snapshot, _ = _appendix_case()
    ops[1].rec.attrs["n_muls"] = 577  # not divisible by any channel count
    findings = apply_rules(ops, snapshot, (1, 3, 56, 56), style="tvm-o0")
    f = [f for f in findings if f.rule_id == 1][0]
    assert not f.fix_applied
    assert "rule1-unrepairable" in ops[1].rec.needs_review


def test_rule2_add_with_parameter_input():
    ctx = _ctx(1, "Add", in_sources=[("op", 0), ("region", MemRegion(0x100, 16))])
    prev = _ctx(0, "ReLU")
    findings = apply_rules([prev, ctx], MemorySnapshot([]), (4,))
    assert any(f.rule_id == 2 and f.fix_applied for f in findings)
    assert ctx.rec.family == "BiasAdd"
    assert ctx.rec.attrs["bias_slot"] == 1


def test_rule2_add_between_operators_untouched():
    ctx = _ctx(2, "Add", in_sources=[("op", 0), ("op", 1)])
    findings = apply_rules([_ctx(0, "ReLU"), _ctx(1, "ReLU"), ctx],
                           MemorySnapshot([]), (4,))
    assert ctx.rec.family == "Add"
    assert not any(f.rule_id == 2 for f in findings)


def test_rule3_split_grows_becomes_concat():
    ctx = _ctx(1, "Split", regions={"in": MemRegion(0x100, 64),
                                    "out": MemRegion(0x200, 128)})
    findings = apply_rules([ctx], MemorySnapshot([]), (16,))
    assert ctx.rec.family == "Concat"
    assert any(f.rule_id == 3 and f.fix_applied for f in findings)


def test_rule4_relu_without_max_dropped():
    c = RoleTaggedConstraint(expr=app("mul", Cell(0x10), Cell(0x20)),
                             input_cells=[Cell(0x10)], weight_cells=[Cell(0x20)],
                             bias_cells=[], output_cell=(0x30, 4))
    ctx = _ctx(1, "Dense", fused=("Dense", "BiasAdd", "ReLU"),
               dims={"M": 4, "N": 3}, attrs={"has_max": False}, constraints=[c])
    findings = apply_rules([ctx], MemorySnapshot([]), (4,))
    assert "ReLU" not in ctx.rec.fused
    assert any(f.rule_id == 4 and f.fix_applied and not f.subtype for f in findings)


def test_rule4_converse_restores_relu():
    # mislabeled DenseAdd whose constraint does contain a max
    ctx = _ctx(1, "Dense", fused=("Dense", "BiasAdd"),
               dims={"M": 4, "N": 3}, attrs={"has_max": True})
    findings = apply_rules([ctx], MemorySnapshot([]), (4,))
    assert "ReLU" in ctx.rec.fused
    assert any(f.rule_id == 4 and f.subtype == "converse" for f in findings)


def test_rule4_converse_ignores_pooling():
    ctx = _ctx(1, "MaxPool", dims={"K": 2, "S": 2}, attrs={"has_max": True})
    findings = apply_rules([ctx], MemorySnapshot([]), (1, 2, 4, 4))
    assert ctx.rec.fused == ("MaxPool",)
    assert not findings


def test_rule5_low_confidence():
    ctx = _ctx(1, "LRN", attrs={"n": 3, "alpha": 0.5, "k": 2.0, "beta": 0.75},
               needs_conf=0.6)
    findings = apply_rules([ctx], MemorySnapshot([]), (1, 2, 4, 4))
    assert any(f.rule_id == 5 and not f.fix_applied for f in findings)


def test_rule5_suppressed_by_rule2_fix():
    ctx = _ctx(1, "Add", in_sources=[("op", 0), ("region", MemRegion(0x100, 16))],
               needs_conf=0.6)
    findings = apply_rules([_ctx(0, "ReLU"), ctx], MemorySnapshot([]), (4,))
    assert any(f.rule_id == 2 for f in findings)
    assert not any(f.rule_id == 5 for f in findings)


def test_rule6_shape_mismatch():
    prev = _ctx(1, "Conv", dims={"K": 1, "S": 1, "P": 0, "O_C": 3, "I_C": 1,
                                 "IH": 6, "OH": 6})
    bad = _ctx(2, "Conv", dims={"K": 3, "S": 1, "P": 0, "O_C": 4, "I_C": 8,
                                "IH": 6, "OH": 4},
               in_sources=[("op", 1)], sem_prev=1)
    findings = apply_rules([prev, bad], MemorySnapshot([]), (1, 1, 6, 6))
    assert any(f.rule_id == 6 and not f.fix_applied for f in findings)
    assert "rule6-shape-mismatch" in bad.rec.needs_review


def test_all_consistent_model_zero_findings():
    prev = _ctx(1, "Conv", dims={"K": 3, "S": 1, "P": 1, "O_C": 4, "I_C": 1,
                                 "IH": 8, "OH": 8})
    nxt = _ctx(2, "Conv", dims={"K": 3, "S": 2, "P": 1, "O_C": 8, "I_C": 4,
                                "IH": 8, "OH": 4},
               in_sources=[("op", 1)], sem_prev=1)
    findings = apply_rules([prev, nxt], MemorySnapshot([]), (1, 1, 8, 8))
    assert findings == []


def test_idempotence():
    ops, snapshot, _ = _appendix_case()
    f1 = apply_rules(ops, snapshot, (1, 3, 56, 56), style="tvm-o0")
    state = copy.deepcopy([(c.rec.family, c.rec.fused, c.rec.dims) for c in ops])
    f2 = apply_rules(ops, snapshot, (1, 3, 56, 56), style="tvm-o0")
    assert [(c.rec.family, c.rec.fused, c.rec.dims) for c in ops] == state
    assert len([f for f in f2 if f.fix_applied]) == 0
