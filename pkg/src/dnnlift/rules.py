"""Model-level error detection and automated fixing.

Six checks run over the draft model (recovered ops plus graph) to a
fixpoint of at most three passes.  Rules 1-4 carry automated fixes; rules
5-6 only flag for human review:

1. Conv dimensions must be integers; broken ones are rebuilt from the
   predecessor's shape, the constraint's multiplication count
   (K = sqrt(n/I_C)), and the measured region sizes.
2. An Add whose input is not another operator's output is a BiasAdd.
3. A Split whose output region is not smaller than its input region is a
   Concatenate.
4. An operator labeled ReLU must have a max in its constraint; the converse
   also fires for fusable families (max present, label missing).
5. Low classifier confidence without a rule 2-4 fix needs review.
6. Producer/consumer shape mismatches need review.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layouts
from .errors import (DegenerateOutput, LayoutUnrecognized, NonIntegerDim)
from .opid import OperatorLabelVec
from .recover import (ConvDims, RecoveredOp, detect_layout, extract_params,
                      solve_pad_and_stride, F32)
from .symexec import MemRegion, RoleTaggedConstraint

MAX_PASSES = 3

# families ReLU can be fused into (guards the rule-4 converse; pooling and
# normalization legitimately contain max without any ReLU)
_RELU_FUSABLE = ("Conv", "Dense", "BiasAdd", "Add")


@dataclass
class OpContext:
    """One labeled callsite with everything recovery learned about it."""
    call_index: int
    func_id: int
    labels: OperatorLabelVec
    rec: RecoveredOp
    constraints: list[RoleTaggedConstraint]
    regions: dict[str, MemRegion]
    in_sources: list = field(default_factory=list)  # ("op", call) | ("input",) | ("region", MemRegion)
    sem_prev: int | None = None                      # nearest non-dropped producer


@dataclass
class Finding:
    rule_id: int
    func_id: int
    call_index: int
    description: str
    fix_applied: bool
    before: dict | None = None
    after: dict | None = None
    subtype: str = ""

    def to_json(self) -> dict:
        return {"rule": self.rule_id, "func_id": self.func_id,
                "call_index": self.call_index, "description": self.description,
                "fix_applied": self.fix_applied, "subtype": self.subtype,
                "before": self.before, "after": self.after}


def _shape_after(op: RecoveredOp, in_shape):
    fam = op.family
    if op.dropped:
        return in_shape
    if fam == "Conv":
        if not op.dims:
            return None
        return (1, op.dims["O_C"], op.dims["OH"], op.dims["OH"])
    if fam == "Dense":
        return (op.dims["N"],) if op.dims else None
    if fam in ("MaxPool", "AvgPool"):
        if in_shape is None or len(in_shape) != 4 or not op.dims:
            return None
        oh = (in_shape[2] - op.dims["K"]) // op.dims["S"] + 1
        return (in_shape[0], in_shape[1], oh, oh)
    if fam == "Embedding":
        return (op.attrs.get("L", 0), op.dims.get("D", 0))
    return in_shape


def compute_shapes(ops: list[OpContext], input_shape) -> dict[int, tuple | None]:
    shapes: dict[int, tuple | None] = {}
    for ctx in ops:
        src = ctx.in_sources[0] if ctx.in_sources else ("input",)
        if src[0] == "op":
            in_shape = shapes.get(src[1])
        elif src[0] == "input":
            in_shape = input_shape
        else:
            region = src[1]
            in_shape = (region.size // F32,)
        # binary ops follow their larger operand
        for other in ctx.in_sources[1:]:
            cand = None
            if other[0] == "op":
                cand = shapes.get(other[1])
            elif other[0] == "input":
                cand = input_shape
            if cand is not None and (in_shape is None or
                                     np.prod(cand) > np.prod(in_shape)):
                in_shape = cand
        shapes[ctx.call_index] = _shape_after(ctx.rec, in_shape)
    return shapes


def _rule1_fix(ctx: OpContext, prev_shape, snapshot, style: str) -> bool:
    """Rebuild broken Conv dims from neighbors and the constraint."""
    if prev_shape is None or len(prev_shape) != 4:
        return False
    i_c = prev_shape[1]
    n = ctx.rec.attrs.get("n_muls", 0)
    if i_c <= 0 or n <= 0 or n % i_c:
        return False
    k = math.isqrt(n // i_c)
    if k * k * i_c != n:
        return False
    m_w, m_i, m_o = (ctx.rec.attrs[x] for x in ("m_w", "m_i", "m_o"))
    if m_w % (F32 * i_c * k * k):
        return False
    o_c = m_w // (F32 * i_c * k * k)
    ih2 = m_i // (F32 * i_c)
    ih = math.isqrt(ih2)
    if ih * ih != ih2 or ih != prev_shape[2]:
        return False
    oh2 = m_o // (F32 * o_c)
    oh = math.isqrt(oh2)
    if oh * oh != oh2:
        return False
    try:
        p, s = solve_pad_and_stride(ih, k, oh)
    except (NonIntegerDim, DegenerateOutput):
        return False
    dims = ConvDims(K=k, I_C=i_c, O_C=o_c, S=s, P=p, IH=ih, OH=oh)
    ctx.rec.dims = dims.asdict()
    ctx.rec.attrs.pop("dim_error", None)
    c = ctx.constraints[0]
    try:
        if style == "tvm-o0":
            # no layout optimization exists at -O0: storage is canonical even
            # when a runtime retile scrambles the load order
            ctx.rec.layout = layouts.PLAIN
        else:
            ctx.rec.layout = detect_layout(c.weight_offsets(), o_c, i_c, k)
        ctx.rec.params["weights"] = extract_params(
            snapshot, ctx.regions["weights"], ctx.rec.layout, (o_c, i_c, k, k))
        if "biases" in ctx.regions:
            ctx.rec.params["biases"] = extract_params(
                snapshot, ctx.regions["biases"], layouts.PLAIN,
                (ctx.regions["biases"].size // F32,))
    except LayoutUnrecognized as e:
        ctx.rec.attrs["layout_error"] = str(e)
    return True


def apply_rules(ops: list[OpContext], snapshot, input_shape,
                style: str = "tvm-o3") -> list[Finding]:
    """Run rules 1-6 to fixpoint; mutates the recovered ops in place."""
    findings: list[Finding] = []
    fixed_by_234: set[int] = set()

    for _ in range(MAX_PASSES):
        changed = False
        shapes = compute_shapes(ops, input_shape)
        for ctx in ops:
            rec = ctx.rec
            # Rule 1: Conv dimensions must be integers
            if rec.family == "Conv" and "dim_error" in rec.attrs:
                prev_shape = shapes.get(ctx.sem_prev) if ctx.sem_prev is not None \
                    else input_shape
                before = {"error": rec.attrs["dim_error"]}
                if _rule1_fix(ctx, prev_shape, snapshot, style):
                    findings.append(Finding(
                        1, ctx.func_id, ctx.call_index,
                        "non-integer Conv dims rebuilt from predecessor shape "
                        f"and K=sqrt(n/I_C)", True, before, dict(rec.dims)))
                    changed = True
                else:
                    findings.append(Finding(
                        1, ctx.func_id, ctx.call_index,
                        f"Conv dims not integral and not repairable: "
                        f"{rec.attrs['dim_error']}", False, before, None))
                    rec.needs_review.append("rule1-unrepairable")
            # Rule 2: Add fed by a non-operator input is a BiasAdd
            if rec.family == "Add" and len(ctx.in_sources) == 2:
                param_slots = [i for i, s in enumerate(ctx.in_sources)
                               if s[0] == "region"]
                if param_slots:
                    before = {"family": "Add"}
                    rec.family = "BiasAdd"
                    rec.fused = tuple("BiasAdd" if x == "Add" else x for x in rec.fused)
                    rec.attrs["bias_slot"] = param_slots[-1]
                    findings.append(Finding(
                        2, ctx.func_id, ctx.call_index,
                        "Add input is not another operator's output; "
                        "re-typed as BiasAdd", True, before, {"family": "BiasAdd"}))
                    fixed_by_234.add(ctx.call_index)
                    changed = True
            # Rule 3: Split must shrink its input
            if rec.family == "Split":
                out_sz = ctx.regions.get("out", MemRegion(0, 0)).size
                in_r = [r for k, r in ctx.regions.items() if k.startswith("in")]
                in_sz = max((r.size for r in in_r), default=0)
                if out_sz >= in_sz:
                    rec.family = "Concat"
                    rec.fused = tuple("Concat" if x == "Split" else x for x in rec.fused)
                    findings.append(Finding(
                        3, ctx.func_id, ctx.call_index,
                        f"Split output region ({out_sz}B) not smaller than input "
                        f"({in_sz}B); re-typed as Concatenate", True,
                        {"family": "Split"}, {"family": "Concat"}))
                    fixed_by_234.add(ctx.call_index)
                    changed = True
            # Rule 4: a ReLU label requires a max in the constraint
            has_max = bool(rec.attrs.get("has_max"))
            if "ReLU" in rec.fused and not has_max:
                rec.fused = tuple(x for x in rec.fused if x != "ReLU")
                if rec.family == "ReLU":
                    rec.family = rec.fused[0] if rec.fused else "ReLU"
                findings.append(Finding(
                    4, ctx.func_id, ctx.call_index,
                    "constraint has no max; ReLU label removed", True,
                    {"labels": "+ReLU"}, {"labels": "-ReLU"}))
                fixed_by_234.add(ctx.call_index)
                changed = True
            elif has_max and "ReLU" not in rec.fused and \
                    rec.family in _RELU_FUSABLE:
                rec.fused = rec.fused + ("ReLU",)
                findings.append(Finding(
                    4, ctx.func_id, ctx.call_index,
                    "constraint contains max; ReLU label restored", True,
                    {"labels": "-ReLU"}, {"labels": "+ReLU"}, subtype="converse"))
                fixed_by_234.add(ctx.call_index)
                changed = True
        if not changed:
            break

    shapes = compute_shapes(ops, input_shape)
    for ctx in ops:
        # Rule 5: low confidence without a rule 2-4 fix
        if ctx.labels.needs_review and ctx.call_index not in fixed_by_234:
            findings.append(Finding(
                5, ctx.func_id, ctx.call_index,
                f"classifier confidence below {0.8} for labels "
                f"{sorted(ctx.labels.labels)}", False))
            ctx.rec.needs_review.append("rule5-low-confidence")
        # Rule 6: input shape must match the producer's output shape
        if ctx.rec.family == "Conv" and ctx.rec.dims:
            prev_shape = shapes.get(ctx.sem_prev) if ctx.sem_prev is not None \
                else input_shape
            if prev_shape is not None and len(prev_shape) == 4:
                if prev_shape[1] != ctx.rec.dims["I_C"] or \
                        prev_shape[2] != ctx.rec.dims["IH"]:
                    findings.append(Finding(
                        6, ctx.func_id, ctx.call_index,
                        f"input shape {prev_shape} does not match recovered "
                        f"Conv I_C={ctx.rec.dims['I_C']}, IH={ctx.rec.dims['IH']}",
                        False))
                    ctx.rec.needs_review.append("rule6-shape-mismatch")
        elif ctx.rec.family == "Dense" and ctx.rec.dims:
            src = ctx.in_sources[0] if ctx.in_sources else ("input",)
            prev_shape = None
            if src[0] == "op":
                prev_shape = shapes.get(src[1])
            elif src[0] == "input":
                prev_shape = input_shape
            if prev_shape is not None and \
                    int(np.prod(prev_shape)) != ctx.rec.dims["M"]:
                findings.append(Finding(
                    6, ctx.func_id, ctx.call_index,
                    f"flattened input {prev_shape} does not match Dense M="
                    f"{ctx.rec.dims['M']}", False))
                ctx.rec.needs_review.append("rule6-shape-mismatch")
    return findings
