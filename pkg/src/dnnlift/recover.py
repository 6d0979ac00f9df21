"""Dimension, layout, and parameter recovery patterns.

Everything here reads two kinds of facts: role-tagged symbolic constraints
(relative cell offsets, operation counts) and region sizes measured from
access logs.  Convolution is the worked case: the kernel edge is the length
of the maximal 4-byte-stride run of input offsets, channel counts follow
from cell counts and region sizes, and stride/padding close the output-size
relation OH = floor((IH + 2P - K)/S) + 1.  Element size is fixed at 4
bytes (f32); other element widths are rejected loudly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import exprs, layouts
from .bundle import MemAccessLog, MemorySnapshot
from .errors import (DegenerateOutput, IdenticalConstraints, LayoutUnrecognized,
                     MissingRole, NoContiguousRun, NonIntegerDim,
                     RegionOutOfSnapshot, SizeMismatch, ZeroMuls)
from .symexec import MemRegion, RoleTaggedConstraint

F32 = 4  # bytes per element, per the x86 f32 calling convention of these kernels


@dataclass
class ConvDims:
    K: int
    I_C: int
    O_C: int
    S: int
    P: int
    IH: int
    OH: int

    def asdict(self) -> dict:
        return {"K": self.K, "I_C": self.I_C, "O_C": self.O_C, "S": self.S,
                "P": self.P, "IH": self.IH, "OH": self.OH}


@dataclass
class RecoveredOp:
    family: str
    fused: tuple[str, ...]
    dims: dict = field(default_factory=dict)
    layout: layouts.LayoutDesc = layouts.PLAIN
    params: dict = field(default_factory=dict)   # role -> np.ndarray (canonical)
    attrs: dict = field(default_factory=dict)
    needs_review: list[str] = field(default_factory=list)
    dropped: bool = False                        # recorded, then elided on rebuild


def _int(value: float, what: str) -> int:
    r = round(value)
    if abs(value - r) > 1e-9 or r <= 0:
        raise NonIntegerDim(f"{what} = {value} is not a positive integer")
    return int(r)


def _isqrt(value: float, what: str) -> int:
    return _int(math.sqrt(value), what)


def _offset_runs(offsets: list[int]) -> list[list[int]]:
    runs: list[list[int]] = []
    for off in offsets:
        if runs and off == runs[-1][-1] + F32:
            runs[-1].append(off)
        else:
            runs.append([off])
    return runs


def conv_kernel_and_ic(c: RoleTaggedConstraint) -> tuple[int, int, int | None]:
    """(K, I_C, IH) from the input-offset pattern of one output's constraint.

    IH comes from the gap between the first two kernel rows and is None when
    the constraint alone cannot show it (single-run windows).
    """
    offsets = c.input_offsets()
    if not offsets:
        raise NonIntegerDim("constraint has no input cells")
    runs = _offset_runs(offsets)
    k = len(runs[0])
    if any(len(r) != k for r in runs):
        raise NonIntegerDim(f"irregular input runs {[len(r) for r in runs]}")
    i_c = _int(len(offsets) / (k * k), "I_C = cells/K^2")
    ih = None
    if len(runs) > 1:
        gap = runs[1][0] - runs[0][0]
        if k == 1:
            ih = _isqrt(gap / F32, "IH = sqrt(channel gap)")
        else:
            ih = _int(gap / F32, "IH = row gap / 4")
    return k, i_c, ih


def conv_padding(this_ih: int, prev_oh: int) -> int:
    """Zero padding from the input-buffer height against the producer's output."""
    if (this_ih - prev_oh) % 2:
        raise NonIntegerDim(f"padding ({this_ih}-{prev_oh})/2 is not integral")
    p = (this_ih - prev_oh) // 2
    if p < 0:
        raise NonIntegerDim(f"negative padding from IH={this_ih}, prev OH={prev_oh}")
    return p


def conv_oc_and_stride(k: int, i_c: int, p: int | None, m_w: int, m_i: int,
                       m_o: int) -> tuple[int, int, int, int | None]:
    """(O_C, IH, OH, S) from region sizes; S is None when P is unknown."""
    o_c = _int(m_w / (F32 * i_c * k * k), "O_C = M_w/(4*I_C*K^2)")
    ih = _isqrt(m_i / (F32 * i_c), "IH = sqrt(M_i/(4*I_C))")
    oh = _isqrt(m_o / (F32 * o_c), "OH = sqrt(M_o/(4*O_C))")
    s = None
    if p is not None:
        if oh == 1:
            raise DegenerateOutput("OH = 1 leaves stride unconstrained")
        s = solve_stride(ih, k, p, oh)
    return o_c, ih, oh, s


def solve_stride(ih: int, k: int, p: int, oh: int) -> int:
    if oh == 1:
        raise DegenerateOutput("OH = 1 leaves stride unconstrained")
    for s in range(1, ih + 2 * p + 1):
        if (ih + 2 * p - k) // s + 1 == oh:
            return s
    raise NonIntegerDim(f"no stride satisfies OH={oh} from IH={ih},K={k},P={p}")


def solve_pad_and_stride(ih: int, k: int, oh: int) -> tuple[int, int]:
    """Smallest (P, S) closing the output-size relation; P first."""
    if oh == 1:
        raise DegenerateOutput("OH = 1 leaves stride unconstrained")
    for p in range(0, k + 1):
        for s in range(1, ih + 2 * p + 1):
            if (ih + 2 * p - k) // s + 1 == oh:
                return p, s
    raise NonIntegerDim(f"no (P,S) satisfies OH={oh} from IH={ih},K={k}")


def recover_conv(c: RoleTaggedConstraint, regions: dict[str, MemRegion],
                 prev_oh: int | None) -> tuple[ConvDims, list[str]]:
    """Full Conv geometry from one constraint plus region sizes."""
    flags: list[str] = []
    k, i_c, ih_pattern = conv_kernel_and_ic(c)
    m_w = regions["weights"].size
    m_i = _in_region(regions).size
    m_o = regions["out"].size
    o_c, ihb, oh, _ = conv_oc_and_stride(k, i_c, None, m_w, m_i, m_o)
    if ih_pattern is not None and ih_pattern != ihb:
        raise NonIntegerDim(
            f"constraint IH {ih_pattern} != region IH {ihb}")
    if oh == 1:
        flags.append("stride unconstrained (OH=1); defaulted to 1")
        p = conv_padding(ihb, prev_oh) if prev_oh is not None and prev_oh < ihb else 0
        return ConvDims(K=k, I_C=i_c, O_C=o_c, S=1, P=p,
                        IH=ihb - 2 * p, OH=oh), flags
    if prev_oh is not None and prev_oh < ihb:
        # producer is smaller than this buffer: padding was materialized
        p = conv_padding(ihb, prev_oh)
        s = solve_stride(ihb, k, 0, oh)     # buffer already carries the pad
        return ConvDims(K=k, I_C=i_c, O_C=o_c, S=s, P=p, IH=prev_oh, OH=oh), flags
    p, s = solve_pad_and_stride(ihb, k, oh)
    return ConvDims(K=k, I_C=i_c, O_C=o_c, S=s, P=p, IH=ihb, OH=oh), flags


def _in_region(regions: dict[str, MemRegion]) -> MemRegion:
    for key in ("in", "in1", "in2"):
        if key in regions:
            return regions[key]
    raise MissingRole("no input-role region")


def fc_dims(c: RoleTaggedConstraint, m_o: int) -> tuple[int, int]:
    m = exprs.count_op(c.expr, "mul")
    if m == 0:
        raise ZeroMuls("FC constraint has no multiplications")
    return m, _int(m_o / F32, "N = M_o/4")


def pool_dims(c1: RoleTaggedConstraint, c2: RoleTaggedConstraint) -> tuple[int, int]:
    """Kernel edge from the run pattern, stride from two consecutive outputs."""
    offs = c1.input_offsets()
    runs = _offset_runs(offs)
    k = len(runs[0])
    if any(len(r) != k for r in runs):
        raise NonIntegerDim(f"irregular pooling runs {[len(r) for r in runs]}")
    _int(len(offs) / (k * k), "pool window cells / K^2")
    a1 = min(cell.addr for cell in c1.input_cells)
    a2 = min(cell.addr for cell in c2.input_cells)
    if a1 == a2:
        raise IdenticalConstraints("consecutive outputs read the same window")
    return k, _int(abs(a2 - a1) / F32, "S = addr delta / 4")


def lrn_neighbors(c: RoleTaggedConstraint) -> int:
    return len(c.input_cells)


def lrn_attrs(c: RoleTaggedConstraint) -> dict:
    """n, alpha, k, beta from the normalization constraint's structure.

    Expected shape: center / (k + (alpha/n) * sum(x_i^2)) ** beta with beta
    realized as nested square roots (0.75 -> sqrt(t)*sqrt(sqrt(t))).
    """
    n = lrn_neighbors(c)
    expr = c.expr
    if not (isinstance(expr, exprs.App) and expr.op == "div"):
        raise NonIntegerDim("LRN constraint is not a division")
    den = expr.args[1]
    beta = None
    t = None
    if isinstance(den, exprs.App) and den.op == "mul" and len(den.args) == 2:
        a, b = den.args
        if (isinstance(a, exprs.App) and a.op == "sqrt"
                and isinstance(b, exprs.App) and b.op == "sqrt"
                and isinstance(b.args[0], exprs.App) and b.args[0].op == "sqrt"
                and a.args[0] == b.args[0].args[0]):
            beta, t = 0.75, a.args[0]
    if beta is None and isinstance(den, exprs.App) and den.op == "sqrt":
        beta, t = 0.5, den.args[0]
    if beta is None:
        beta, t = 1.0, den
    k_const = 0.0
    alpha_over_n = None
    if isinstance(t, exprs.App) and t.op == "add":
        for term in t.args:
            if isinstance(term, exprs.Const):
                k_const = term.value
            elif isinstance(term, exprs.App) and term.op == "mul":
                for f in term.args:
                    if isinstance(f, exprs.Const):
                        alpha_over_n = f.value
    if alpha_over_n is None:
        raise NonIntegerDim("LRN constraint lacks the alpha/n coefficient")
    return {"n": n, "alpha": alpha_over_n * n, "k": k_const, "beta": beta}


def embedding_dims(access: MemAccessLog, table_region: MemRegion) -> tuple[int, int]:
    """(D, N): row width from the longest contiguous read run, rows from M/D."""
    reads = sorted((a, w) for a, w in access.reads
                   if table_region.contains(a))
    if not reads:
        raise NoContiguousRun("no reads inside the table region")
    longest = 0
    cur_start, cur_end = reads[0][0], reads[0][0] + reads[0][1]
    for a, w in reads[1:]:
        if a <= cur_end:
            cur_end = max(cur_end, a + w)
        else:
            longest = max(longest, cur_end - cur_start)
            cur_start, cur_end = a, a + w
    longest = max(longest, cur_end - cur_start)
    d = _int(longest / F32, "D = run bytes / 4")
    n = _int(table_region.size / (F32 * d), "N = M/(4D)")
    return d, n


def bias_region(regions: dict[str, MemRegion]) -> MemRegion:
    if "biases" not in regions:
        raise MissingRole("operator has no biases argument")
    return regions["biases"]


def detect_layout(weight_offsets: list[int], o_c: int, i_c: int,
                  k: int) -> layouts.LayoutDesc:
    """Classify the weight blocking from first-use byte offsets.

    Contiguous 4-byte strides mean the canonical layout.  A constant wider
    element stride A is the 5-d blocking.  Otherwise fit (A, B) for the 6-d
    blocking from the 2nd offset (A*B) and the offset after one kernel row
    (B), then verify the whole predicted order; anything else is
    unrecognized and must reach a human, never a silently wrong tensor.
    """
    n = i_c * k * k
    e = [off // F32 for off in weight_offsets]
    if len(e) != n or e[0] != 0 or any(off % F32 for off in weight_offsets):
        raise LayoutUnrecognized(f"{len(e)} weight cells for I_C*K^2 = {n}")
    if e == list(range(n)):
        return layouts.PLAIN
    diffs = {e[i + 1] - e[i] for i in range(len(e) - 1)}
    if len(diffs) == 1:
        a = diffs.pop()
        if a >= 2 and o_c % a == 0:
            return layouts.LayoutDesc("glow5d", a)
        raise LayoutUnrecognized(f"constant stride {a} does not divide O_C={o_c}")
    if len(e) > k and e[1] > 0:
        ab, b = e[1], e[k]
        if b > 0 and ab % b == 0:
            a = ab // b
            if a >= 1 and b >= 1 and i_c % a == 0 and o_c % b == 0:
                pred = [(((cb * k + ky) * k + kx) * a + ca) * b
                        for cb in range(i_c // a) for ky in range(k)
                        for ca in range(a) for kx in range(k)]
                if pred == e:
                    return layouts.LayoutDesc("tvm6d", a, b)
    raise LayoutUnrecognized("weight-load order matches no known blocking")


def extract_params(snapshot: MemorySnapshot, region: MemRegion,
                   layout: layouts.LayoutDesc, shape: tuple[int, ...]) -> np.ndarray:
    """Parameter tensor in canonical order, layout inversion applied."""
    need = int(np.prod(shape)) * F32
    if region.size != need:
        raise SizeMismatch(f"region {region.size}B vs dims needing {need}B")
    try:
        raw = snapshot.read(region.base, region.size)
    except KeyError as e:
        raise RegionOutOfSnapshot(str(e)) from e
    flat = np.frombuffer(raw, dtype="<f4")
    if layout.kind == "plain":
        return flat.reshape(shape).copy()
    o, i, k, _ = shape
    return layouts.invert(flat, layout, o, i, k)


_DROPPED_KINDS = {"Reshape", "ExpandDims", "Flatten", "Transpose", "InsertTensor"}


def _primary_family(labels) -> str:
    for fam in ("Conv", "Dense", "MaxPool", "AvgPool", "LRN", "Softmax",
                "Embedding", "BiasAdd", "Add", "Multiply", "Divide", "Sqrt",
                "Negative", "Reshape", "ExpandDims", "InsertTensor", "ReLU"):
        if fam in labels:
            return fam
    raise MissingRole(f"no recoverable family in labels {sorted(labels)}")


def recover_operator(labels, constraints: list[RoleTaggedConstraint],
                     regions: dict[str, MemRegion], access: MemAccessLog,
                     snapshot: MemorySnapshot, prev_oh: int | None = None,
                     offset_arg: int | None = None) -> RecoveredOp:
    """Per-family dispatch over tagged constraints and scoped regions."""
    labels = tuple(labels)
    fam = _primary_family(labels)
    op = RecoveredOp(family=fam, fused=labels)
    c = constraints[0] if constraints else None
    if c is not None:
        op.attrs["has_max"] = exprs.contains_op(c.expr, "max")

    if fam in _DROPPED_KINDS:
        op.dropped = True
        if offset_arg is not None:
            op.attrs["offset"] = offset_arg
        return op

    if fam == "Conv":
        op.attrs["n_muls"] = exprs.count_op(c.expr, "mul")
        op.attrs["m_w"] = regions["weights"].size
        op.attrs["m_i"] = _in_region(regions).size
        op.attrs["m_o"] = regions["out"].size
        try:
            dims, flags = recover_conv(c, regions, prev_oh)
        except (NonIntegerDim, DegenerateOutput) as e:
            op.attrs["dim_error"] = str(e)
            return op
        op.dims = dims.asdict()
        op.needs_review.extend(flags)
        try:
            op.layout = detect_layout(c.weight_offsets(), dims.O_C, dims.I_C, dims.K)
        except LayoutUnrecognized as e:
            op.attrs["layout_error"] = str(e)
            return op
        op.params["weights"] = extract_params(
            snapshot, regions["weights"], op.layout,
            (dims.O_C, dims.I_C, dims.K, dims.K))
        if "biases" in regions:
            op.params["biases"] = extract_params(
                snapshot, regions["biases"], layouts.PLAIN,
                (regions["biases"].size // F32,))
        return op

    if fam == "Dense":
        m, n = fc_dims(c, regions["out"].size)
        op.dims = {"M": m, "N": n}
        op.params["weights"] = extract_params(
            snapshot, regions["weights"], layouts.PLAIN, (m, n))
        if "biases" in regions:
            op.params["biases"] = extract_params(
                snapshot, regions["biases"], layouts.PLAIN, (n,))
        return op

    if fam in ("MaxPool", "AvgPool"):
        if len(constraints) < 2:
            raise IdenticalConstraints("pooling needs two consecutive constraints")
        k, s = pool_dims(constraints[0], constraints[1])
        op.dims = {"K": k, "S": s}
        return op

    if fam == "LRN":
        op.attrs.update(lrn_attrs(c))
        op.dims = {"n": op.attrs["n"]}
        return op

    if fam == "Softmax":
        op.attrs["N"] = len(c.input_cells)
        op.dims = {"N": op.attrs["N"]}
        return op

    if fam == "Embedding":
        d, n = embedding_dims(access, regions["weights"])
        op.dims = {"D": d, "N": n}
        op.attrs["L"] = _in_region(regions).size // F32
        op.params["weights"] = extract_params(
            snapshot, regions["weights"], layouts.PLAIN, (n, d))
        return op

    if fam == "BiasAdd":
        region = bias_region(regions)
        op.params["biases"] = extract_params(
            snapshot, region, layouts.PLAIN, (region.size // F32,))
        return op

    # element-wise arithmetic and activations: no dims to recover
    for key, r in regions.items():
        op.attrs[f"size:{key}"] = r.size
    return op
