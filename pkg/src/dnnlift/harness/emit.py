"""Synthesize ground-truth trace bundles from a known model.

``emit_bundle`` compiles a ModelSpec the way the three emulated backends
would -- applying fusion, weight-layout blocking, padding materialization,
and per-style instruction idioms -- then logs the artifacts a dynamic
tracer would see: per-function traces covering the complete computation of
at least one output element, callsite pointer records, full-execution
access sets, and a memory snapshot.  Emission executes every trace through
the concrete machine and checks stored values against the reference
computation, so bundles are semantically faithful by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import layouts
from ..bundle import (AssemblyFunction, CallsiteRecord, MemAccessLog,
                      MemorySnapshot, TraceBundle)
from ..errors import SchemaViolation, UnsupportedOperator
from ..model import ModelSpec, _conv2d, _lrn, _pool2d, _softmax
from .. import signatures
from .asm import TraceWriter
from .listing import function_listing, utility_listing
from .styles import CodegenStyle, style_named

_MAX_PLANE_ENTRIES = 40000
_GAP = 0x10000


@dataclass
class EmitOptions:
    adversarial_layout: bool = False      # permuted weight-load order on the last conv
    inject_reshape_conv: bool = False     # retile the last conv's input (tvm-o0)
    tvm_ab: tuple[int, int] | None = None # pin the 6-d blocking factors


@dataclass
class FuncTruth:
    func_id: int
    labels: tuple[str, ...]
    family: str
    dims: dict = field(default_factory=dict)
    layout: tuple = ("plain", 0, 0)
    source_ops: tuple[str, ...] = ()


@dataclass
class GroundTruth:
    style: str
    model_name: str
    funcs: dict[int, FuncTruth]
    edges: list[tuple[int, int]]          # producer call_index -> consumer call_index
    input_shape: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class _ExecOp:
    eid: str
    kinds: tuple[str, ...]
    family: str
    inputs: list                           # ("op", eid) | ("input",) | ("const", name)
    value: np.ndarray = None
    weights: np.ndarray | None = None      # canonical shapes
    bias: np.ndarray | None = None
    dims: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    layout: layouts.LayoutDesc = layouts.PLAIN
    relu: bool = False
    inplace: bool = False                  # writes its own input buffer
    consts: dict = field(default_factory=dict)  # name -> np vector (extra arg tensors)
    source_ops: tuple[str, ...] = ()


def _synth_input(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    dom = spec.input_domain
    if dom.get("kind") == "index":
        n = int(dom["high"])
        length = int(np.prod(spec.input_shape))
        # spread picks, endpoints included, no two adjacent rows when possible
        if length == 1:
            idx = np.array([0])
        else:
            idx = np.rint(np.linspace(0, n - 1, length)).astype(np.int64)
        return idx.astype(np.float32).reshape(spec.input_shape)
    return rng.uniform(-1.0, 1.0, size=spec.input_shape).astype(np.float32)


def _pick_6d(i_c: int, o_c: int, rng: np.random.Generator,
             pinned: tuple[int, int] | None) -> layouts.LayoutDesc:
    if pinned is not None:
        a, b = pinned
        if i_c % a or o_c % b:
            return layouts.PLAIN
        return layouts.LayoutDesc("tvm6d", a, b)
    cand_a = [v for v in (8, 16, 32) if i_c % v == 0]
    cand_b = [v for v in (8, 16, 32) if o_c % v == 0]
    if not cand_a or not cand_b:
        return layouts.PLAIN
    return layouts.LayoutDesc("tvm6d", int(rng.choice(cand_a)), int(rng.choice(cand_b)))


def _bn_fold(w: np.ndarray, b: np.ndarray | None, op, params) -> tuple[np.ndarray, np.ndarray]:
    g = params[op.params["gamma"]].data.astype(np.float64)
    beta = params[op.params["beta"]].data.astype(np.float64)
    mu = params[op.params["mean"]].data.astype(np.float64)
    var = params[op.params["var"]].data.astype(np.float64)
    eps = float(op.attrs.get("eps", 1e-5))
    scale = g / np.sqrt(var + eps)
    w2 = (w.astype(np.float64) * scale[:, None, None, None]).astype(np.float32)
    b0 = np.zeros_like(mu) if b is None else b.astype(np.float64)
    b2 = ((b0 - mu) * scale + beta).astype(np.float32)
    return w2, b2


def _build_plan(spec: ModelSpec, style: CodegenStyle, rng: np.random.Generator,
                options: EmitOptions) -> tuple[list[_ExecOp], np.ndarray]:
    """Lower the model graph into per-function exec ops for this style."""
    x0 = _synth_input(spec, rng)
    plan: list[_ExecOp] = []
    produced: dict[str, str] = {}   # spec op_id -> eid of exec op producing its value
    values: dict[str, np.ndarray] = {}
    eid_n = 0
    last_conv_id = next((o.op_id for o in reversed(spec.ops) if o.kind == "Conv"), None)

    def new_eid():
        nonlocal eid_n
        eid_n += 1
        return f"x{eid_n}"

    def ref_of(src, op_id):
        if src[0] == "input":
            return ("input",)
        if src[0] == "op":
            return ("op", produced[src[1]])
        raise UnsupportedOperator(style.name, f"param input on {op_id}")

    def value_of(ref):
        return x0 if ref[0] == "input" else values[ref[1]]

    def push(op: _ExecOp):
        plan.append(op)
        values[op.eid] = op.value
        return op

    i = 0
    ops = spec.ops
    while i < len(ops):
        op = ops[i]
        kind = op.kind
        if kind == "Conv":
            w = spec.params[op.params["weights"]].data
            bias = spec.params[op.params["biases"]].data if "biases" in op.params else None
            labels = ["Conv"]
            src_ids = [op.op_id]
            relu = False
            j = i + 1
            # absorb following BiasAdd / BatchNorm / ReLU per style rules
            while j < len(ops) and ops[j].inputs == [("op", ops[j - 1].op_id)]:
                nxt = ops[j]
                if nxt.kind == "BiasAdd" and (style.fusion_enabled or style.name == "glow"):
                    bias = spec.params[nxt.params["biases"]].data
                    if style.is_tvm:
                        labels.append("BiasAdd")
                    src_ids.append(nxt.op_id)
                    j += 1
                elif nxt.kind == "BatchNorm" and style.fusion_enabled:
                    w, bias = _bn_fold(w, bias, nxt, spec.params)
                    if style.is_tvm and "BiasAdd" not in labels:
                        labels.append("BiasAdd")
                    src_ids.append(nxt.op_id)
                    j += 1
                elif nxt.kind == "ReLU" and style.fusion_enabled:
                    relu = True
                    labels.append("ReLU")
                    src_ids.append(nxt.op_id)
                    j += 1
                else:
                    break
            k, s, p = op.dims["K"], op.dims["S"], op.dims["P"]
            o_c, i_c = op.dims["O_C"], op.dims["I_C"]
            in_ref = ref_of(op.inputs[0], op.op_id)
            ih = value_of(in_ref).shape[2]
            pad_mode = "index"
            if style.name == "glow" and p > 0:
                src = value_of(in_ref)
                padded = np.pad(src, ((0, 0), (0, 0), (p, p), (p, p)))
                hp = ih + 2 * p
                ins = push(_ExecOp(
                    eid=new_eid(), kinds=("InsertTensor",), family="InsertTensor",
                    inputs=[in_ref], value=padded,
                    attrs={"offset": (p * hp + p) * 4, "pad": p}))
                in_ref = ("op", ins.eid)
                pad_mode = "buffer"
            if style.name == "glow" and bias is None:
                bias = np.zeros(o_c, dtype=np.float32)
            layout = layouts.PLAIN
            if style.layout_opt == "tvm6d":
                layout = _pick_6d(i_c, o_c, rng, options.tvm_ab)
            elif style.layout_opt == "glow5d" and o_c % style.glow_a == 0:
                layout = layouts.LayoutDesc("glow5d", style.glow_a)
            retile = (options.inject_reshape_conv and style.name == "tvm-o0"
                      and op.op_id == last_conv_id and i_c % 16 == 0)
            if retile:
                src = value_of(in_ref)
                c = src.shape[1]
                tiled = np.ascontiguousarray(
                    src[0].reshape(c // 16, 16, ih, ih).transpose(0, 2, 3, 1))
                rs = push(_ExecOp(eid=new_eid(), kinds=("Reshape",), family="Reshape",
                                  inputs=[in_ref], value=tiled, attrs={"retile": 16}))
                in_ref = ("op", rs.eid)
            p_eff = 0 if pad_mode == "buffer" else p
            val = _conv2d(value_of(ref_of(op.inputs[0], op.op_id)), w, s, p, bias)
            if relu:
                val = np.maximum(val, np.float32(0.0))
            adversarial = (options.adversarial_layout and op.op_id == last_conv_id
                           and layout.kind == "tvm6d")
            push(_ExecOp(
                eid=new_eid(), kinds=tuple(labels), family="Conv", inputs=[in_ref],
                value=val, weights=w, bias=bias, relu=relu, layout=layout,
                dims={"K": k, "S": s, "P": p, "O_C": o_c, "I_C": i_c, "IH": ih,
                      "OH": val.shape[2], "P_eff": p_eff},
                attrs={"pad_mode": pad_mode, "retile": 16 if retile else 0,
                       "adversarial": adversarial},
                source_ops=tuple(src_ids)))
            produced[ops[j - 1].op_id] = plan[-1].eid
            i = j
            continue
        if kind == "Dense":
            w = spec.params[op.params["weights"]].data
            bias = None
            labels = ["Dense"]
            src_ids = [op.op_id]
            relu = False
            j = i + 1
            while j < len(ops) and ops[j].inputs == [("op", ops[j - 1].op_id)]:
                nxt = ops[j]
                if nxt.kind == "BiasAdd" and style.fusion_enabled:
                    bias = spec.params[nxt.params["biases"]].data
                    labels.append("BiasAdd")
                    src_ids.append(nxt.op_id)
                    j += 1
                elif nxt.kind == "ReLU" and style.fusion_enabled and style.is_tvm:
                    relu = True
                    labels.append("ReLU")
                    src_ids.append(nxt.op_id)
                    j += 1
                else:
                    break
            in_ref = ref_of(op.inputs[0], op.op_id)
            xv = value_of(in_ref).astype(np.float64).ravel()
            m, n = w.shape
            out = np.zeros(n, dtype=np.float64)
            for mi in range(m):
                out += xv[mi] * w[mi].astype(np.float64)
            if bias is not None:
                out += bias.astype(np.float64)
            val = out.astype(np.float32)
            if relu:
                val = np.maximum(val, np.float32(0.0))
            push(_ExecOp(eid=new_eid(), kinds=tuple(labels), family="Dense",
                         inputs=[in_ref], value=val, weights=w, bias=bias, relu=relu,
                         dims={"M": m, "N": n}, source_ops=tuple(src_ids)))
            produced[ops[j - 1].op_id] = plan[-1].eid
            i = j
            continue
        if kind == "BatchNorm":
            if style.fusion_enabled:
                raise SchemaViolation("BatchNorm not directly after Conv")
            _emit_bn_decomposed(op, spec, plan, produced, values, ref_of, push, new_eid)
            i += 1
            continue
        in_ref = ref_of(op.inputs[0], op.op_id)
        xin = value_of(in_ref)
        common = dict(eid=new_eid(), kinds=(kind,), family=kind, inputs=[in_ref],
                      source_ops=(op.op_id,))
        if kind == "BiasAdd":
            b = spec.params[op.params["biases"]].data
            val = (xin.astype(np.float64) + b.reshape(1, -1, 1, 1).astype(np.float64)
                   ).astype(np.float32) if xin.ndim == 4 else \
                (xin.astype(np.float64) + b.astype(np.float64)).astype(np.float32)
            push(_ExecOp(**common, value=val, bias=b))
        elif kind == "ReLU":
            val = np.maximum(xin, np.float32(0.0))
            push(_ExecOp(**common, value=val, inplace=(style.name == "glow")))
        elif kind == "MaxPool":
            push(_ExecOp(**common, value=_pool2d(xin, op.dims["K"], op.dims["S"], "max"),
                         dims=dict(op.dims)))
        elif kind == "AvgPool":
            push(_ExecOp(**common, value=_pool2d(xin, op.dims["K"], op.dims["S"], "avg"),
                         dims=dict(op.dims)))
        elif kind == "LRN":
            a = op.attrs
            push(_ExecOp(**common, attrs=dict(a),
                         value=_lrn(xin, a["n"], a["alpha"], a.get("beta", 0.75), a["k"])))
        elif kind == "Softmax":
            push(_ExecOp(**common, value=_softmax(xin),
                         attrs={"N": int(np.prod(xin.shape))}))
        elif kind == "Embedding":
            table = spec.params[op.params["weights"]].data
            idx = np.rint(xin.astype(np.float64)).astype(np.int64).ravel()
            push(_ExecOp(**common, value=table[idx], weights=table,
                         dims={"N": table.shape[0], "D": table.shape[1]},
                         attrs={"indices": idx.tolist()}))
        elif kind in ("Flatten", "Reshape"):
            push(_ExecOp(**dict(common, kinds=("Reshape",), family="Reshape"),
                         value=xin.reshape(-1)))
        elif kind == "ExpandDims":
            push(_ExecOp(**common, value=xin.reshape(tuple(xin.shape) + (1, 1))))
        else:
            raise UnsupportedOperator(style.name, kind)
        produced[op.op_id] = plan[-1].eid
        i += 1
    return plan, x0


def _emit_bn_decomposed(op, spec, plan, produced, values, ref_of, push, new_eid):
    """The unfused lowering: [Add, Sqrt, Divide, Multiply, ExpandDims,
    Multiply, Negative, Multiply, Add, ExpandDims, Add]."""
    g = spec.params[op.params["gamma"]].data
    beta = spec.params[op.params["beta"]].data
    mu = spec.params[op.params["mean"]].data
    var = spec.params[op.params["var"]].data
    c = g.shape[0]
    eps = np.full(c, float(op.attrs.get("eps", 1e-5)), dtype=np.float32)
    ones = np.ones(c, dtype=np.float32)
    x_ref = ref_of(op.inputs[0], op.op_id)
    xin = values[x_ref[1]] if x_ref[0] == "op" else None
    if xin is None:
        raise SchemaViolation("BatchNorm directly on model input is unsupported")

    def f32(v):
        return v.astype(np.float32)

    def binop(kind, a_ref, b_ref, val, consts):
        return push(_ExecOp(eid=new_eid(), kinds=(kind,), family=kind,
                            inputs=[a_ref, b_ref], value=val, consts=consts,
                            source_ops=(op.op_id,)))

    def unop(kind, a_ref, val):
        return push(_ExecOp(eid=new_eid(), kinds=(kind,), family=kind,
                            inputs=[a_ref], value=val, source_ops=(op.op_id,)))

    t1 = binop("Add", ("const", "var"), ("const", "eps"),
               f32(var.astype(np.float64) + eps), {"var": var, "eps": eps})
    t2 = unop("Sqrt", ("op", t1.eid), f32(np.sqrt(t1.value.astype(np.float64))))
    t3 = binop("Divide", ("const", "ones"), ("op", t2.eid),
               f32(ones.astype(np.float64) / t2.value), {"ones": ones})
    t4 = binop("Multiply", ("op", t3.eid), ("const", "gamma"),
               f32(t3.value.astype(np.float64) * g), {"gamma": g})
    t5 = unop("ExpandDims", ("op", t4.eid), t4.value.reshape(c, 1, 1))
    t6 = binop("Multiply", x_ref, ("op", t5.eid),
               f32(xin.astype(np.float64) * t5.value.reshape(1, c, 1, 1)), {})
    t7 = unop("Negative", ("const", "mean"), f32(-mu))
    t7.consts = {"mean": mu}
    t8 = binop("Multiply", ("op", t7.eid), ("op", t4.eid),
               f32(t7.value.astype(np.float64) * t4.value), {})
    t9 = binop("Add", ("op", t8.eid), ("const", "beta"),
               f32(t8.value.astype(np.float64) + beta), {"beta": beta})
    t10 = unop("ExpandDims", ("op", t9.eid), t9.value.reshape(c, 1, 1))
    t11 = binop("Add", ("op", t6.eid), ("op", t10.eid),
                f32(t6.value.astype(np.float64) + t10.value.reshape(1, c, 1, 1)), {})
    produced[op.op_id] = t11.eid


class _Alloc:
    def __init__(self, base: int = 0x20000000):
        self._next = base
        self.regions: list[tuple[str, int, int]] = []  # (name, base, n_floats)

    def region(self, name: str, n_floats: int) -> int:
        base = self._next
        self.regions.append((name, base, n_floats))
        self._next = (base + n_floats * 4 + _GAP + 0xFFF) & ~0xFFF
        return base


class _ConstPool:
    def __init__(self, base: int):
        self.base = base
        self.values: list[float] = []
        self._index: dict[float, int] = {}

    def addr(self, value: float) -> int:
        v = float(np.float32(value))
        if v not in self._index:
            self._index[v] = len(self.values)
            self.values.append(v)
        return self.base + 4 * self._index[v]


def _cell(base: int, shape: tuple[int, ...], *idx) -> int:
    assert len(idx) == len(shape), (shape, idx)
    off = 0
    for dim, i in zip(shape, idx):
        off = off * dim + i
    return base + 4 * off


def _conv_traced_outputs(op: _ExecOp) -> tuple[list[int], list[int]]:
    """Interior output rows/cols covered by one traced loop iteration."""
    k, s, p = op.dims["K"], op.dims["S"], op.dims["P_eff"]
    oh = op.dims["OH"]
    ihb = op.dims["IH"] + (0 if op.attrs["pad_mode"] == "index" else 2 * op.dims["P"])
    lo = 0
    while lo * s - p < 0:
        lo += 1
    hi = oh - 1
    while hi * s - p + k > ihb:
        hi -= 1
    rows = list(range(lo, hi + 1))
    cols = list(range(lo, hi + 1))
    per_out = 2 * op.dims["I_C"] * op.dims["K"] ** 2 + 4
    if len(rows) * len(cols) * per_out > _MAX_PLANE_ENTRIES:
        rows = rows[:1]
    return rows, cols


def _weight_iter(op: _ExecOp):
    """(ci, ky, kx) in the style's weight-load order for one output channel."""
    k, i_c = op.dims["K"], op.dims["I_C"]
    if op.layout.kind == "tvm6d":
        a = op.layout.a
        order = [(cb * a + ca, ky, kx)
                 for cb in range(i_c // a) for ky in range(k)
                 for ca in range(a) for kx in range(k)]
        if op.attrs.get("adversarial"):
            # auto-scheduler-like order: kernel column hoisted outermost
            order = [(cb * a + ca, ky, kx)
                     for kx in range(k) for cb in range(i_c // a)
                     for ky in range(k) for ca in range(a)]
        return order
    if op.attrs.get("retile"):
        t = op.attrs["retile"]
        return [(co * t + ci, ky, kx)
                for co in range(i_c // t) for ky in range(k)
                for ci in range(t) for kx in range(k)]
    return [(ci, ky, kx) for ci in range(i_c) for ky in range(k) for kx in range(k)]


def _emit_conv(w: TraceWriter, op: _ExecOp, in_base: int, in_shape, w_base: int,
               b_base: int | None, out_base: int, style: CodegenStyle):
    k, s = op.dims["K"], op.dims["S"]
    p = op.dims["P_eff"]
    o_c, i_c = op.dims["O_C"], op.dims["I_C"]
    out = op.value[0]
    oh = out.shape[1]
    rows, cols = _conv_traced_outputs(op)
    worder = _weight_iter(op)
    tile = op.attrs.get("retile", 0)

    def in_addr(ci, y, x):
        if tile:
            return _cell(in_base, in_shape, ci // tile, y, x, ci % tile)
        return _cell(in_base, in_shape, ci, y, x)

    def w_addr(ko, ci, ky, kx):
        return w_base + 4 * layouts.weight_element_index(
            op.layout, o_c, i_c, k, ko, ci, ky, kx)

    glow5d = op.layout.kind == "glow5d"
    vec_cols = (style.name == "tvm-o3" and s == 1 and not tile and len(cols) >= 8
                and not glow5d)
    if op.relu:
        w.zero("ymm7" if (vec_cols or glow5d) else "xmm7", avx=vec_cols or glow5d)

    if glow5d:
        a = op.layout.a
        for r in rows:
            for c in cols:
                w.load("vmovups", "ymm0", b_base, width=4 * a, base="rcx")
                for ci, ky, kx in worder:
                    w.load("vbroadcastss", "ymm1", in_addr(ci, r * s - p + ky, c * s - p + kx))
                    w.rm("vmovups", "ymm2", w_addr(0, ci, ky, kx), width=4 * a)
                    w.rrr("vmulps", "ymm2", "ymm1", "ymm2")
                    w.rrr("vaddps", "ymm0", "ymm0", "ymm2")
                if op.relu:
                    w.rrr("vmaxps", "ymm0", "ymm0", "ymm7")
                for lane in range(a):
                    w.extract(_cell(out_base, out.shape, lane, r, c), "ymm0", lane,
                              expect=out[lane, r, c])
        return

    ko = 0  # traced output channel
    if vec_cols:
        for r in rows:
            c = cols[0]
            while c + 8 <= cols[-1] + 1:
                if b_base is not None:
                    w.load("vbroadcastss", "ymm0", b_base + 4 * ko, base="rcx")
                else:
                    w.zero("ymm0", avx=True)
                for ci, ky, kx in worder:
                    w.load("vbroadcastss", "ymm1", w_addr(ko, ci, ky, kx), base="rdx")
                    w.rrm("vfmadd231ps", "ymm0", "ymm1",
                          in_addr(ci, r * s - p + ky, c * s - p + kx), width=32, base="rsi")
                if op.relu:
                    w.rrr("vmaxps", "ymm0", "ymm0", "ymm7")
                w.store("vmovups", _cell(out_base, out.shape, ko, r, c), "ymm0",
                        width=32, expect=out[ko, r, c:c + 8])
                c += 8
            scalar_cols = list(range(c, cols[-1] + 1))
            _emit_conv_scalar(w, op, [r], scalar_cols, in_addr, w_addr, b_base,
                              out_base, out, ko, worder)
        return
    _emit_conv_scalar(w, op, rows, cols, in_addr, w_addr, b_base, out_base, out,
                      ko, worder)


def _emit_conv_scalar(w, op, rows, cols, in_addr, w_addr, b_base, out_base, out,
                      ko, worder):
    k, s, p = op.dims["K"], op.dims["S"], op.dims["P_eff"]
    for r in rows:
        for c in cols:
            if b_base is not None:
                w.load("movss", "xmm0", b_base + 4 * ko, base="rcx")
            else:
                w.zero("xmm0")
            for ci, ky, kx in worder:
                w.load("movss", "xmm1", in_addr(ci, r * s - p + ky, c * s - p + kx))
                w.rm("mulss", "xmm1", w_addr(ko, ci, ky, kx))
                w.rr("addss", "xmm0", "xmm1")
            if op.relu:
                w.rr("maxss", "xmm0", "xmm7")
            w.store("movss", _cell(out_base, out.shape, ko, r, c), "xmm0",
                    expect=out[ko, r, c])


def _emit_dense(w: TraceWriter, op: _ExecOp, in_base: int, w_base: int,
                b_base: int | None, out_base: int, style: CodegenStyle):
    m, n = op.dims["M"], op.dims["N"]
    out = op.value
    use_fma = style.name == "tvm-o3"
    vec = style.vector_width >= 8 and n >= 8
    if op.relu:
        w.zero("ymm7" if vec else "xmm7", avx=vec)
    n0 = 0
    if vec:
        while n0 + 8 <= n:
            if b_base is not None:
                w.load("vmovups", "ymm0", b_base + 4 * n0, width=32, base="rcx")
            else:
                w.zero("ymm0", avx=True)
            for mi in range(m):
                w.load("vbroadcastss", "ymm1", in_base + 4 * mi)
                if use_fma:
                    w.rrm("vfmadd231ps", "ymm0", "ymm1", w_base + 4 * (mi * n + n0),
                          width=32)
                else:
                    w.rrm("vmulps", "ymm2", "ymm1", w_base + 4 * (mi * n + n0), width=32)
                    w.rrr("vaddps", "ymm0", "ymm0", "ymm2")
            if op.relu:
                w.rrr("vmaxps", "ymm0", "ymm0", "ymm7")
            w.store("vmovups", out_base + 4 * n0, "ymm0", width=32,
                    expect=out[n0:n0 + 8])
            n0 += 8
    for ni in range(n0, n):
        if b_base is not None:
            w.load("movss", "xmm0", b_base + 4 * ni, base="rcx")
        else:
            w.zero("xmm0")
        for mi in range(m):
            w.load("movss", "xmm1", in_base + 4 * mi)
            w.rm("mulss", "xmm1", w_base + 4 * (mi * n + ni))
            w.rr("addss", "xmm0", "xmm1")
        if op.relu:
            w.rr("maxss", "xmm0", "xmm7")
        w.store("movss", out_base + 4 * ni, "xmm0", expect=out[ni])


def _plane_cells(shape) -> list[tuple]:
    """Index tuples of one outermost-iteration slab of an elementwise op."""
    if len(shape) == 4:
        return [(0, 0, y, x) for y in range(shape[2]) for x in range(shape[3])]
    if len(shape) == 3:
        return [(0, y, x) for y in range(shape[1]) for x in range(shape[2])]
    if len(shape) == 2:
        return [(0, d) for d in range(shape[1])]
    return [(i,) for i in range(shape[0])]


def _emit_eltwise(w: TraceWriter, op: _ExecOp, bases: dict, style: CodegenStyle):
    """Unary/binary elementwise families and the shape utilities."""
    fam = op.family
    out = op.value
    out_base = bases["out"]
    if fam in ("Add", "Multiply", "Divide"):
        mnem = {"Add": "addss", "Multiply": "mulss", "Divide": "divss"}[fam]
        a_base, a_shape = bases["in1"]
        b_base, b_shape = bases["in2"]
        for idx in _plane_cells(out.shape):
            w.load("movss", "xmm0", _cell(a_base, a_shape, *_fit(idx, a_shape)))
            w.rm(mnem, "xmm0", _cell(b_base, b_shape, *_fit(idx, b_shape)))
            w.store("movss", _cell(out_base, out.shape, *idx), "xmm0",
                    expect=out[idx])
        return
    in_base, in_shape = bases["in"]
    if fam == "BiasAdd":
        b_base = bases["biases"]
        for idx in _plane_cells(out.shape):
            ch = idx[1] if len(idx) == 4 else idx[-1]
            w.load("movss", "xmm0", _cell(in_base, in_shape, *idx))
            w.rm("addss", "xmm0", b_base + 4 * ch, base="rcx")
            w.store("movss", _cell(out_base, out.shape, *idx), "xmm0", expect=out[idx])
        return
    if fam == "ReLU":
        w.zero("xmm7")
        for idx in _plane_cells(out.shape):
            w.load("movss", "xmm0", _cell(in_base, in_shape, *idx))
            w.rr("maxss", "xmm0", "xmm7")
            w.store("movss", _cell(out_base, out.shape, *idx), "xmm0", expect=out[idx])
        return
    if fam == "Sqrt":
        for idx in _plane_cells(out.shape):
            w.rm("sqrtss", "xmm0", _cell(in_base, in_shape, *idx))
            w.store("movss", _cell(out_base, out.shape, *idx), "xmm0", expect=out[idx])
        return
    if fam == "Negative":
        for idx in _plane_cells(out.shape):
            w.zero("xmm0")
            w.rm("subss", "xmm0", _cell(in_base, in_shape, *idx))
            w.store("movss", _cell(out_base, out.shape, *idx), "xmm0", expect=out[idx])
        return
    if fam in ("Reshape", "ExpandDims"):
        flat_in = int(np.prod(in_shape))
        for t in range(min(64, int(np.prod(out.shape)), flat_in)):
            src = t if not op.attrs.get("retile") else _retile_src(t, in_shape, op)
            w.load("movss", "xmm0", in_base + 4 * src)
            w.store("movss", out_base + 4 * t, "xmm0", expect=out.ravel()[t])
        return
    raise UnsupportedOperator(style.name, fam)


def _fit(idx: tuple, shape: tuple) -> tuple:
    """Map an output index onto a (possibly broadcast) operand's index."""
    if len(shape) == len(idx):
        return idx
    if len(shape) == 1:
        return (idx[1] if len(idx) >= 2 else idx[0],)   # per-channel vector
    if len(shape) == 3 and len(idx) == 4:
        return (idx[1], 0, 0)                           # [C,1,1] against NCHW
    raise SchemaViolation(f"cannot broadcast {shape} against index {idx}")


def _retile_src(t: int, in_shape: tuple, op: _ExecOp) -> int:
    tile = op.attrs["retile"]
    co, rem = divmod(t, op.value.shape[1] * op.value.shape[2] * tile)
    y, rem = divmod(rem, op.value.shape[2] * tile)
    x, ci = divmod(rem, tile)
    c = co * tile + ci
    return (c * in_shape[2] + y) * in_shape[3] + x


def _emit_pool(w: TraceWriter, op: _ExecOp, in_base: int, in_shape, out_base: int):
    k, s = op.dims["K"], op.dims["S"]
    out = op.value[0]
    oh, ow = out.shape[1], out.shape[2]
    is_max = op.family == "MaxPool"
    c0 = 0
    for r in range(oh):
        for c in range(ow):
            first = True
            for ky in range(k):
                for kx in range(k):
                    addr = _cell(in_base, in_shape, 0, c0, r * s + ky, c * s + kx)
                    if first:
                        w.load("movss", "xmm0", addr)
                        first = False
                    elif is_max:
                        w.rm("maxss", "xmm0", addr)
                    else:
                        w.rm("addss", "xmm0", addr)
            if not is_max:
                w.rm("mulss", "xmm0", w.const_pool.addr(1.0 / (k * k)), base="r9")
            w.store("movss", _cell(out_base, out.shape, c0, r, c), "xmm0",
                    expect=out[c0, r, c])


def _emit_lrn(w: TraceWriter, op: _ExecOp, in_base: int, in_shape, out_base: int):
    n, alpha = op.attrs["n"], op.attrs["alpha"]
    kconst = op.attrs["k"]
    out = op.value[0]
    c_total, h, wdt = out.shape
    half = (n - 1) // 2
    c0 = half if c_total > 2 * half else 0
    lo, hi = max(0, c0 - half), min(c_total, c0 + half + 1)
    for y in range(h):
        for x in range(wdt):
            w.zero("xmm0")
            for cw in range(lo, hi):
                w.load("movss", "xmm1", _cell(in_base, in_shape, 0, cw, y, x))
                w.rr("mulss", "xmm1", "xmm1")
                w.rr("addss", "xmm0", "xmm1")
            w.rm("mulss", "xmm0", w.const_pool.addr(alpha / n), base="r9")
            w.rm("addss", "xmm0", w.const_pool.addr(kconst), base="r9")
            w.rr("sqrtss", "xmm2", "xmm0")     # t^0.5
            w.rr("sqrtss", "xmm3", "xmm2")     # t^0.25
            w.rr("mulss", "xmm2", "xmm3")      # t^0.75
            w.load("movss", "xmm1", _cell(in_base, in_shape, 0, c0, y, x))
            w.rr("divss", "xmm1", "xmm2")
            w.store("movss", _cell(out_base, out.shape, c0, y, x), "xmm1",
                    expect=out[c0, y, x])


def _emit_softmax(w: TraceWriter, op: _ExecOp, in_base: int, out_base: int):
    n = op.attrs["N"]
    out = op.value.ravel()
    w.load("movss", "xmm0", in_base)                    # running max
    for i in range(1, n):
        w.rm("maxss", "xmm0", in_base + 4 * i)
    w.zero("xmm2")                                      # running sum
    for i in range(n):
        w.load("movss", "xmm1", in_base + 4 * i)
        w.rr("subss", "xmm1", "xmm0")
        w.rr("expss", "xmm1", "xmm1")
        w.store("movss", out_base + 4 * i, "xmm1")
        w.rr("addss", "xmm2", "xmm1")
    for i in range(n):
        w.load("movss", "xmm1", out_base + 4 * i)
        w.rr("divss", "xmm1", "xmm2")
        w.store("movss", out_base + 4 * i, "xmm1", expect=out[i])


def _emit_embedding(w: TraceWriter, op: _ExecOp, in_base: int, tab_base: int,
                    out_base: int, style: CodegenStyle):
    d = op.dims["D"]
    idx = op.attrs["indices"]
    out = op.value
    if style.name == "glow" and d * 4 in (16, 32):
        width = d * 4
        reg = "ymm0" if width == 32 else "xmm0"
        for li, ix in enumerate(idx):
            w.load("vmovups", reg, tab_base + 4 * ix * d, width=width)
            w.store("vmovups", out_base + 4 * li * d, reg, width=width,
                    expect=out[li, 0])
    else:
        for li, ix in enumerate(idx):
            for di in range(d):
                w.load("movss", "xmm0", tab_base + 4 * (ix * d + di))
                w.store("movss", out_base + 4 * (li * d + di), "xmm0",
                        expect=out[li, di])


def _emit_insert_tensor(w: TraceWriter, op: _ExecOp, in_base: int, in_shape,
                        out_base: int):
    pad = op.attrs["pad"]
    out = op.value[0]
    hp, wp = out.shape[1], out.shape[2]
    wdt = in_shape[3]
    w.zero("xmm0")
    for x in range(min(8, wp)):
        w.store("movss", _cell(out_base, out.shape, 0, 0, x), "xmm0", expect=0.0)
    for x in range(min(8, wdt)):
        w.load("movss", "xmm1", _cell(in_base, in_shape, 0, 0, 0, x))
        w.store("movss", _cell(out_base, out.shape, 0, pad, pad + x), "xmm1",
                expect=out[0, pad, pad + x])


def _conv_in_mask(h, w_, oh, ow, k, s, p) -> np.ndarray:
    m = np.zeros((h, w_), dtype=bool)
    for ky in range(k):
        ys = np.arange(oh) * s - p + ky
        ys = ys[(ys >= 0) & (ys < h)]
        for kx in range(k):
            xs = np.arange(ow) * s - p + kx
            xs = xs[(xs >= 0) & (xs < w_)]
            if len(ys) and len(xs):
                m[np.ix_(ys, xs)] = True
    return m


def _range_set(base: int, n: int, width: int = 4) -> set:
    return {(base + width * i, width) for i in range(n)}


class _Emitter:
    """One emit_bundle invocation; holds allocation and value state."""

    def __init__(self, spec: ModelSpec, style: CodegenStyle, seed: int,
                 options: EmitOptions):
        self.spec = spec
        self.style = style
        self.seed = seed
        self.options = options
        self.rng = np.random.default_rng(
            [seed, ("tvm-o0", "tvm-o3", "glow").index(style.name)]
            + list(spec.name.encode()))
        self.alloc = _Alloc()
        self.region_values: dict[str, np.ndarray] = {}
        self.bufs: dict[str, tuple[int, tuple[int, ...]]] = {}  # value key -> (base, shape)

    def _add_region(self, name: str, values: np.ndarray) -> int:
        flat = np.ascontiguousarray(values, dtype=np.float32).ravel()
        base = self.alloc.region(name, flat.size)
        self.region_values[name] = flat
        return base

    def run(self) -> tuple[TraceBundle, GroundTruth]:
        plan, x0 = _build_plan(self.spec, self.style, self.rng, self.options)
        # constant pool first so its values are in the image before emission
        pool = _ConstPool(self.alloc.region("@consts", 256))
        for op in plan:
            if op.family == "AvgPool":
                pool.addr(1.0 / (op.dims["K"] ** 2))
            elif op.family == "LRN":
                pool.addr(op.attrs["alpha"] / op.attrs["n"])
                pool.addr(op.attrs["k"])
        scratch_base = self.alloc.region("@scratch", 64)
        self.region_values["@scratch"] = np.zeros(64, dtype=np.float32)

        in_base = self._add_region("@input", x0)
        self.bufs["@input"] = (in_base, tuple(x0.shape))
        op_meta: dict[str, dict] = {}
        for op in plan:
            meta = {}
            if op.inplace:
                src_key = op.inputs[0][1] if op.inputs[0][0] == "op" else "@input"
                self.bufs[op.eid] = self.bufs[src_key]
                # final buffer contents are this op's output
                src_base = self.bufs[src_key][0]
                name = next(n for n, b, _ in self.alloc.regions if b == src_base)
                self.region_values[name] = np.ascontiguousarray(
                    op.value, dtype=np.float32).ravel()
            else:
                base = self._add_region(f"{op.eid}:out", op.value)
                self.bufs[op.eid] = (base, tuple(op.value.shape))
            if op.weights is not None:
                blob = (layouts.transform(op.weights, op.layout)
                        if op.family == "Conv" else
                        np.ascontiguousarray(op.weights, dtype=np.float32).ravel())
                meta["weights"] = self._add_region(f"{op.eid}:w", blob)
            if op.bias is not None:
                meta["biases"] = self._add_region(f"{op.eid}:b", op.bias)
            for cname, arr in op.consts.items():
                meta[f"const:{cname}"] = self._add_region(f"{op.eid}:{cname}", arr)
            op_meta[op.eid] = meta
        self.region_values["@consts"] = np.asarray(
            pool.values + [0.0] * (256 - len(pool.values)), dtype=np.float32)

        image: dict[int, float] = {}
        base_of = {name: b for name, b, _ in self.alloc.regions}
        for name, flat in self.region_values.items():
            b = base_of[name]
            for i, v in enumerate(flat.tolist()):
                image[b + 4 * i] = v

        traces, access_logs, functions = {}, {}, []
        n_ops = len(plan)
        util_ids = [n_ops, n_ops + 1]
        callsites = [CallsiteRecord(0, util_ids[0], [scratch_base])]
        truth_funcs: dict[int, FuncTruth] = {}
        eid_to_call: dict[str, int] = {}

        for fid, op in enumerate(plan):
            writer = TraceWriter(image)
            writer.const_pool = pool
            self._emit_op(writer, op, op_meta[op.eid])
            traces[fid] = writer.entries
            access_logs[fid] = self._access_log(fid, op, op_meta[op.eid])
            lst_rng = np.random.default_rng([self.seed, fid, 77])
            work = sum(n for _, n in [(0, len(writer.entries))])
            functions.append(AssemblyFunction(
                func_id=fid, name="",
                opcode_sequence=function_listing(self.style.name, op.kinds, work, lst_rng),
                entry_address=0x401000 + 0x100 * fid))
            call_index = fid + 1
            eid_to_call[op.eid] = call_index
            callsites.append(CallsiteRecord(call_index, fid, self._args(op, op_meta[op.eid])))
            truth_funcs[fid] = FuncTruth(
                func_id=fid, labels=op.kinds, family=op.family,
                dims=self._truth_dims(op),
                layout=(op.layout.kind, op.layout.a, op.layout.b),
                source_ops=op.source_ops)
        callsites.append(CallsiteRecord(n_ops + 1, util_ids[1], [scratch_base]))
        for uid in util_ids:
            functions.append(AssemblyFunction(
                func_id=uid, name="",
                opcode_sequence=utility_listing(np.random.default_rng([self.seed, uid, 99])),
                entry_address=0x401000 + 0x100 * uid))

        edges = []
        for op in plan:
            for ref in op.inputs:
                if ref[0] == "op":
                    edges.append((eid_to_call[ref[1]], eid_to_call[op.eid]))

        snapshot = MemorySnapshot(
            regions=[(b, self.region_values[name].astype("<f4").tobytes())
                     for name, b, _ in self.alloc.regions])
        bundle = TraceBundle(functions=functions, traces=traces, callsites=callsites,
                             access_logs=access_logs, snapshot=snapshot,
                             provenance_truth=self.style.name)
        truth = GroundTruth(style=self.style.name, model_name=self.spec.name,
                            funcs=truth_funcs, edges=sorted(edges),
                            input_shape=tuple(self.spec.input_shape),
                            params=self._truth_params(plan))
        return bundle, truth

    def _truth_dims(self, op: _ExecOp) -> dict:
        if op.family == "Conv":
            d = op.dims
            return {"K": d["K"], "I_C": d["I_C"], "O_C": d["O_C"], "S": d["S"],
                    "P": d["P"], "IH": d["IH"], "OH": d["OH"]}
        if op.family == "Dense":
            return dict(op.dims)
        if op.family in ("MaxPool", "AvgPool"):
            return dict(op.dims)
        if op.family == "LRN":
            return {"n": op.attrs["n"]}
        if op.family == "Softmax":
            return {"N": op.attrs["N"]}
        if op.family == "Embedding":
            return dict(op.dims)
        return {}

    def _truth_params(self, plan) -> dict[str, np.ndarray]:
        out = {}
        for fid, op in enumerate(plan):
            if op.weights is not None:
                out[f"{fid}:weights"] = op.weights
            if op.bias is not None:
                out[f"{fid}:biases"] = op.bias
        return out

    def _ref_buf(self, ref) -> tuple[int, tuple[int, ...]]:
        return self.bufs["@input" if ref[0] == "input" else ref[1]]

    def _args(self, op: _ExecOp, meta: dict) -> list[int]:
        sig = signatures.lookup(self.style.name, op.kinds)
        out_base = self.bufs[op.eid][0]
        args = []
        for pos, role in enumerate(sig.roles):
            if role == "out":
                args.append(out_base)
            elif role in ("in", "in1", "in2"):
                if op.family == "InsertTensor":
                    args.append(out_base if role == "in1" else self._ref_buf(op.inputs[0])[0])
                elif sig.inplace_out == pos:
                    args.append(out_base)
                else:
                    slot = 0 if role in ("in", "in1") else 1
                    ref = op.inputs[slot]
                    if ref[0] == "const":
                        args.append(meta[f"const:{ref[1]}"])
                    else:
                        args.append(self._ref_buf(ref)[0])
            elif role == "weights":
                args.append(meta["weights"])
            elif role == "biases":
                args.append(meta["biases"])
            elif role == "offset":
                args.append(int(op.attrs.get("offset", 0)))
            elif role == "dims":
                args.append(0)
            else:
                raise SchemaViolation(f"unhandled role {role}")
        return args

    def _operand_base(self, op: _ExecOp, slot: int):
        ref = op.inputs[slot]
        if ref[0] == "const":
            meta = None
        return None

    def _emit_op(self, w: TraceWriter, op: _ExecOp, meta: dict):
        style = self.style
        out_base = self.bufs[op.eid][0]
        if op.family == "Conv":
            in_base, in_shape = self._ref_buf(op.inputs[0])
            if not op.attrs.get("retile"):
                in_shape = in_shape[1:]  # drop batch; tiled buffers are already 4-d
            _emit_conv(w, op, in_base, in_shape, meta["weights"],
                       meta.get("biases"), out_base, style)
        elif op.family == "Dense":
            _emit_dense(w, op, self._ref_buf(op.inputs[0])[0], meta["weights"],
                        meta.get("biases"), out_base, style)
        elif op.family in ("MaxPool", "AvgPool"):
            in_base, in_shape = self._ref_buf(op.inputs[0])
            _emit_pool(w, op, in_base, in_shape, out_base)
        elif op.family == "LRN":
            in_base, in_shape = self._ref_buf(op.inputs[0])
            _emit_lrn(w, op, in_base, in_shape, out_base)
        elif op.family == "Softmax":
            _emit_softmax(w, op, self._ref_buf(op.inputs[0])[0], out_base)
        elif op.family == "Embedding":
            _emit_embedding(w, op, self._ref_buf(op.inputs[0])[0], meta["weights"],
                            out_base, style)
        elif op.family == "InsertTensor":
            in_base, in_shape = self._ref_buf(op.inputs[0])
            _emit_insert_tensor(w, op, in_base, in_shape, out_base)
        else:
            bases = {"out": out_base}
            if len(op.inputs) == 2:
                for slot, key in ((0, "in1"), (1, "in2")):
                    ref = op.inputs[slot]
                    if ref[0] == "const":
                        base = [b for n, b, _ in self.alloc.regions
                                if n == f"{op.eid}:{ref[1]}"][0]
                        bases[key] = (base, op.consts[ref[1]].shape)
                    else:
                        b, shp = self._ref_buf(ref)
                        bases[key] = (b, shp)
            else:
                ref = op.inputs[0]
                if ref[0] == "const":
                    base = [b for n, b, _ in self.alloc.regions
                            if n == f"{op.eid}:{ref[1]}"][0]
                    bases["in"] = (base, op.consts[ref[1]].shape)
                else:
                    bases["in"] = self._ref_buf(ref)
            if op.family == "BiasAdd":
                bases["biases"] = meta["biases"]
            _emit_eltwise(w, op, bases, style)

    def _access_log(self, fid: int, op: _ExecOp, meta: dict) -> MemAccessLog:
        reads, writes = set(), set()
        out_base = self.bufs[op.eid][0]
        writes |= _range_set(out_base, int(np.prod(op.value.shape)))
        if op.family == "Conv":
            in_base, in_shape = self._ref_buf(op.inputs[0])
            h, w_ = in_shape[2], in_shape[3] if not op.attrs.get("retile") else in_shape[2]
            if op.attrs.get("retile"):
                h = w_ = in_shape[2]
            mask = _conv_in_mask(h, w_, op.dims["OH"], op.dims["OH"], op.dims["K"],
                                 op.dims["S"], op.dims["P_eff"])
            flat = np.flatnonzero(mask.ravel())
            t = op.attrs.get("retile", 0)
            c = op.dims["I_C"]
            if t:
                for pos in flat.tolist():
                    y, x = divmod(pos, w_)
                    for co in range(c // t):
                        base_off = ((co * h + y) * w_ + x) * t
                        reads |= {(in_base + 4 * (base_off + ci), 4) for ci in range(t)}
            else:
                plane = h * w_
                for ci in range(c):
                    reads |= {(in_base + 4 * (ci * plane + pos), 4) for pos in flat.tolist()}
            reads |= _range_set(meta["weights"], op.weights.size)
            if op.bias is not None:
                reads |= _range_set(meta["biases"], op.bias.size)
        elif op.family == "Dense":
            reads |= _range_set(self._ref_buf(op.inputs[0])[0], op.dims["M"])
            reads |= _range_set(meta["weights"], op.weights.size)
            if op.bias is not None:
                reads |= _range_set(meta["biases"], op.bias.size)
        elif op.family == "Embedding":
            in_base, in_shape = self._ref_buf(op.inputs[0])
            reads |= _range_set(in_base, int(np.prod(in_shape)))
            d = op.dims["D"]
            wide = self.style.name == "glow" and d * 4 in (16, 32)
            for ix in sorted(set(op.attrs["indices"])):
                if wide:
                    reads.add((meta["weights"] + 4 * ix * d, d * 4))
                else:
                    reads |= _range_set(meta["weights"] + 4 * ix * d, d)
        elif op.family in ("MaxPool", "AvgPool"):
            in_base, in_shape = self._ref_buf(op.inputs[0])
            oh = op.value.shape[2]
            mask = _conv_in_mask(in_shape[2], in_shape[3], oh, oh,
                                 op.dims["K"], op.dims["S"], 0)
            flat = np.flatnonzero(mask.ravel())
            plane = in_shape[2] * in_shape[3]
            for ci in range(in_shape[1]):
                reads |= {(in_base + 4 * (ci * plane + pos), 4) for pos in flat.tolist()}
        else:
            for slot, ref in enumerate(op.inputs):
                if ref[0] == "const":
                    base = [b for n, b, _ in self.alloc.regions
                            if n == f"{op.eid}:{ref[1]}"][0]
                    reads |= _range_set(base, op.consts[ref[1]].size)
                else:
                    b, shp = self._ref_buf(ref)
                    reads |= _range_set(b, int(np.prod(shp)))
            if op.family == "BiasAdd":
                reads |= _range_set(meta["biases"], op.bias.size)
            if op.family == "Softmax":
                reads |= _range_set(out_base, int(np.prod(op.value.shape)))
        return MemAccessLog(func_id=fid, reads=reads, writes=writes)


def emit_bundle(spec: ModelSpec, style, seed: int,
                options: EmitOptions | None = None) -> tuple[TraceBundle, GroundTruth]:
    """Ground-truth bundle for one model under one codegen style."""
    from ..model import validate_spec
    validate_spec(spec)
    if isinstance(style, str):
        style = style_named(style)
    return _Emitter(spec, style, seed, options or EmitOptions()).run()


@dataclass
class CorpusEntry:
    function: AssemblyFunction
    labels: tuple[str, ...]
    provenance: str
    bundle_key: str


def emit_corpus(specs: list[ModelSpec], styles, seed: int) -> list[CorpusEntry]:
    """Labeled (function, label-vector, provenance) triples for training."""
    if not specs:
        raise SchemaViolation("emit_corpus needs at least one model")
    entries = []
    for spec in specs:
        for style in styles:
            sname = style if isinstance(style, str) else style.name
            bundle, truth = emit_bundle(spec, sname, seed)
            key = f"{spec.name}:{sname}:{seed}"
            for fn in bundle.functions:
                ft = truth.funcs.get(fn.func_id)
                entries.append(CorpusEntry(
                    function=fn, labels=ft.labels if ft else (),
                    provenance=sname, bundle_key=key))
    return entries
