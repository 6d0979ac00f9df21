"""Canonical model representation and reference forward evaluator.

The evaluator is the desk-scale stand-in for recompilation: a recovered
model is accepted when its forward outputs match the source model's outputs
on random inputs within tolerance.  All reductions accumulate in float64 and
round to f32 at operator boundaries, which keeps scalar and vectorized
compute orders within a much tighter band than the comparison tolerances
(1e-6 internal, 1e-4 end to end).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (MissingFile, SchemaViolation, ShapeMismatch,
                     TensorSizeMismatch)

SCHEMA_VERSION = "1"

# number of data inputs per operator kind; weights/biases ride as params
ARITY = {
    "Conv": 1, "Dense": 1, "BiasAdd": 1, "ReLU": 1, "MaxPool": 1, "AvgPool": 1,
    "LRN": 1, "Softmax": 1, "Embedding": 1, "Sqrt": 1, "Negative": 1,
    "Flatten": 1, "Reshape": 1, "ExpandDims": 1, "Transpose": 1, "BatchNorm": 1,
    "Add": 2, "Sub": 2, "Multiply": 2, "Divide": 2,
}


@dataclass
class Tensor:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        return isinstance(other, Tensor) and self.shape == other.shape and \
            np.array_equal(self.data, other.data)


@dataclass
class OpNode:
    op_id: str
    kind: str
    inputs: list    # per slot: ("op", op_id) | ("input",) | ("param", tensor_name)
    dims: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)   # role -> tensor name


@dataclass
class ModelSpec:
    ops: list[OpNode]
    input_shape: tuple[int, ...]
    params: dict[str, Tensor]
    input_domain: dict = field(default_factory=lambda: {"kind": "uniform", "low": -1.0, "high": 1.0})
    name: str = "model"

    @property
    def edges(self) -> list[tuple[str, str, int]]:
        out = []
        for op in self.ops:
            for slot, src in enumerate(op.inputs):
                if src[0] == "op":
                    out.append((src[1], op.op_id, slot))
        return out

    def op(self, op_id: str) -> OpNode:
        for o in self.ops:
            if o.op_id == op_id:
                return o
        raise KeyError(op_id)

    def output_ids(self) -> list[str]:
        consumed = {src[1] for op in self.ops for src in op.inputs if src[0] == "op"}
        return [o.op_id for o in self.ops if o.op_id not in consumed]


def validate_spec(spec: ModelSpec) -> None:
    ids = [o.op_id for o in spec.ops]
    if len(set(ids)) != len(ids):
        raise SchemaViolation("duplicate op ids")
    seen = set()
    for op in spec.ops:
        if op.kind not in ARITY:
            raise SchemaViolation(f"unknown op kind {op.kind!r}")
        if len(op.inputs) != ARITY[op.kind]:
            raise SchemaViolation(f"{op.op_id}: {op.kind} takes {ARITY[op.kind]} inputs")
        for src in op.inputs:
            if src[0] == "op":
                if src[1] not in seen:
                    raise SchemaViolation(
                        f"{op.op_id}: input {src[1]} not defined earlier (ops must be topological)")
            elif src[0] == "param":
                if src[1] not in spec.params:
                    raise SchemaViolation(f"{op.op_id}: unknown param {src[1]}")
            elif src[0] != "input":
                raise SchemaViolation(f"{op.op_id}: bad input tag {src[0]!r}")
        for role, name in op.params.items():
            if name not in spec.params:
                raise SchemaViolation(f"{op.op_id}: unknown param {name} for {role}")
        seen.add(op.op_id)
    if not spec.output_ids():
        raise SchemaViolation("model has no output op")
    # recorded dims must agree with stored parameter shapes and the
    # propagated output-size relation OH = floor((IH+2P-K)/S)+1
    shapes = propagate_shapes(spec)
    for op in spec.ops:
        if op.kind == "Conv":
            k, s, p = op.dims["K"], op.dims["S"], op.dims["P"]
            w = spec.params[op.params["weights"]]
            if w.shape != (op.dims["O_C"], op.dims["I_C"], k, k):
                raise SchemaViolation(
                    f"{op.op_id}: weights {w.shape} disagree with dims {op.dims}")
            ih = shapes[op.op_id + "/in"][2]
            if ih + 2 * p - k < 0:
                raise SchemaViolation(f"{op.op_id}: kernel exceeds padded input")
            if "biases" in op.params and \
                    spec.params[op.params["biases"]].shape != (op.dims["O_C"],):
                raise SchemaViolation(f"{op.op_id}: bias shape mismatch")
        elif op.kind == "Dense":
            w = spec.params[op.params["weights"]]
            if w.shape != (op.dims["M"], op.dims["N"]):
                raise SchemaViolation(
                    f"{op.op_id}: weights {w.shape} disagree with dims {op.dims}")


def _channel_broadcast(a: np.ndarray, b: np.ndarray):
    """Align a flat per-channel vector against an NCHW tensor."""
    if a.ndim == 4 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return a, b.reshape(1, -1, 1, 1)
    if b.ndim == 4 and a.ndim == 1 and a.shape[0] == b.shape[1]:
        return a.reshape(1, -1, 1, 1), b
    return a, b


def _conv2d(x, w, stride, pad, bias=None):
    x = x.astype(np.float64)
    w = w.astype(np.float64)
    _, c, h, _ = x.shape
    o, ci, k, _ = w.shape
    if ci != c:
        raise ShapeMismatch("conv", f"input channels {c} != weight channels {ci}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    out = np.zeros((1, o, oh, oh), dtype=np.float64)
    if bias is not None:
        out += bias.astype(np.float64).reshape(1, -1, 1, 1)
    for ci_ in range(c):
        for i in range(k):
            for j in range(k):
                patch = xp[:, ci_, i:i + stride * (oh - 1) + 1:stride,
                           j:j + stride * (oh - 1) + 1:stride]
                out += w[:, ci_, i, j].reshape(1, -1, 1, 1) * patch[:, None, :, :]
    return out.astype(np.float32)


def _pool2d(x, k, s, mode):
    _, c, h, _ = x.shape
    oh = (h - k) // s + 1
    if oh < 1:
        raise ShapeMismatch("pool", f"window {k} too large for {h}")
    if mode == "max":
        out = None
        for i in range(k):
            for j in range(k):
                patch = x[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (oh - 1) + 1:s]
                out = patch if out is None else np.maximum(out, patch)
        return out
    acc = np.zeros((1, c, oh, oh), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            acc += x[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (oh - 1) + 1:s]
    return (acc / (k * k)).astype(np.float32)


def _lrn(x, n, alpha, beta, k):
    x64 = x.astype(np.float64)
    _, c, _, _ = x.shape
    half = (n - 1) // 2
    sq = x64 * x64
    den = np.empty_like(x64)
    for ci in range(c):
        lo, hi = max(0, ci - half), min(c, ci + half + 1)
        den[:, ci] = k + (alpha / n) * sq[:, lo:hi].sum(axis=1)
    return (x64 / den ** beta).astype(np.float32)


def _softmax(x):
    flat = x.astype(np.float64).ravel()
    e = np.exp(flat - flat.max())
    return (e / e.sum()).astype(np.float32)


def _dense(x, w):
    v = x.astype(np.float64).ravel()
    m, n = w.shape
    if v.size != m:
        raise ShapeMismatch("dense", f"input size {v.size} != weight rows {m}")
    out = np.zeros(n, dtype=np.float64)
    w64 = w.astype(np.float64)
    for i in range(m):
        out += v[i] * w64[i]
    return out.astype(np.float32)


def forward(spec: ModelSpec, x: Tensor) -> Tensor:
    if tuple(x.shape) != tuple(spec.input_shape):
        raise ShapeMismatch("@input", f"got {x.shape}, want {spec.input_shape}")
    values: dict[str, np.ndarray] = {}

    def resolve(src):
        if src[0] == "op":
            return values[src[1]]
        if src[0] == "input":
            return x.data
        return spec.params[src[1]].data

    for op in spec.ops:
        ins = [resolve(s) for s in op.inputs]
        kind = op.kind
        if kind == "Conv":
            bias = spec.params[op.params["biases"]].data if "biases" in op.params else None
            v = _conv2d(ins[0], spec.params[op.params["weights"]].data,
                        op.dims["S"], op.dims["P"], bias)
        elif kind == "Dense":
            v = _dense(ins[0], spec.params[op.params["weights"]].data)
        elif kind == "BiasAdd":
            a, b = _channel_broadcast(ins[0], spec.params[op.params["biases"]].data)
            if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
                b = b.reshape(1, -1)
            v = (a.astype(np.float64) + b.astype(np.float64)).astype(np.float32)
        elif kind in ("Add", "Sub", "Multiply", "Divide"):
            a, b = _channel_broadcast(ins[0], ins[1])
            a64, b64 = a.astype(np.float64), b.astype(np.float64)
            if kind == "Add":
                v = a64 + b64
            elif kind == "Sub":
                v = a64 - b64
            elif kind == "Multiply":
                v = a64 * b64
            else:
                v = a64 / b64
            v = v.astype(np.float32)
        elif kind == "ReLU":
            v = np.maximum(ins[0], np.float32(0.0))
        elif kind == "Sqrt":
            v = np.sqrt(ins[0].astype(np.float64)).astype(np.float32)
        elif kind == "Negative":
            v = -ins[0]
        elif kind == "MaxPool":
            v = _pool2d(ins[0], op.dims["K"], op.dims["S"], "max")
        elif kind == "AvgPool":
            v = _pool2d(ins[0], op.dims["K"], op.dims["S"], "avg")
        elif kind == "LRN":
            a = op.attrs
            v = _lrn(ins[0], a["n"], a["alpha"], a.get("beta", 0.75), a["k"])
        elif kind == "BatchNorm":
            g = spec.params[op.params["gamma"]].data.astype(np.float64)
            b = spec.params[op.params["beta"]].data.astype(np.float64)
            mu = spec.params[op.params["mean"]].data.astype(np.float64)
            var = spec.params[op.params["var"]].data.astype(np.float64)
            eps = float(op.attrs.get("eps", 1e-5))
            scale = (g / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
            shift = (b - mu * g / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
            v = (ins[0].astype(np.float64) * scale + shift).astype(np.float32)
        elif kind == "Softmax":
            v = _softmax(ins[0])
        elif kind == "Embedding":
            table = spec.params[op.params["weights"]].data
            idx = np.rint(ins[0].astype(np.float64)).astype(np.int64).ravel()
            if idx.min() < 0 or idx.max() >= table.shape[0]:
                raise ShapeMismatch(op.op_id, f"index out of range 0..{table.shape[0] - 1}")
            v = table[idx]
        elif kind == "Flatten":
            v = ins[0].reshape(1, -1) if ins[0].ndim > 1 else ins[0]
        elif kind == "Reshape":
            v = ins[0].reshape(op.attrs["shape"]) if "shape" in op.attrs else ins[0]
        elif kind == "ExpandDims":
            v = ins[0].reshape(tuple(ins[0].shape) + (1, 1))
        elif kind == "Transpose":
            v = np.ascontiguousarray(np.transpose(ins[0], op.attrs["perm"]))
        else:
            raise ShapeMismatch(op.op_id, f"kind {kind} not executable")
        values[op.op_id] = np.asarray(v, dtype=np.float32)

    outs = spec.output_ids()
    return Tensor(values[outs[-1]])


def propagate_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Static shapes per op (and per-op input as ``<id>/in``)."""
    shapes: dict[str, tuple[int, ...]] = {}

    def shape_of(src):
        if src[0] == "op":
            return shapes[src[1]]
        if src[0] == "input":
            return tuple(spec.input_shape)
        return spec.params[src[1]].shape

    for op in spec.ops:
        s0 = shape_of(op.inputs[0])
        shapes[op.op_id + "/in"] = s0
        kind = op.kind
        if kind == "Conv":
            oh = (s0[2] + 2 * op.dims["P"] - op.dims["K"]) // op.dims["S"] + 1
            shapes[op.op_id] = (1, op.dims["O_C"], oh, oh)
        elif kind == "Dense":
            shapes[op.op_id] = (op.dims["N"],)
        elif kind in ("MaxPool", "AvgPool"):
            oh = (s0[2] - op.dims["K"]) // op.dims["S"] + 1
            shapes[op.op_id] = (s0[0], s0[1], oh, oh)
        elif kind == "Embedding":
            shapes[op.op_id] = (int(np.prod(s0)), op.dims["D"])
        elif kind == "Flatten":
            shapes[op.op_id] = (1, int(np.prod(s0)))
        elif kind == "ExpandDims":
            shapes[op.op_id] = tuple(s0) + (1, 1)
        elif kind in ("Add", "Sub", "Multiply", "Divide"):
            s1 = shape_of(op.inputs[1])
            shapes[op.op_id] = s0 if np.prod(s0) >= np.prod(s1) else s1
        else:
            shapes[op.op_id] = s0
    return shapes


# ---- equivalence ----

@dataclass
class EquivalenceReport:
    per_input: list[dict]
    tolerance: float

    @property
    def verdict(self) -> str:
        ok = all(r["labels_match"] and r["max_abs_diff"] <= self.tolerance
                 for r in self.per_input)
        return "pass" if ok else "fail"


def random_inputs(spec: ModelSpec, n: int, seed: int) -> list[Tensor]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        dom = spec.input_domain
        if dom.get("kind") == "index":
            v = rng.integers(0, int(dom["high"]), size=spec.input_shape)
            out.append(Tensor(v.astype(np.float32)))
        else:
            lo, hi = float(dom.get("low", -1.0)), float(dom.get("high", 1.0))
            out.append(Tensor(rng.uniform(lo, hi, size=spec.input_shape)))
    return out


def compare(spec_a: ModelSpec, spec_b: ModelSpec, inputs: list[Tensor],
            tol: float = 1e-4) -> EquivalenceReport:
    if tuple(spec_a.input_shape) != tuple(spec_b.input_shape):
        raise ShapeMismatch("@input", "input shapes differ")
    rows = []
    for x in inputs:
        ya = forward(spec_a, x).data.ravel()
        yb = forward(spec_b, x).data.ravel()
        diff = float(np.max(np.abs(ya.astype(np.float64) - yb.astype(np.float64)))) \
            if ya.size == yb.size else math.inf
        rows.append({"labels_match": bool(ya.size == yb.size and
                                          int(np.argmax(ya)) == int(np.argmax(yb))),
                     "max_abs_diff": diff})
    return EquivalenceReport(per_input=rows, tolerance=tol)


# ---- serialization ----

def save_spec(spec: ModelSpec, path: str) -> None:
    validate_spec(spec)
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "input_domain": spec.input_domain,
        "ops": [{"id": o.op_id, "kind": o.kind, "inputs": [list(s) for s in o.inputs],
                 "dims": o.dims, "attrs": o.attrs, "params": o.params}
                for o in spec.ops],
        "edges": [list(e) for e in spec.edges],
        "params": {name: {"shape": list(t.shape)} for name, t in sorted(spec.params.items())},
    }
    with open(os.path.join(path, "model.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    for name, t in sorted(spec.params.items()):
        with open(os.path.join(path, "params", name + ".f32"), "wb") as fh:
            fh.write(t.data.astype("<f4").tobytes())


def load_spec(path: str) -> ModelSpec:
    mpath = os.path.join(path, "model.json")
    if not os.path.exists(mpath):
        raise MissingFile(mpath)
    with open(mpath) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaViolation(f"invalid JSON: {e}", mpath) from e
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaViolation("unsupported schema_version", mpath)
    params = {}
    for name, meta in doc.get("params", {}).items():
        fpath = os.path.join(path, "params", name + ".f32")
        if not os.path.exists(fpath):
            raise MissingFile(fpath)
        with open(fpath, "rb") as fh:
            raw = np.frombuffer(fh.read(), dtype="<f4")
        shape = tuple(int(d) for d in meta["shape"])
        if raw.size != int(np.prod(shape)):
            raise TensorSizeMismatch(f"{name}: {raw.size} values for shape {shape}")
        params[name] = Tensor(raw.reshape(shape).copy())
    try:
        ops = [OpNode(op_id=str(d["id"]), kind=str(d["kind"]),
                      inputs=[tuple(s) for s in d["inputs"]],
                      dims={k: int(v) for k, v in d.get("dims", {}).items()},
                      attrs=d.get("attrs", {}), params=d.get("params", {}))
               for d in doc["ops"]]
        spec = ModelSpec(ops=ops, input_shape=tuple(int(v) for v in doc["input_shape"]),
                         params=params, input_domain=doc.get("input_domain", {}),
                         name=doc.get("name", "model"))
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaViolation(f"bad model doc: {e}", mpath) from e
    validate_spec(spec)
    return spec
