"""End-to-end decompilation: bundle in, recovered model plus report out.

Stage order is fixed: classify -> provenance -> topology -> taint -> symbolic
execution -> dimension/parameter recovery -> rules -> export.  Failures in a
later stage leave earlier artifacts intact for debugging; recovery-stage
errors become findings rather than aborts, because a partially recovered
model is still useful.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import recover, signatures, symexec, taint
from .bundle import TraceBundle
from .errors import DnnliftError
from .model import ModelSpec, OpNode, Tensor
from .opid import Classifier, OperatorLabelVec, classify, predict_provenance
from .recover import RecoveredOp
from .rules import Finding, OpContext, apply_rules, compute_shapes
from .topology import CompGraph, recover_topology

_DROPPED_LABELS = recover._DROPPED_KINDS


@dataclass
class DecompileResult:
    provenance: str
    labels: dict[int, OperatorLabelVec]
    graph: CompGraph
    contexts: list[OpContext]
    findings: list[Finding]
    errors: list[dict]
    model: ModelSpec | None
    input_region: symexec.MemRegion | None
    warnings: list[dict] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        if self.errors or self.model is None:
            return 2
        if any(not f.fix_applied for f in self.findings):
            return 2
        return 0


def _sem_prev(graph: CompGraph, contexts_by_call: dict[int, OpContext],
              dropped: set[int], call_index: int) -> int | None:
    """Nearest non-dropped producer, following pass-through ops."""
    cur = call_index
    for _ in range(len(contexts_by_call) + 1):
        prods = graph.producers_of(cur)
        if not prods:
            return None
        p = prods[0][0]
        if p not in dropped:
            return p
        cur = p
    return None


def decompile_bundle(bundle: TraceBundle, clf: Classifier,
                     taint_policy: str = "auto",
                     workers: int | None = None) -> DecompileResult:
    timings = {}
    t0 = time.perf_counter()
    labels = {f.func_id: classify(clf, f) for f in bundle.functions}
    timings["classify"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    provenance = predict_provenance(clf, bundle)
    timings["provenance"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    graph = recover_topology(bundle, labels, provenance)
    timings["topology"] = time.perf_counter() - t0

    # arity-driven label reductions are structure-over-classifier fixes, like
    # rules 2-4; an unresolvable signature loses the operator and stays fatal
    warnings = [w for w in graph.warnings if w["error"] == "SignatureArityMismatch"]
    errors: list[dict] = [w for w in graph.warnings
                          if w["error"] != "SignatureArityMismatch"]
    nodes = sorted(graph.nodes, key=lambda n: n.call_index)
    callsite_of = {c.call_index: c for c in bundle.callsites}

    # -- per-node region scoping and input wiring (cheap, sequential) --
    prep = {}
    input_region: symexec.MemRegion | None = None
    for node in nodes:
        cs = callsite_of[node.call_index]
        sig = signatures.lookup(provenance, node.labels.labels)
        access = bundle.access_logs.get(node.func_id)
        trace = bundle.traces.get(node.func_id)
        if access is None or trace is None:
            errors.append({"stage": "recover", "func_id": node.func_id,
                           "call_index": node.call_index,
                           "error": "MissingTrace",
                           "detail": "labeled function has no trace/access log"})
            continue
        regions = symexec.scope_regions(access, cs, sig)
        prep[node.call_index] = (cs, sig, access, trace, regions)
    edges_by_consumer: dict[int, dict[int, int]] = {}
    for p, c, via in graph.edges:
        edges_by_consumer.setdefault(c, {})[via] = p
    for node in nodes:
        if node.call_index not in prep:
            continue
        cs, sig, access, trace, regions = prep[node.call_index]
        if input_region is None:
            for pos in sig.in_roles():
                if pos == sig.inplace_out:
                    continue  # a fresh in/out buffer is not the model input
                addr = cs.args[pos]
                if addr not in edges_by_consumer.get(node.call_index, {}):
                    role = sig.roles[pos]
                    key = role if role in regions else f"{role}@{pos}"
                    if key in regions:
                        input_region = regions[key]
                    break

    def in_sources_for(node, cs, sig, regions):
        srcs = []
        via_map = edges_by_consumer.get(node.call_index, {})
        for pos in sig.in_roles():
            addr = cs.args[pos]
            if addr in via_map:
                srcs.append(("op", via_map[addr]))
            elif pos == sig.inplace_out:
                continue  # fresh in/out buffer with no producer (InsertTensor)
            elif input_region is not None and input_region.contains(addr):
                srcs.append(("input",))
            else:
                role = sig.roles[pos]
                key = role if role in regions else f"{role}@{pos}"
                srcs.append(("region", regions.get(key, symexec.MemRegion(addr, 4))))
        return srcs

    # -- symbolic execution per node (parallel) --
    t0 = time.perf_counter()

    def run_se(node):
        cs, sig, access, trace, regions = prep[node.call_index]
        if "out" not in regions:
            return node.call_index, None, {"stage": "symexec",
                                           "func_id": node.func_id,
                                           "call_index": node.call_index,
                                           "error": "MissingRole",
                                           "detail": "no output region"}
        n_sinks = 2 if node.labels.labels & {"MaxPool", "AvgPool"} else 1
        sinks = symexec.find_sinks(trace, regions["out"], n_sinks)
        if not sinks:
            return node.call_index, None, {"stage": "symexec",
                                           "func_id": node.func_id,
                                           "call_index": node.call_index,
                                           "error": "EmptyTrace",
                                           "detail": "trace writes no output cell"}
        try:
            rtcs = []
            for sink in sinks:
                sub = (taint.taint_backward(trace, {sink})
                       if taint.should_taint(node.labels.labels, taint_policy)
                       else taint.passthrough(trace))
                expr = symexec.simplify(symexec.sym_execute(sub, sink))
                rtcs.append(symexec.tag_roles(expr, cs, sig, access,
                                              bundle.snapshot, sink))
            return node.call_index, rtcs, None
        except DnnliftError as e:
            return node.call_index, None, {"stage": "symexec",
                                           "func_id": node.func_id,
                                           "call_index": node.call_index,
                                           "error": type(e).__name__,
                                           "detail": str(e)}

    max_workers = workers or int(os.environ.get("DNNLIFT_WORKERS", "4"))
    runnable = [n for n in nodes if n.call_index in prep]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        se_results = list(pool.map(run_se, runnable))
    timings["taint+symexec"] = time.perf_counter() - t0
    constraints: dict[int, list] = {}
    for call_index, rtcs, err in se_results:
        if err is not None:
            errors.append(err)
        else:
            constraints[call_index] = rtcs

    # -- sequential dimension/parameter recovery in call order --
    t0 = time.perf_counter()
    dropped_calls = {n.call_index for n in nodes
                     if n.labels.labels & _DROPPED_LABELS}
    contexts: list[OpContext] = []
    by_call: dict[int, OpContext] = {}
    shapes: dict[int, tuple | None] = {}
    input_shape_guess: tuple | None = None
    for node in nodes:
        if node.call_index not in constraints:
            continue
        cs, sig, access, trace, regions = prep[node.call_index]
        rtcs = constraints[node.call_index]
        sem_prev = _sem_prev(graph, by_call, dropped_calls, node.call_index)
        prev_oh = None
        if "Conv" in node.labels.labels:
            prev_oh = _conv_prev_oh(rtcs[0], sem_prev, shapes, by_call,
                                    graph, node.call_index, input_region,
                                    input_shape_guess)
        offset_arg = None
        if "offset" in sig.roles:
            offset_arg = cs.args[sig.roles.index("offset")]
        try:
            rec = recover.recover_operator(
                tuple(sorted(node.labels.labels)), rtcs, regions, access,
                bundle.snapshot, prev_oh=prev_oh, offset_arg=offset_arg)
        except DnnliftError as e:
            errors.append({"stage": "recover", "func_id": node.func_id,
                           "call_index": node.call_index,
                           "error": type(e).__name__, "detail": str(e)})
            continue
        ctx = OpContext(call_index=node.call_index, func_id=node.func_id,
                        labels=node.labels, rec=rec, constraints=rtcs,
                        regions=regions,
                        in_sources=in_sources_for(node, cs, sig, regions),
                        sem_prev=sem_prev)
        contexts.append(ctx)
        by_call[node.call_index] = ctx
        in_shape = _in_shape_of(ctx, shapes, input_shape_guess)
        from .rules import _shape_after
        shapes[node.call_index] = _shape_after(rec, in_shape)
        if input_shape_guess is None and not rec.dropped:
            input_shape_guess = _input_shape_from(rec, regions, bundle)
    timings["recover"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    findings = apply_rules(contexts, bundle.snapshot, input_shape_guess,
                           style=provenance)
    timings["rules"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model = None
    try:
        model = assemble_model(contexts, bundle, input_shape_guess)
    except DnnliftError as e:
        errors.append({"stage": "export", "func_id": -1, "call_index": -1,
                       "error": type(e).__name__, "detail": str(e)})
    for ctx in contexts:
        if "layout_error" in ctx.rec.attrs:
            errors.append({"stage": "recover", "func_id": ctx.func_id,
                           "call_index": ctx.call_index,
                           "error": "LayoutUnrecognized",
                           "detail": ctx.rec.attrs["layout_error"]})
        if "dim_error" in ctx.rec.attrs:
            errors.append({"stage": "recover", "func_id": ctx.func_id,
                           "call_index": ctx.call_index,
                           "error": "NonIntegerDim",
                           "detail": ctx.rec.attrs["dim_error"]})
    timings["export"] = time.perf_counter() - t0
    return DecompileResult(provenance=provenance, labels=labels, graph=graph,
                           contexts=contexts, findings=findings, errors=errors,
                           model=model, input_region=input_region,
                           warnings=warnings, timings=timings)


def _conv_prev_oh(rtc, sem_prev, shapes, by_call, graph, call_index,
                  input_region, input_shape_guess):
    """Producer output height for padding inference."""
    if sem_prev is not None:
        shape = shapes.get(sem_prev)
        if shape is not None and len(shape) == 4:
            return shape[2]
        return None
    # fed by the model input; derive H from the input region and the
    # constraint's channel count
    try:
        _, i_c, _ = recover.conv_kernel_and_ic(rtc)
    except DnnliftError:
        return None
    region = _semantic_source_region(graph, by_call, call_index, input_region)
    if region is None:
        return None
    n = region.size // (recover.F32 * i_c)
    root = int(np.sqrt(n))
    return root if root * root == n else None


def _semantic_source_region(graph, by_call, call_index, input_region):
    prods = graph.producers_of(call_index)
    if not prods:
        return input_region
    p = prods[0][0]
    ctx = by_call.get(p)
    if ctx is not None and ctx.rec.dropped:
        srcs = [s for s in ctx.in_sources if s[0] != "op"]
        if ctx.in_sources and ctx.in_sources[0][0] == "op":
            return _semantic_source_region(graph, by_call, ctx.in_sources[0][1],
                                           input_region)
        if srcs and srcs[0][0] == "input":
            return input_region
        if srcs and srcs[0][0] == "region":
            return srcs[0][1]
    return input_region


def _in_shape_of(ctx: OpContext, shapes, input_shape):
    best = None
    for src in ctx.in_sources:
        cand = None
        if src[0] == "op":
            cand = shapes.get(src[1])
        elif src[0] == "input":
            cand = input_shape
        else:
            cand = (src[1].size // recover.F32,)
        if cand is not None and (best is None or np.prod(cand) > np.prod(best)):
            best = cand
    return best


def _input_shape_from(rec: RecoveredOp, regions, bundle) -> tuple | None:
    if rec.family == "Conv" and rec.dims:
        return (1, rec.dims["I_C"], rec.dims["IH"], rec.dims["IH"])
    if rec.family == "Embedding":
        return (rec.attrs["L"],)
    if rec.family == "Dense" and rec.dims:
        return (rec.dims["M"],)
    for key in ("in", "in1"):
        if key in regions:
            return (regions[key].size // recover.F32,)
    return None


def assemble_model(contexts: list[OpContext], bundle: TraceBundle,
                   input_shape: tuple | None) -> ModelSpec:
    """Rebuild an executable spec from recovered ops; pass-through utility
    shape operators are recorded in findings but elided here."""
    from .errors import SchemaViolation
    if input_shape is None:
        raise SchemaViolation("could not determine model input shape")
    missing = [c for c in contexts
               if "layout_error" in c.rec.attrs or "dim_error" in c.rec.attrs]
    if missing:
        raise SchemaViolation(
            f"{len(missing)} operator(s) lack recovered parameters; "
            "refusing to export a silently wrong model")
    params: dict[str, Tensor] = {}
    ops: list[OpNode] = []
    final_op_of: dict[int, str] = {}
    input_domain = {"kind": "uniform", "low": -1.0, "high": 1.0}
    by_call = {c.call_index: c for c in contexts}

    def resolve(src):
        if src[0] == "input":
            return ("input",)
        if src[0] == "region":
            name = f"t{len(params)}"
            raw = bundle.snapshot.read(src[1].base, src[1].size)
            params[name] = Tensor(np.frombuffer(raw, dtype="<f4").copy())
            return ("param", name)
        ctx = by_call.get(src[1])
        if ctx is None:
            return ("input",)
        if ctx.rec.dropped:
            return resolve(ctx.in_sources[0]) if ctx.in_sources else ("input",)
        return ("op", final_op_of[src[1]])

    for ctx in contexts:
        rec = ctx.rec
        if rec.dropped:
            continue
        srcs = [resolve(s) for s in ctx.in_sources] or [("input",)]
        base = f"c{ctx.call_index}"
        if rec.family in ("Conv", "Dense"):
            wname = f"{base}_w"
            params[wname] = Tensor(rec.params["weights"])
            kinds_after = []
            if rec.family == "Conv":
                dims = {k: rec.dims[k] for k in ("K", "S", "P", "O_C", "I_C")}
                op_params = {"weights": wname}
                if "biases" in rec.params and "BiasAdd" not in rec.fused:
                    bname = f"{base}_b"
                    params[bname] = Tensor(rec.params["biases"])
                    op_params["biases"] = bname
                ops.append(OpNode(op_id=base, kind="Conv", inputs=[srcs[0]],
                                  dims=dims, params=op_params))
            else:
                ops.append(OpNode(op_id=base, kind="Dense", inputs=[srcs[0]],
                                  dims=dict(rec.dims), params={"weights": wname}))
            if "BiasAdd" in rec.fused and "biases" in rec.params:
                bname = f"{base}_b"
                params[bname] = Tensor(rec.params["biases"])
                kinds_after.append(("BiasAdd", {"biases": bname}))
            if "ReLU" in rec.fused:
                kinds_after.append(("ReLU", {}))
            last = base
            for i, (kind, op_params) in enumerate(kinds_after):
                oid = f"{base}_{kind.lower()}"
                ops.append(OpNode(op_id=oid, kind=kind, inputs=[("op", last)],
                                  params=op_params))
                last = oid
            final_op_of[ctx.call_index] = last
            continue
        if rec.family == "Embedding":
            wname = f"{base}_w"
            params[wname] = Tensor(rec.params["weights"])
            ops.append(OpNode(op_id=base, kind="Embedding", inputs=[srcs[0]],
                              dims=dict(rec.dims), params={"weights": wname}))
            if ctx.in_sources and ctx.in_sources[0][0] == "input":
                input_domain = {"kind": "index", "high": rec.dims["N"]}
            final_op_of[ctx.call_index] = base
            continue
        if rec.family == "BiasAdd":
            bname = f"{base}_b"
            if "biases" in rec.params:
                params[bname] = Tensor(rec.params["biases"])
            else:
                slot = rec.attrs.get("bias_slot", len(srcs) - 1)
                bias_src = srcs[slot]
                if bias_src[0] != "param":
                    raise SchemaViolation(f"{base}: BiasAdd bias is not a parameter")
                params[bname] = params.pop(bias_src[1])
                srcs = [s for i, s in enumerate(srcs) if i != slot]
            node = OpNode(op_id=base, kind="BiasAdd",
                          inputs=[srcs[0] if srcs else ("input",)],
                          params={"biases": bname})
            if "ReLU" in rec.fused:
                ops.extend([node, OpNode(op_id=base + "_relu", kind="ReLU",
                                         inputs=[("op", base)])])
                final_op_of[ctx.call_index] = base + "_relu"
            else:
                ops.append(node)
                final_op_of[ctx.call_index] = base
            continue
        if rec.family in ("MaxPool", "AvgPool"):
            ops.append(OpNode(op_id=base, kind=rec.family, inputs=[srcs[0]],
                              dims=dict(rec.dims)))
        elif rec.family == "LRN":
            ops.append(OpNode(op_id=base, kind="LRN", inputs=[srcs[0]],
                              attrs={k: rec.attrs[k]
                                     for k in ("n", "alpha", "beta", "k")}))
        elif rec.family == "Softmax":
            ops.append(OpNode(op_id=base, kind="Softmax", inputs=[srcs[0]],
                              attrs={"N": rec.attrs["N"]}))
        elif rec.family in ("Add", "Multiply", "Divide"):
            ops.append(OpNode(op_id=base, kind=rec.family, inputs=srcs[:2]))
        elif rec.family in ("Sqrt", "Negative", "ReLU"):
            ops.append(OpNode(op_id=base, kind=rec.family, inputs=[srcs[0]]))
        else:
            raise SchemaViolation(f"cannot rebuild operator family {rec.family}")
        final_op_of[ctx.call_index] = ops[-1].op_id

    spec = ModelSpec(ops=ops, input_shape=tuple(input_shape), params=params,
                     input_domain=input_domain, name="recovered")
    from .model import validate_spec
    validate_spec(spec)
    return spec
