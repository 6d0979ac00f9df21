"""Command-line interface.

Subcommands: gen, gen-corpus, train-id, classify, topology, decompile,
verify.  Exit codes: 0 clean, 2 partial result with findings, 1 fatal.
All outputs are deterministic for a fixed seed; stage timings go to stderr
so artifact bytes stay reproducible.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import model as model_core
from . import opid, pipeline, symexec, zoo
from .bundle import read_bundle, write_bundle
from .errors import DnnliftError
from .harness import EmitOptions, emit_bundle, emit_corpus
from .topology import recover_topology


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_model_arg(arg: str, seed: int) -> model_core.ModelSpec:
    if arg in zoo.MODELS:
        return zoo.get_model(arg, seed)
    path = arg[:-len("/model.json")] if arg.endswith("model.json") else arg
    return model_core.load_spec(path)


def cmd_gen(args) -> int:
    spec = _load_model_arg(args.model, args.seed)
    options = EmitOptions(adversarial_layout=args.adversarial,
                          inject_reshape_conv=args.inject_reshape_conv,
                          tvm_ab=tuple(args.tvm_ab) if args.tvm_ab else None)
    bundle, truth = emit_bundle(spec, args.style, args.seed, options)
    write_bundle(bundle, args.out)
    if args.save_source:
        model_core.save_spec(spec, args.save_source)
    _json_dump({
        "style": truth.style, "model": truth.model_name,
        "input_shape": list(truth.input_shape),
        "edges": [list(e) for e in truth.edges],
        "functions": {str(fid): {"labels": list(ft.labels), "family": ft.family,
                                 "dims": ft.dims, "layout": list(ft.layout)}
                      for fid, ft in sorted(truth.funcs.items())},
    }, os.path.join(args.out, "ground_truth.json"))
    print(f"wrote bundle: {args.out} ({len(bundle.functions)} functions, "
          f"{sum(len(t) for t in bundle.traces.values())} trace entries)")
    return 0


def cmd_gen_corpus(args) -> int:
    specs = [zoo.get_model(n, args.seed) for n in zoo.ROUND_TRIP_MODELS]
    specs += zoo.sample_models(args.seed + 11, args.samples)
    entries = []
    for s in args.corpus_seeds:
        entries += emit_corpus(specs, ["tvm-o0", "tvm-o3", "glow"], s)
    os.makedirs(args.out, exist_ok=True)
    _json_dump([{"opcodes": e.function.opcode_sequence, "labels": list(e.labels),
                 "provenance": e.provenance, "bundle": e.bundle_key}
                for e in entries], os.path.join(args.out, "corpus.json"))
    print(f"wrote corpus: {len(entries)} labeled functions")
    return 0


def _load_corpus(path: str):
    from .bundle import AssemblyFunction
    from .harness import CorpusEntry
    with open(os.path.join(path, "corpus.json")) as fh:
        rows = json.load(fh)
    return [CorpusEntry(
        function=AssemblyFunction(func_id=i, name="", opcode_sequence=r["opcodes"],
                                  entry_address=0),
        labels=tuple(r["labels"]), provenance=r["provenance"],
        bundle_key=r["bundle"]) for i, r in enumerate(rows)]


def cmd_train_id(args) -> int:
    corpus = _load_corpus(args.corpus)
    clf = opid.train_classifier(corpus, {"seed": args.seed, "epochs": args.epochs})
    opid.save_classifier(clf, args.out)
    print(f"trained on {len(corpus)} functions -> {args.out}")
    return 0


def cmd_classify(args) -> int:
    clf = opid.load_classifier(args.model)
    bundle = read_bundle(args.bundle)
    out = {}
    for fn in bundle.functions:
        lv = opid.classify(clf, fn)
        out[str(fn.func_id)] = {"labels": sorted(lv.labels),
                                "confidences": {n: round(c, 6) for n, c in
                                                zip(lv.label_names, lv.confidences)
                                                if c >= 0.01},
                                "needs_review": lv.needs_review}
    doc = {"provenance": opid.predict_provenance(clf, bundle), "functions": out}
    if args.out:
        _json_dump(doc, args.out)
    else:
        print(json.dumps(doc, sort_keys=True, indent=1))
    return 0


def cmd_topology(args) -> int:
    clf = opid.load_classifier(args.model)
    bundle = read_bundle(args.bundle)
    labels = {f.func_id: opid.classify(clf, f) for f in bundle.functions}
    style = opid.predict_provenance(clf, bundle)
    graph = recover_topology(bundle, labels, style)
    _json_dump({
        "provenance": style,
        "nodes": [{"call_index": n.call_index, "func_id": n.func_id,
                   "labels": sorted(n.labels.labels)} for n in graph.nodes],
        "edges": [{"producer": p, "consumer": c, "via": hex(v)}
                  for p, c, v in graph.edges],
    }, args.out)
    print(f"wrote {args.out}: {len(graph.nodes)} nodes, {len(graph.edges)} edges")
    return 0


def cmd_decompile(args) -> int:
    clf = opid.load_classifier(args.model)
    bundle = read_bundle(args.bundle)
    os.makedirs(args.out, exist_ok=True)
    res = pipeline.decompile_bundle(bundle, clf, taint_policy=args.taint,
                                    workers=args.workers)
    for stage, secs in res.timings.items():
        print(f"[time] {stage}: {secs:.3f}s", file=sys.stderr)

    _json_dump({str(fid): {"labels": sorted(lv.labels),
                           "needs_review": lv.needs_review}
                for fid, lv in res.labels.items()},
               os.path.join(args.out, "labels.json"))
    _json_dump({
        "provenance": res.provenance,
        "nodes": [{"call_index": n.call_index, "func_id": n.func_id,
                   "labels": sorted(n.labels.labels)} for n in res.graph.nodes],
        "edges": [{"producer": p, "consumer": c, "via": hex(v)}
                  for p, c, v in res.graph.edges],
    }, os.path.join(args.out, "graph.json"))

    cdir = os.path.join(args.out, "constraints")
    os.makedirs(cdir, exist_ok=True)
    for ctx in res.contexts:
        lines = [symexec.render_constraint(rtc) for rtc in ctx.constraints]
        lines.append("")
        lines.append(f"input offsets:  {ctx.constraints[0].input_offsets()}")
        lines.append(f"weight offsets: {ctx.constraints[0].weight_offsets()}")
        with open(os.path.join(cdir, f"call_{ctx.call_index:04d}.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")

    _json_dump({"findings": [f.to_json() for f in res.findings],
                "warnings": res.warnings, "errors": res.errors},
               os.path.join(args.out, "findings.json"))

    if res.model is not None:
        model_core.save_spec(res.model, args.out)

    report = [f"# Decompilation report", "",
              f"- provenance: {res.provenance}",
              f"- operators: {len(res.contexts)}",
              f"- findings: {len(res.findings)} "
              f"({sum(1 for f in res.findings if f.fix_applied)} auto-fixed)",
              f"- errors: {len(res.errors)}", "",
              "| call | func | labels | dims | layout |", "|---|---|---|---|---|"]
    for ctx in res.contexts:
        report.append(
            f"| {ctx.call_index} | {ctx.func_id} | {'+'.join(ctx.rec.fused)} | "
            f"{ctx.rec.dims or '-'} | {ctx.rec.layout.kind} |")
    if res.findings:
        report += ["", "## Findings", ""]
        report += [f"- rule {f.rule_id}{'/' + f.subtype if f.subtype else ''} "
                   f"(call {f.call_index}): {f.description}"
                   f"{' [fixed]' if f.fix_applied else ' [needs review]'}"
                   for f in res.findings]
    if res.errors:
        report += ["", "## Errors", ""]
        report += [f"- {e['stage']} (call {e.get('call_index', '?')}): "
                   f"{e['error']}: {e['detail']}" for e in res.errors]
    with open(os.path.join(args.out, "report.md"), "w") as fh:
        fh.write("\n".join(report) + "\n")
    print(f"decompiled {args.bundle} -> {args.out} "
          f"(exit {res.exit_code}, {len(res.findings)} findings, "
          f"{len(res.errors)} errors)")
    return res.exit_code


def cmd_verify(args) -> int:
    src = model_core.load_spec(args.source)
    rec = model_core.load_spec(args.recovered)
    inputs = model_core.random_inputs(src, args.n, args.seed)
    rep = model_core.compare(src, rec, inputs, tol=args.tol)
    worst = max((r["max_abs_diff"] for r in rep.per_input), default=0.0)
    labels_ok = sum(1 for r in rep.per_input if r["labels_match"])
    print(f"inputs: {len(rep.per_input)}  labels match: {labels_ok}"
          f"  max |diff|: {worst:.3e}  tolerance: {args.tol:g}"
          f"  verdict: {rep.verdict}")
    return 0 if rep.verdict == "pass" else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dnnlift",
                                 description="DNN executable trace-bundle decompiler")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="synthesize a ground-truth trace bundle")
    g.add_argument("--model", required=True,
                   help=f"builtin name ({', '.join(sorted(zoo.MODELS))}) or saved model dir")
    g.add_argument("--style", required=True, choices=["tvm-o0", "tvm-o3", "glow"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--adversarial", action="store_true",
                   help="emit the non-monotone weight-load order on the last conv")
    g.add_argument("--inject-reshape-conv", action="store_true",
                   help="retile the last conv's input through a runtime reshape")
    g.add_argument("--tvm-ab", type=int, nargs=2, metavar=("A", "B"),
                   help="pin the 6-d blocking factors")
    g.add_argument("--save-source", metavar="DIR",
                   help="also save the source model spec for later verification")
    g.set_defaults(fn=cmd_gen)

    c = sub.add_parser("gen-corpus", help="labeled function corpus for train-id")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--samples", type=int, default=20)
    c.add_argument("--corpus-seeds", type=int, nargs="+", default=[2, 3])
    c.set_defaults(fn=cmd_gen_corpus)

    t = sub.add_parser("train-id", help="train the operator identifier")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=200)
    t.set_defaults(fn=cmd_train_id)

    cl = sub.add_parser("classify", help="label every function in a bundle")
    cl.add_argument("--model", required=True)
    cl.add_argument("--bundle", required=True)
    cl.add_argument("--out")
    cl.set_defaults(fn=cmd_classify)

    tp = sub.add_parser("topology", help="recover the computation graph")
    tp.add_argument("--model", required=True)
    tp.add_argument("--bundle", required=True)
    tp.add_argument("--out", required=True)
    tp.set_defaults(fn=cmd_topology)

    d = sub.add_parser("decompile", help="full pipeline: bundle -> model + report")
    d.add_argument("--bundle", required=True)
    d.add_argument("--model", required=True, help="classifier model file")
    d.add_argument("--out", required=True)
    d.add_argument("--taint", choices=["auto", "always", "never"], default="auto")
    d.add_argument("--tol", type=float, default=1e-4)
    d.add_argument("--workers", type=int,
                   default=int(os.environ.get("DNNLIFT_WORKERS", "4")))
    d.set_defaults(fn=cmd_decompile)

    v = sub.add_parser("verify", help="round-trip equivalence of two models")
    v.add_argument("--source", required=True)
    v.add_argument("--recovered", required=True)
    v.add_argument("-n", type=int, default=20)
    v.add_argument("--tol", type=float, default=1e-4)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DnnliftError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
