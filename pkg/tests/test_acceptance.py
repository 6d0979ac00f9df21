"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured numbers.  Tolerances are pinned here and
nowhere else."""
import hashlib
import pathlib

import numpy as np
import pytest

from dnnlift import cli, exprs, layouts, model, opid, pipeline, recover, \
    signatures, symexec, taint, zoo
from dnnlift.harness import EmitOptions, emit_bundle
from dnnlift.model import ModelSpec, OpNode, Tensor

STYLES = ("tvm-o0", "tvm-o3", "glow")
ROUND_TRIP_TOL = 1e-4
REPLAY_RTOL = 1e-6


def _report(name, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# -- 1. round-trip equivalence over >=5 models x 3 styles ------------------

def test_criterion_1_round_trip_equivalence(classifier, make_bundle):
    rows = []
    ok = True
    for name in zoo.ROUND_TRIP_MODELS:
        src = zoo.get_model(name)
        for style in STYLES:
            bundle, _ = make_bundle(name, style, seed=1)
            res = pipeline.decompile_bundle(bundle, classifier)
            if res.model is None:
                rows.append(f"{name}/{style}: NO MODEL {res.errors}")
                ok = False
                continue
            rep = model.compare(src, res.model,
                                model.random_inputs(src, 20, seed=3),
                                tol=ROUND_TRIP_TOL)
            worst = max(r["max_abs_diff"] for r in rep.per_input)
            rows.append(f"{name}/{style}: {rep.verdict} ({worst:.1e})")
            ok = ok and rep.verdict == "pass" and res.exit_code == 0
    _report("criterion 1 (round-trip, 5 models x 3 styles, tol 1e-4)",
            ok, "; ".join(rows))


# -- 2. the worked 3x3/2x2 convolution golden ------------------------------

def test_criterion_2_worked_conv_golden(make_bundle):
    bundle, truth = make_bundle("fig4", "tvm-o0", seed=1)
    fid = [f for f, ft in truth.funcs.items() if ft.family == "Conv"][0]
    cs = [c for c in bundle.callsites if c.func_id == fid][0]
    sig = signatures.lookup("tvm-o0", {"Conv"})
    regions = symexec.scope_regions(bundle.access_logs[fid], cs, sig)
    sink = symexec.find_sinks(bundle.traces[fid], regions["out"], 1)[0]
    sub = taint.taint_backward(bundle.traces[fid], {sink})
    rtc = symexec.tag_roles(
        symexec.simplify(symexec.sym_execute(sub, sink)), cs, sig,
        bundle.access_logs[fid], bundle.snapshot, sink)
    k, i_c, ih = recover.conv_kernel_and_ic(rtc)
    p = recover.conv_padding(ih, 1)  # against a 1x1 producer
    o_c, _, oh, s = recover.conv_oc_and_stride(
        k, i_c, 0, regions["weights"].size, regions["in"].size, regions["out"].size)
    muls = exprs.count_op(rtc.expr, "mul")
    offs = rtc.input_offsets()
    printed = symexec.render_constraint(rtc)
    ok = ((k, i_c, ih, p, o_c, s) == (2, 1, 3, 1, 1, 1) and muls == 4
          and offs == [0, 4, 12, 16] and printed.count("*") == 4)
    _report("criterion 2 (worked conv golden)", ok,
            f"K={k} I_C={i_c} IH={ih} P={p} O_C={o_c} S={s} muls={muls} "
            f"offsets={offs}")


# -- 3. blocked weight layouts ---------------------------------------------

def test_criterion_3_blocked_layouts(classifier, make_bundle):
    bundle, truth = make_bundle("conv6d", "tvm-o3", seed=1, tvm_ab=(32, 32))
    res = pipeline.decompile_bundle(bundle, classifier)
    conv = res.contexts[0]
    ok6 = (conv.rec.layout == layouts.LayoutDesc("tvm6d", 32, 32)
           and conv.rec.layout.blocked_shape(256, 128, 3) == [8, 4, 3, 3, 32, 32]
           and np.array_equal(conv.rec.params["weights"], truth.params["0:weights"]))
    bundle_g, truth_g = make_bundle("conv6d", "glow", seed=1)
    res_g = pipeline.decompile_bundle(bundle_g, classifier)
    conv_g = res_g.contexts[0]
    okg = (conv_g.rec.layout == layouts.LayoutDesc("glow5d", 8)
           and np.array_equal(conv_g.rec.params["weights"],
                              truth_g.params[f"{conv_g.func_id}:weights"]))
    _report("criterion 3 (blocked layouts)", ok6 and okg,
            f"6-d: {conv.rec.layout}, shape {conv.rec.layout.blocked_shape(256, 128, 3)}, "
            f"bit-exact={ok6}; 5-d: {conv_g.rec.layout}, bit-exact={okg}")


# -- 4. rule-1 repair of the retiled conv ----------------------------------

def test_criterion_4_rule1_repair(classifier):
    src = zoo.get_model("rule1_case")
    bundle, _ = emit_bundle(src, "tvm-o0", seed=7,
                            options=EmitOptions(inject_reshape_conv=True))
    res = pipeline.decompile_bundle(bundle, classifier)
    fix = [f for f in res.findings if f.rule_id == 1 and f.fix_applied]
    dims = fix[0].after if fix else {}
    repaired = (dims.get("O_C"), dims.get("I_C"), dims.get("K")) == (128, 64, 3)
    rep = None
    if res.model is not None:
        rep = model.compare(src, res.model, model.random_inputs(src, 20, seed=3),
                            tol=ROUND_TRIP_TOL)
    ok = (repaired and res.exit_code == 0 and rep is not None
          and rep.verdict == "pass")
    _report("criterion 4 (rule-1 repair to [128,64,3,3])", ok,
            f"repaired dims={dims}, exit={res.exit_code}, "
            f"round-trip={rep.verdict if rep else 'n/a'}")


# -- 5. taint soundness + reduction over randomized traces ------------------

def _random_conv_model(rng, idx):
    c = int(rng.choice([1, 2, 3]))
    ih = int(rng.integers(6, 12))
    k = int(rng.choice([1, 2, 3]))
    p = 1 if (k == 3 and rng.random() < 0.4) else 0
    o_c = int(rng.integers(1, 5))
    w = Tensor(rng.uniform(-0.5, 0.5, size=(o_c, c, k, k)))
    return ModelSpec(ops=[OpNode(op_id="c", kind="Conv", inputs=[("input",)],
                                 dims={"K": k, "S": 1, "P": p, "O_C": o_c, "I_C": c},
                                 params={"weights": "w"})],
                     input_shape=(1, c, ih, ih), params={"w": w},
                     name=f"rt_conv{idx}")


def _random_fc_model(rng, idx):
    m, n = int(rng.integers(8, 48)), int(rng.integers(2, 12))
    w = Tensor(rng.uniform(-0.5, 0.5, size=(m, n)))
    return ModelSpec(ops=[OpNode(op_id="d", kind="Dense", inputs=[("input",)],
                                 dims={"M": m, "N": n}, params={"weights": "w"})],
                     input_shape=(m,), params={"w": w}, name=f"rt_fc{idx}")


def test_criterion_5_taint_soundness_property():
    rng = np.random.default_rng(0)
    worst_ratio, worst_err, n = 0.0, 0.0, 100
    for i in range(n):
        spec = _random_conv_model(rng, i) if i % 2 == 0 else _random_fc_model(rng, i)
        style = STYLES[int(rng.integers(0, 3))]
        bundle, truth = emit_bundle(spec, style, seed=1000 + i)
        fid = [f for f, ft in truth.funcs.items()
               if ft.family in ("Conv", "Dense")][0]
        cs = [c for c in bundle.callsites if c.func_id == fid][0]
        sig = signatures.lookup(style, truth.funcs[fid].labels)
        regions = symexec.scope_regions(bundle.access_logs[fid], cs, sig)
        sink = symexec.find_sinks(bundle.traces[fid], regions["out"], 1)[0]
        sub = taint.taint_backward(bundle.traces[fid], {sink})
        worst_ratio = max(worst_ratio, sub.reduction)
        e_sub = symexec.sym_execute(sub, sink)
        e_full = symexec.sym_execute(bundle.traces[fid], sink)
        read = lambda a: float(np.frombuffer(bundle.snapshot.read(a, 4),
                                             dtype="<f4")[0])
        va, vb = exprs.evaluate(e_sub, read), exprs.evaluate(e_full, read)
        err = abs(va - vb) / max(1.0, abs(vb))
        worst_err = max(worst_err, err)
    ok = worst_ratio <= 0.5 and worst_err <= REPLAY_RTOL
    _report("criterion 5 (taint soundness over 100 random Conv/FC traces)", ok,
            f"max |subtrace|/|trace| = {worst_ratio:.3f}, "
            f"max replay rel err = {worst_err:.2e}")


# -- 6. classifier accuracy on a >=500-function corpus ----------------------

def test_criterion_6_classifier_accuracy(corpus, split_corpus, classifier,
                                         make_bundle):
    train, test = split_corpus
    assert len(corpus) >= 500
    hits = sum(opid.classify(classifier, e.function).labels == set(e.labels)
               for e in test)
    acc = hits / len(test)
    prov_hits, prov_total = 0, 0
    for name in zoo.ROUND_TRIP_MODELS:
        for style in STYLES:
            bundle, _ = make_bundle(name, style, seed=1)
            prov_hits += opid.predict_provenance(classifier, bundle) == style
            prov_total += 1
    ok = acc >= 0.95 and prov_hits == prov_total
    _report("criterion 6 (classifier)", ok,
            f"corpus={len(corpus)} fns, 70/30 split, exact-match={acc:.4f} "
            f"(need >=0.95), provenance={prov_hits}/{prov_total}")


# -- 7. cross-style invariance ----------------------------------------------

def _semantic_key(ctx, cell, truth_dims):
    """Map a constraint cell to style-independent coordinates."""
    regions = ctx.regions
    addr = cell.addr
    for key in ("in", "in1", "in2"):
        if key in regions and regions[key].contains(addr):
            dims = ctx.rec.dims
            ihb = (regions[key].size // 4 // dims["I_C"]) ** 0.5
            ihb = int(round(ihb))
            off = (addr - regions[key].base) // 4
            c, rem = divmod(off, ihb * ihb)
            y, x = divmod(rem, ihb)
            return ("in", c, y, x)  # window-relative below
    if "weights" in regions and regions["weights"].contains(addr):
        dims = ctx.rec.dims
        o_c, i_c, k = dims["O_C"], dims["I_C"], dims["K"]
        off = (addr - regions["weights"].base) // 4
        desc = ctx.rec.layout
        flat = np.arange(o_c * i_c * k * k)
        # invert: find canonical index whose blocked position is `off`
        # (cheap at these sizes)
        for ko in range(o_c):
            pass
        return ("w", off)
    return ("other", addr)


def _normalized_eval(ctx, compose_chain, rng_env):
    """Evaluate a conv constraint (optionally composed with following
    BiasAdd/ReLU constraints) over style-independent cell coordinates."""
    expr = ctx.constraints[0].expr
    for nxt in compose_chain:
        link = nxt.constraints[0].input_cells[0]
        expr = exprs.substitute(nxt.constraints[0].expr, {link.addr: expr})
    dims = ctx.rec.dims
    regions = ctx.regions
    in_region = next(regions[k] for k in ("in", "in1", "in2") if k in regions)
    ihb = int(round((in_region.size / 4 / dims["I_C"]) ** 0.5))
    desc = ctx.rec.layout
    o_c, i_c, k = dims["O_C"], dims["I_C"], dims["K"]
    inv = {}
    for ko in range(1):          # sink is always output channel 0
        for ci in range(i_c):
            for ky in range(k):
                for kx in range(k):
                    idx = layouts.weight_element_index(desc, o_c, i_c, k,
                                                       0, ci, ky, kx)
                    inv[idx] = (ci, ky, kx)
    cells = exprs.cells_in_order(expr)
    in_cells = [c for c in cells if in_region.contains(c.addr)]
    coords = {}
    for c in in_cells:
        off = (c.addr - in_region.base) // 4
        ch, rem = divmod(off, ihb * ihb)
        y, x = divmod(rem, ihb)
        coords[c.addr] = (ch, y, x)
    y0 = min(v[1] for v in coords.values())
    x0 = min(v[2] for v in coords.values())

    def read(addr):
        if addr in coords:
            ch, y, x = coords[addr]
            return rng_env(("in", ch, y - y0, x - x0))
        if "weights" in regions and regions["weights"].contains(addr):
            off = (addr - regions["weights"].base) // 4
            return rng_env(("w",) + inv[off])
        # biases and anything else: concrete snapshot value
        return rng_env(("addr-fallback", addr))

    if isinstance(expr, exprs.App) and expr.op == "max" and \
            expr.args[1] == exprs.Const(0.0):
        expr = expr.args[0]
    return exprs.evaluate(expr, read)


def test_criterion_7_cross_style_invariance(classifier, make_bundle):
    details = []
    ok = True
    for name in ("cnn_small", "cnn_lrn", "cnn_wide", "text_fc"):
        per_style = {}
        for style in STYLES:
            bundle, truth = make_bundle(name, style, seed=1)
            res = pipeline.decompile_bundle(bundle, classifier)
            per_style[style] = (res, bundle, truth)
        # dimension invariance for every shared family, in chain order
        for fam in ("Conv", "Dense", "MaxPool", "AvgPool", "LRN", "Softmax",
                    "Embedding"):
            seqs = {}
            for style, (res, _, _) in per_style.items():
                seqs[style] = [c.rec.dims for c in res.contexts
                               if c.rec.family == fam]
            base = seqs["tvm-o0"]
            for style in ("tvm-o3", "glow"):
                if seqs[style] != base:
                    ok = False
                    details.append(f"{name}/{fam}: {seqs}")
        # constraint semantic equality for each conv (composed across the
        # tvm-o0 op chain to cover fused bias/relu)
        convs = {s: [c for c in per_style[s][0].contexts
                     if c.rec.family == "Conv"] for s in STYLES}
        by_call = {s: {c.call_index: c for c in per_style[s][0].contexts}
                   for s in STYLES}
        for i in range(len(convs["tvm-o0"])):
            fused = convs["tvm-o3"][i].rec.fused
            chain = []
            cur = convs["tvm-o0"][i]
            nxt_calls = sorted(c.call_index for c in per_style["tvm-o0"][0].contexts
                               if c.call_index > cur.call_index)
            want = [x for x in ("BiasAdd", "ReLU") if x in fused]
            for call in nxt_calls:
                if not want:
                    break
                cand = by_call["tvm-o0"][call]
                if cand.rec.family == want[0]:
                    chain.append(cand)
                    want = want[1:]
                else:
                    break
            env = {}
            rng = np.random.default_rng(77 + i)

            def rng_env(key):
                if key not in env:
                    env[key] = float(rng.uniform(0.25, 1.25))
                return env[key]

            vals = {}
            for style in STYLES:
                ctx = convs[style][i]
                vals[style] = _normalized_eval(
                    ctx, chain if style == "tvm-o0" else [], rng_env)
            ref = vals["tvm-o0"]
            for style in ("tvm-o3", "glow"):
                if abs(vals[style] - ref) > 1e-9 * max(1.0, abs(ref)):
                    ok = False
                    details.append(f"{name}/conv{i}: {vals}")
    _report("criterion 7 (cross-style invariance)", ok,
            "; ".join(details) if details else
            "dims identical and conv constraints semantically equal across styles")


# -- 8. adversarial layout must fail loudly ---------------------------------

def test_criterion_8_adversarial_layout(classifier):
    bundle, truth = emit_bundle(zoo.get_model("conv6d"), "tvm-o3", seed=3,
                                options=EmitOptions(adversarial_layout=True,
                                                    tvm_ab=(32, 32)))
    res = pipeline.decompile_bundle(bundle, classifier)
    has_layout_err = any(e["error"] == "LayoutUnrecognized" for e in res.errors)
    no_tensor = all("weights" not in c.rec.params for c in res.contexts
                    if c.rec.family == "Conv")
    ok = res.exit_code == 2 and has_layout_err and no_tensor and res.model is None
    _report("criterion 8 (adversarial layout fails loudly)", ok,
            f"exit={res.exit_code}, LayoutUnrecognized={has_layout_err}, "
            f"no silent tensor={no_tensor}")


# -- 9. determinism of every command ----------------------------------------

def _tree_digest(path):
    return [(str(f.relative_to(path)), hashlib.sha256(f.read_bytes()).hexdigest())
            for f in sorted(pathlib.Path(path).rglob("*")) if f.is_file()]


def test_criterion_9_byte_determinism(classifier, tmp_path):
    mdl = tmp_path / "id.bin"
    opid.save_classifier(classifier, str(mdl))
    opid.save_classifier(classifier, str(tmp_path / "id2.bin"))
    ok = mdl.read_bytes() == (tmp_path / "id2.bin").read_bytes()
    pairs = []
    for i, run in enumerate(("r1", "r2")):
        d = tmp_path / run
        cli.main(["gen", "--model", "bn_model", "--style", "glow", "--seed", "6",
                  "--out", str(d / "bundle")])
        cli.main(["classify", "--model", str(mdl), "--bundle", str(d / "bundle"),
                  "--out", str(d / "labels.json")])
        cli.main(["topology", "--model", str(mdl), "--bundle", str(d / "bundle"),
                  "--out", str(d / "graph.json")])
        cli.main(["decompile", "--bundle", str(d / "bundle"), "--model", str(mdl),
                  "--out", str(d / "dec")])
        pairs.append(_tree_digest(d))
    ok = ok and pairs[0] == pairs[1]
    _report("criterion 9 (byte-identical reruns)", ok,
            f"{len(pairs[0])} artifact files compared")
