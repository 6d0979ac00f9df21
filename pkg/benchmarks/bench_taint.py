"""Benchmark the compiled taint kernel against the pure-Python twin.

Builds progressively larger convolution traces with the codegen harness,
flattens them once, and times only the propagation loop.  Both kernels run
on identical inputs and must produce identical kept-sets.

Usage: python benchmarks/bench_taint.py [--repeat 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from dnnlift import taint, zoo
from dnnlift._taint_py import propagate_py
from dnnlift.harness import emit_bundle
from dnnlift.model import ModelSpec, OpNode, Tensor
from dnnlift.symexec import find_sinks, scope_regions
from dnnlift import signatures

try:
    from dnnlift._taintcore import propagate_native
except ImportError:
    propagate_native = None


def conv_model(name, c, h, o_c, k):
    rng = np.random.default_rng(1)
    w = Tensor(rng.uniform(-0.5, 0.5, size=(o_c, c, k, k)))
    return ModelSpec(
        ops=[OpNode(op_id="c1", kind="Conv", inputs=[("input",)],
                    dims={"K": k, "S": 1, "P": 0, "O_C": o_c, "I_C": c},
                    params={"weights": "w"})],
        input_shape=(1, c, h, h), params={"w": w}, name=name)


def bench(fn, csr, sinks, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = taint._run_kernel(csr, sinks, kernel=None) if fn is None else None
        if fn is not None:
            sink_key = np.asarray([a for a, _ in sinks], dtype=np.int64)
            sink_len = np.asarray([w for _, w in sinks], dtype=np.int32)
            out = fn(*csr, sink_key, sink_len)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    cases = [
        ("conv 8x16x16 k3", conv_model("b1", 8, 16, 8, 3), "tvm-o0"),
        ("conv 16x24x24 k3", conv_model("b2", 16, 24, 16, 3), "tvm-o0"),
        ("conv 32x28x28 k3 (avx)", conv_model("b3", 32, 28, 32, 3), "tvm-o3"),
    ]
    print(f"{'case':28s} {'entries':>9s} {'python':>10s} {'native':>10s} "
          f"{'speedup':>8s}  kept")
    for label, spec, style in cases:
        bundle, _ = emit_bundle(spec, style, seed=1)
        trace = bundle.traces[0]
        cs = bundle.callsites[1]
        sig = signatures.lookup(style, {"Conv"})
        regions = scope_regions(bundle.access_logs[0], cs, sig)
        sinks = find_sinks(trace, regions["out"], 1)
        csr = taint.build_lane_csr(trace)
        t_py, kept_py = bench(propagate_py, csr, sinks, args.repeat)
        row = f"{label:28s} {len(trace):9d} {t_py * 1e3:9.1f}ms"
        if propagate_native is not None:
            t_nat, kept_nat = bench(propagate_native, csr, sinks, args.repeat)
            assert np.array_equal(kept_py, kept_nat), "kernel outputs differ"
            row += f" {t_nat * 1e3:9.1f}ms {t_py / t_nat:7.1f}x"
        else:
            row += f" {'absent':>10s} {'-':>8s}"
        row += f"  {int(kept_py.sum())}/{len(trace)}"
        print(row)
    if propagate_native is None:
        print("\nnative kernel not built; pip install -e . --no-build-isolation")


if __name__ == "__main__":
    main()
