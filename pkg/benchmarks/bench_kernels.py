"""Compiled vs numpy kernels, reference vs fast paths.

    python3 benchmarks/bench_kernels.py [--reps 300] [--csv out.csv]

Times each quantized layer of every model family, whole-model inference and the
integer decision-tree walk under every importable backend.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from tinydrive import kernels
from tinydrive.harness import bench_latency, machine_descriptor
from tinydrive.nncore import init_model, model_spec
from tinydrive.predictor import DecisionTree, dt_fit, integerize_tree
from tinydrive.quant import calibrate, infer_with, quantize, quantize_input

MODELS = ("vnn1", "vnn2", "vnn3", "vnn4", "lenet5")


def random_qmodel(name: str, seed: int = 0):
    rng = np.random.default_rng(seed)
    model = init_model(model_spec(name), rng)
    calib = rng.integers(0, 256, size=(128, 128), dtype=np.uint8)
    return quantize(model, calibrate(model, calib)), calib[0]


def layer_cases(qm, img):
    """(label, layer, input) per weighted layer, fed with the real activations."""
    x = quantize_input(img)[None, :]
    cases = []
    for i, l in enumerate(qm.layers):
        xin = np.ascontiguousarray(x)
        if l.kind == "conv":
            cases.append((f"{qm.spec.name}.L{i}.conv", l, xin))
            x = kernels.conv1d_fast(xin, l.w, l.b, l.stride, l.shift, l.relu)
        elif l.kind == "pool":
            x = kernels.maxpool1d(xin, l.kernel, l.stride)
        else:
            flat = np.ascontiguousarray(xin.reshape(-1))
            cases.append((f"{qm.spec.name}.L{i}.fc", l, flat))
            x = kernels.fc_fast(flat, l.w, l.b, l.shift, l.relu)
            if l.shift < 0:
                break
            x = x.reshape(1, -1)
    return cases


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=300)
    ap.add_argument("--models", default=",".join(MODELS))
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    backends = kernels.backends()
    print(f"machine: {machine_descriptor()}")
    print(f"backends: {sorted(backends)}")
    rows = []

    def record(case, backend, path, fn):
        st = bench_latency(fn, reps=args.reps)
        rows.append((case, backend, path, st.median_us, st.p95_us))
        print(f"{case:<22} {backend:<9} {path:<5} median {st.median_us:10.2f} us   p95 {st.p95_us:10.2f} us")

    for name in args.models.split(","):
        qm, img = random_qmodel(name)
        for label, l, xin in layer_cases(qm, img):
            for bname, be in backends.items():
                for path in ("ref", "fast"):
                    if l.kind == "conv":
                        f = getattr(be, f"conv1d_{path}")
                        record(label, bname, path, lambda f=f: f(xin, l.w, l.b, l.stride, l.shift, l.relu))
                    else:
                        f = getattr(be, f"fc_{path}")
                        record(label, bname, path, lambda f=f: f(xin, l.w, l.b, l.shift, l.relu))
        for bname, be in backends.items():
            for fast in (False, True):
                record(f"{qm.spec.name}.model", bname, "fast" if fast else "ref",
                       lambda be=be, fast=fast: infer_with(be, qm, img, fast))

    rng = np.random.default_rng(1)
    x = rng.integers(0, 256, size=(2000, 128), dtype=np.uint8)
    y = (x[:, 10].astype(int) + x[:, 90] > 255).astype(int) + (x[:, 64] > 128)
    tree: DecisionTree = dt_fit(x, y, max_depth=10)
    it = integerize_tree(tree)
    probe = np.ascontiguousarray(x[0])
    for bname, be in backends.items():
        walker = be.TreeWalker(it.feature, it.threshold, it.left, it.right, it.value)
        record(f"dt.depth{tree.depth()}", bname, "walk", lambda w=walker: w.predict(probe))

    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["#schema=tinydrive.kernel_bench.v1"])
            w.writerow(["case", "backend", "path", "median_us", "p95_us"])
            w.writerows([c, b, p, f"{m:.3f}", f"{q:.3f}"] for c, b, p, m, q in rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
