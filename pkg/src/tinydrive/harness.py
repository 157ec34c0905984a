"""Benchmarks, energy proxy, Pareto fronts and the ``tinydrive`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, kernels

log = logging.getLogger("tinydrive")

BENCH_CSV_SCHEMA = "tinydrive.bench.v1"
BENCH_CSV_COLUMNS = ("model", "accuracy", "latency_ms", "latency_p95_ms", "energy_uj", "macs", "platform",
                     "energy_kind")
EVAL_CSV_SCHEMA = "tinydrive.eval.v1"
EVAL_CSV_COLUMNS = ("model", "data", "kind", "kernel", "accuracy", "n")
ENERGY_KIND = "model-based estimate"


class ValidationError(ValueError):
    """Bad user input; the CLI maps it to exit code 2."""


# --------------------------------------------------------------------------- latency

def machine_descriptor() -> dict:
    return {"machine": platform.machine(), "processor": platform.processor() or platform.machine(),
            "system": platform.system(), "python": platform.python_version(),
            "cpus": os.cpu_count(), "kernels": kernels.BACKEND}


@dataclass(frozen=True)
class LatencyStats:
    median_us: float
    p95_us: float
    mean_us: float
    reps: int
    inner: int  # calls per timed sample
    warmup: int
    machine: dict = field(default_factory=dict)

    @property
    def median_ms(self) -> float:
        return self.median_us / 1000.0


def bench_latency(fn: Callable[[], object], reps: int = 1000, warmup: int = 50, inner: int | None = None,
                  min_sample_us: float = 20.0) -> LatencyStats:
    """Per-call wall latency over ``reps`` samples after ``warmup`` untimed calls.

    Very short calls are timed in groups of ``inner`` so the clock read does
    not dominate; ``inner=None`` picks the group size automatically.
    """
    if reps < 100:
        raise ValidationError("at least 100 repetitions are required")
    if warmup < 50:
        raise ValidationError("at least 50 warm-up calls are required")
    for _ in range(warmup):
        fn()
    if inner is None:
        t0 = time.perf_counter_ns()
        for _ in range(10):
            fn()
        per = max((time.perf_counter_ns() - t0) / 10.0, 1.0)
        inner = max(1, int(min_sample_us * 1000.0 / per))
    samples = np.empty(reps)
    clock = time.perf_counter_ns
    for r in range(reps):
        t0 = clock()
        for _ in range(inner):
            fn()
        samples[r] = (clock() - t0) / inner / 1000.0
    return LatencyStats(float(np.median(samples)), float(np.percentile(samples, 95)), float(samples.mean()),
                        reps, inner, warmup, machine_descriptor())


# --------------------------------------------------------------------------- energy

@dataclass(frozen=True)
class PlatformProfile:
    """Affine energy model ``e = a * MACs + b`` (a in nJ/MAC, b in uJ)."""

    name: str
    a_nj_per_mac: float
    b_uj: float
    latency_budget_ms: float = 1.0

    def __post_init__(self):
        if self.a_nj_per_mac < 0 or self.b_uj < 0:
            raise ValidationError("energy coefficients must be non-negative")


def fit_profile(name: str, points: Sequence[tuple[float, float]], budget_ms: float = 1.0) -> PlatformProfile:
    """Solve the affine model through two (MACs, uJ) points."""
    (m1, e1), (m2, e2) = points
    if m1 == m2:
        raise ValidationError("calibration points need distinct MAC counts")
    a_uj = (e1 - e2) / (m1 - m2)
    return PlatformProfile(name, a_uj * 1000.0, e1 - a_uj * m1, budget_ms)


# published reference points: 163.41 KMAC -> 18.9 uJ, 5.82 KMAC -> 3.9 uJ
GAP8_LIKE = fit_profile("gap8-like", [(163_410, 18.9), (5_820, 3.9)])
PROFILES = {GAP8_LIKE.name: GAP8_LIKE}


def energy_proxy(spec_or_macs, profile: PlatformProfile = GAP8_LIKE) -> float:
    """Model-based per-inference energy estimate in uJ."""
    if isinstance(spec_or_macs, (int, np.integer)):
        macs = int(spec_or_macs)
    else:
        from .nncore import mac_count
        macs = mac_count(spec_or_macs)
    return profile.a_nj_per_mac * macs / 1000.0 + profile.b_uj


def cascade_energy(frac_small: float, small_spec, large_spec, profile: PlatformProfile = GAP8_LIKE,
                   router_macs: int = 0) -> float:
    """Expected energy when a fraction ``frac_small`` of inputs runs only the small model."""
    if not 0.0 <= frac_small <= 1.0:
        raise ValueError(f"frac_small must lie in [0, 1], got {frac_small}")
    router = profile.a_nj_per_mac * router_macs / 1000.0
    return (frac_small * energy_proxy(small_spec, profile)
            + (1.0 - frac_small) * energy_proxy(large_spec, profile) + router)


# --------------------------------------------------------------------------- results + Pareto

@dataclass(frozen=True)
class BenchResult:
    model: str
    accuracy: float
    latency_ms: float
    latency_p95_ms: float = 0.0
    macs: int = 0
    energy_uj: float = 0.0
    platform: str = GAP8_LIKE.name
    reps: int = 0
    accuracies: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.latency_p95_ms and self.latency_p95_ms < self.latency_ms:
            raise ValidationError("p95 latency below the median")


def dominates(a: BenchResult, b: BenchResult) -> bool:
    return (a.accuracy >= b.accuracy and a.latency_ms <= b.latency_ms
            and (a.accuracy > b.accuracy or a.latency_ms < b.latency_ms))


def pareto(results: Sequence[BenchResult]) -> list[BenchResult]:
    """Non-dominated set (max accuracy, min latency), ordered by latency then accuracy then name."""
    pts = sorted(results, key=lambda r: (r.latency_ms, -r.accuracy, r.model))
    front: list[BenchResult] = []
    best_acc = -np.inf
    i = 0
    while i < len(pts):
        # group identical latencies: only the most accurate of the group can survive
        j = i
        while j < len(pts) and pts[j].latency_ms == pts[i].latency_ms:
            j += 1
        group = pts[i:j]
        top = group[0].accuracy
        if top > best_acc:
            front += [r for r in group if r.accuracy == top]
            best_acc = top
        i = j
    return front


def write_csv(path: Path, schema: str, columns: Sequence[str], rows: Sequence[Sequence], append: bool = False) -> None:
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow([f"#schema={schema}"])
            w.writerow(columns)
        w.writerows(rows)


def read_csv(path: Path, schema: str) -> list[dict]:
    with open(path, newline="") as f:
        lines = list(csv.reader(f))
    if not lines or lines[0] != [f"#schema={schema}"]:
        raise ValidationError(f"{path}: expected schema row '#schema={schema}'")
    if len(lines) < 2:
        raise ValidationError(f"{path}: missing column header")
    cols = lines[1]
    return [dict(zip(cols, row)) for row in lines[2:]]


def bench_rows(results: Sequence[BenchResult]) -> list[list]:
    return [[r.model, f"{r.accuracy:.6f}", f"{r.latency_ms:.6f}", f"{r.latency_p95_ms:.6f}",
             f"{r.energy_uj:.4f}", r.macs, r.platform, ENERGY_KIND] for r in results]


def results_from_rows(rows: Sequence[dict]) -> list[BenchResult]:
    out = []
    for r in rows:
        try:
            out.append(BenchResult(r["model"], float(r["accuracy"]), float(r["latency_ms"]),
                                   float(r.get("latency_p95_ms") or 0.0), int(r.get("macs") or 0),
                                   float(r.get("energy_uj") or 0.0), r.get("platform", "")))
        except (KeyError, ValueError) as e:
            raise ValidationError(f"bad bench row {r}: {e}") from e
    return out


# --------------------------------------------------------------------------- config + seeds

def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file {path} not found")
    text = p.read_text()
    if p.suffix.lower() == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: {e}") from e
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"{path}: {e}") from e


def resolve_seed(cli_seed: int | None, config: dict) -> int:
    """``--seed`` beats ``TINYDRIVE_SEED``, which beats the config file; default 0."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("TINYDRIVE_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as e:
            raise ValidationError(f"TINYDRIVE_SEED must be an integer, got {env!r}") from e
    return int(config.get("seed", 0))


# --------------------------------------------------------------------------- CLI

LIGHTS = {"track": "TRACK", "clear": "CLEAR", "altered": "ALTERED"}
DSET_TAGS = {"2.0": "d20", "1.5": "d15", "1.0": "d10"}


def _light(name: str):
    from . import simenv
    if name not in LIGHTS:
        raise ValidationError(f"unknown lighting {name!r}; choose from {sorted(LIGHTS)}")
    return getattr(simenv, LIGHTS[name])


def _load_data(path: str):
    from .simenv import load_dataset
    if not Path(path).exists():
        raise ValidationError(f"dataset {path} not found")
    return load_dataset(path)


def _load_any_model(path: str):
    from .nncore import load_model
    from .quant import load_qmodel
    if not Path(path).exists():
        raise ValidationError(f"model {path} not found")
    head = Path(path).read_bytes()[:4]
    if head == b"VNNF":
        return "float", load_model(path)
    if head == b"VNNQ":
        return "quant", load_qmodel(path)
    raise ValidationError(f"{path}: not a .vnnf or .vnnq model")


def _train_config(args, cfg: dict, seed: int):
    from .nncore import Augmentation, TrainConfig
    t = dict(cfg.get("train", {}))
    epochs = args.epochs if getattr(args, "epochs", None) is not None else int(t.get("epochs", 200))
    aug = Augmentation(**t["augment"]) if isinstance(t.get("augment"), dict) else Augmentation()
    try:
        return TrainConfig(epochs=epochs, batch=int(t.get("batch", 32)),
                           lr=float(getattr(args, "lr", None) or t.get("lr", 0.05)),
                           momentum=float(t.get("momentum", 0.9)),
                           augment=None if t.get("augment") is False else aug, seed=seed)
    except ValueError as e:
        raise ValidationError(str(e)) from e


def cmd_gen_data(args, cfg, seed, out: Path) -> int:
    from .simenv import (CameraConfig, DatasetSpec, generate_dataset, sample_test_comb, save_dataset,
                         standard_dsets)
    d = dict(cfg.get("data", {}))
    per_train = args.per_class or int(d.get("per_class_train", 1000))
    per_test = args.per_class_test or int(d.get("per_class_test", max(1, round(per_train * 0.3))))
    noise = float(d.get("noise_sigma", 2.0)) if args.noise is None else args.noise
    light = _light(args.light or d.get("light", "track"))
    if per_train <= 0 or per_test <= 0:
        raise ValidationError("per-class counts must be positive")
    if args.dset == "comb":
        dsets = standard_dsets(per_train, per_test, seed, light, noise)
        tr, te = sample_test_comb([dsets[a][1] for a in (2.0, 1.5, 1.0)], args.n_train, args.n_test, seed)
        for ds, name in ((tr, "testcomb-train"), (te, "testcomb-test")):
            save_dataset(ds, out / f"{name}.vnnd")
            print(f"wrote {out / (name + '.vnnd')} ({len(ds)} samples, origins {ds.origin_counts()})")
        return 0
    if args.dset not in DSET_TAGS:
        raise ValidationError(f"--dset must be one of {sorted(DSET_TAGS)} or 'comb'")
    acq = float(args.dset)
    k = (2.0, 1.5, 1.0).index(acq)
    spec = DatasetSpec(per_class_train=per_train, per_class_test=per_test,
                       cam=CameraConfig(acquisition_ms=acq, noise_sigma=noise), light=light, seed=seed * 10 + k)
    tr, te = generate_dataset(spec)
    tag = DSET_TAGS[args.dset]
    for ds, split in ((tr, "train"), (te, "test")):
        path = out / f"{tag}-{split}.vnnd"
        save_dataset(ds, path)
        print(f"wrote {path} ({len(ds)} samples)")
    return 0


def cmd_train(args, cfg, seed, out: Path) -> int:
    from .nncore import evaluate, model_spec, save_model, train
    data = _load_data(args.data)
    val = _load_data(args.val) if args.val else None
    try:
        spec = model_spec(args.spec)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    tc = _train_config(args, cfg, seed)
    model, hist = train(spec, data, val, tc, val_every=max(1, tc.epochs // 20) if val else 1)
    path = Path(args.output) if args.output else out / f"{args.spec.lower()}.vnnf"
    save_model(model, path)
    rows = [[i + 1, f"{l:.6f}"] for i, l in enumerate(hist.loss)]
    write_csv(path.with_suffix(".history.csv"), "tinydrive.train_history.v1", ("epoch", "loss"), rows)
    msg = f"wrote {path} (final loss {hist.loss[-1]:.4f})" if hist.loss else f"wrote {path} (untrained)"
    if val is not None:
        msg += f", val accuracy {evaluate(model, val)[0]:.4f}"
    print(msg)
    return 0


def cmd_quantize(args, cfg, seed, out: Path) -> int:
    from .nncore import load_model
    from .quant import calibrate, quantize, save_qmodel
    if not Path(args.model).exists():
        raise ValidationError(f"model {args.model} not found")
    model = load_model(args.model)
    calib = _load_data(args.calib)
    if len(calib) < 100:
        raise ValidationError("calibration needs at least 100 samples")
    qm = quantize(model, calibrate(model, calib))
    path = Path(args.output) if args.output else out / (Path(args.model).stem + ".vnnq")
    save_qmodel(qm, path)
    print(f"wrote {path} (shifts {[l.shift for l in qm.layers if l.kind != 'pool']})")
    return 0


def cmd_eval(args, cfg, seed, out: Path) -> int:
    from .nncore import evaluate
    from .quant import evaluate_q
    kind, model = _load_any_model(args.model)
    data = _load_data(args.data)
    if kind == "float":
        acc = evaluate(model, data)[0]
    else:
        acc = evaluate_q(model, data, fast=args.kernel == "fast")
    print(f"accuracy={acc:.4f} model={args.model} data={args.data} kind={kind} n={len(data)}")
    write_csv(out / "eval.csv", EVAL_CSV_SCHEMA, EVAL_CSV_COLUMNS,
              [[args.model, args.data, kind, args.kernel if kind == "quant" else "float", f"{acc:.6f}", len(data)]],
              append=True)
    return 0


def cmd_predict_runtime(args, cfg, seed, out: Path) -> int:
    from .predictor import BinaryChain, WeightSetRegistry, chain_fit, selection_accuracy, swap_predict
    from .quant import load_qmodel
    if args.fit:
        data = _load_data(args.fit)
        params = {}
        if args.max_depth is not None:
            params["max_depth"] = args.max_depth if args.max_depth > 0 else None
        try:
            chain = chain_fit(data, args.clf, args.features, integer=not args.float, seed=seed, **params)
        except ValueError as e:
            raise ValidationError(str(e)) from e
        path = Path(args.chain) if args.chain else out / "chain.json"
        path.write_text(json.dumps(chain.to_dict(), sort_keys=True) + "\n")
        print(f"wrote {path}")
        if not args.data:
            return 0
    if not args.chain and not args.fit:
        raise ValidationError("give --chain (a fitted chain) or --fit DATA")
    chain_path = Path(args.chain) if args.chain else out / "chain.json"
    if not chain_path.exists():
        raise ValidationError(f"chain file {chain_path} not found")
    chain = BinaryChain.from_dict(json.loads(chain_path.read_text()))
    if not args.data:
        raise ValidationError("--data is required for inference")
    data = _load_data(args.data)
    print(f"selection accuracy={selection_accuracy(chain, data):.4f}")
    if args.registry:
        paths = args.registry.split(",")
        ids = args.ids.split(",") if args.ids else ["W2.0", "W1.5", "W1.0"][:len(paths)]
        if len(ids) != len(paths):
            raise ValidationError("--ids and --registry lengths differ")
        for p in paths:
            if not Path(p).exists():
                raise ValidationError(f"model {p} not found")
        try:
            reg = WeightSetRegistry({i: load_qmodel(p) for i, p in zip(ids, paths)})
            wids, cls = swap_predict(chain, reg, data.pixels)
        except ValueError as e:
            raise ValidationError(str(e)) from e
        hist = {w: int(np.sum(wids == w)) for w in ids}
        print(f"selection histogram={json.dumps(hist)}")
        print(f"swap accuracy={float(np.mean(cls == data.labels)):.4f}")
    return 0


def cmd_closed_loop(args, cfg, seed, out: Path) -> int:
    from .loop import protocol_config, reports_csv, reports_json, start, run_phase
    from .simenv import save_dataset, standard_dsets
    d = dict(cfg.get("data", {}))
    per_train = args.per_class or int(d.get("per_class_train", 300))
    per_test = args.per_class_test or int(d.get("per_class_test", 100))
    epochs = args.epochs if args.epochs is not None else int(cfg.get("loop", {}).get("epochs", 200))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [seed]
    proto = args.protocol.upper()
    if proto not in ("A", "B"):
        raise ValidationError("--protocol must be A or B")
    csv_parts = []
    for s in seeds:
        dsets = standard_dsets(per_train, per_test, seed=s)
        lc = protocol_config(proto, dsets, args.spec, seed=s, epochs=epochs,
                             frame_budget=args.frame_budget)
        st = start(lc)
        for i, (target, light, name) in enumerate(zip(lc.phase_targets, lc.lights, lc.names())):
            ds, _, _, rep = run_phase(st, target, light, name)
            save_dataset(ds, out / f"loop-{proto}-s{s}-phase{i + 1}.vnnd")
            print(f"[{proto} seed {s}] {name}: +{rep.collected} samples, "
                  + ", ".join(f"{k} {v['float']:.3f}/{v['quant']:.3f}" for k, v in rep.accuracy.items()))
        csv_parts.append(reports_csv(st.reports, proto, s, header=not csv_parts))
        (out / f"loop-{proto}-s{s}.json").write_text(reports_json(st.reports, proto, s) + "\n")
    (out / f"loop-{proto}.csv").write_text("".join(csv_parts))
    print(f"wrote {out / f'loop-{proto}.csv'}")
    return 0


def cmd_cascade(args, cfg, seed, out: Path) -> int:
    from .predictor import cascade_fit, cascade_predict
    from .quant import evaluate_q, load_qmodel
    for p in (args.small, args.large):
        if not Path(p).exists():
            raise ValidationError(f"model {p} not found")
    small, large = load_qmodel(args.small), load_qmodel(args.large)
    fit = _load_data(args.fit)
    data = _load_data(args.data) if args.data else fit
    router = cascade_fit(fit, small, large, args.clf, args.features, integer=not args.float, seed=seed)
    cls, used_small = cascade_predict(router, small, large, data.pixels)
    frac = float(used_small.mean())
    profile = PROFILES[args.platform]
    e_small, e_large = energy_proxy(small.spec, profile), energy_proxy(large.spec, profile)
    e = cascade_energy(frac, small.spec, large.spec, profile)
    (out / "router.json").write_text(json.dumps(router.to_dict(), sort_keys=True) + "\n")
    print(f"small={small.spec.name} acc={evaluate_q(small, data):.4f} energy={e_small:.3f}uJ")
    print(f"large={large.spec.name} acc={evaluate_q(large, data):.4f} energy={e_large:.3f}uJ")
    print(f"cascade acc={float(np.mean(cls == data.labels)):.4f} small_fraction={frac:.3f} "
          f"energy={e:.3f}uJ ({ENERGY_KIND})")
    return 0


def cmd_bench(args, cfg, seed, out: Path) -> int:
    from .nncore import mac_count
    from .quant import evaluate_q, infer_fast, infer_ref, load_qmodel
    data = _load_data(args.data)
    profile = PROFILES[args.platform]
    img = data.pixels[0]
    results = []
    for p in args.models.split(","):
        if not Path(p).exists():
            raise ValidationError(f"model {p} not found")
        qm = load_qmodel(p)
        fn = infer_fast if args.kernel == "fast" else infer_ref
        st = bench_latency(lambda: fn(qm, img), reps=args.reps)
        results.append(BenchResult(qm.spec.name, evaluate_q(qm, data), st.median_ms, st.p95_us / 1000.0,
                                   mac_count(qm.spec), energy_proxy(qm.spec, profile), profile.name, st.reps))
        print(f"{qm.spec.name}: median {st.median_us:.2f}us p95 {st.p95_us:.2f}us "
              f"acc {results[-1].accuracy:.4f} energy {results[-1].energy_uj:.2f}uJ ({ENERGY_KIND})")
    path = Path(args.output) if args.output else out / "bench.csv"
    write_csv(path, BENCH_CSV_SCHEMA, BENCH_CSV_COLUMNS, bench_rows(results))
    print(f"wrote {path} ({machine_descriptor()})")
    return 0


def cmd_pareto(args, cfg, seed, out: Path) -> int:
    if not Path(args.input).exists():
        raise ValidationError(f"{args.input} not found")
    front = pareto(results_from_rows(read_csv(Path(args.input), BENCH_CSV_SCHEMA)))
    path = Path(args.output) if args.output else out / "pareto.csv"
    write_csv(path, BENCH_CSV_SCHEMA, BENCH_CSV_COLUMNS, bench_rows(front))
    for r in front:
        print(f"{r.model}: accuracy {r.accuracy:.4f} latency {r.latency_ms:.4f}ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinydrive", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None, help="overrides TINYDRIVE_SEED and the config file")
    p.add_argument("--config", help="TOML or JSON configuration file")
    p.add_argument("--out-dir", default=".", help="directory for every artifact (default: .)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a Dset (train + test) or Test-comb")
    g.add_argument("--dset", required=True, help="2.0 | 1.5 | 1.0 | comb")
    g.add_argument("--per-class", type=int, default=None, help="training samples per class")
    g.add_argument("--per-class-test", type=int, default=None)
    g.add_argument("--light", default=None, choices=sorted(LIGHTS))
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--n-train", type=int, default=750, help="Test-comb train size")
    g.add_argument("--n-test", type=int, default=250, help="Test-comb test size")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a float model from scratch")
    t.add_argument("--spec", required=True, help="vnn1 | vnn2 | vnn3 | vnn4 | lenet5")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("-o", "--output")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("quantize", help="post-training int8 quantization")
    q.add_argument("--model", required=True)
    q.add_argument("--calib", required=True, help="calibration dataset (>= 100 samples)")
    q.add_argument("-o", "--output")
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", help="accuracy of a .vnnf or .vnnq model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--kernel", choices=("ref", "fast"), default="fast")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict-runtime", help="fit / run the weight-set selection chain")
    r.add_argument("--fit", help="Test-comb training split to fit a chain on")
    r.add_argument("--chain", help="chain JSON (written by --fit, read otherwise)")
    r.add_argument("--clf", default="dt", choices=("dt", "knn", "svm", "cnn"))
    r.add_argument("--features", default="none", help="none | mean | pca-mle | pca-3 | pca-2")
    r.add_argument("--float", action="store_true", help="keep the float classifier (no integerization)")
    r.add_argument("--max-depth", type=int, default=None, help="tree depth limit (0 = unbounded)")
    r.add_argument("--registry", help="comma-separated .vnnq files, one per weight set")
    r.add_argument("--ids", help="weight-set ids for --registry (default W2.0,W1.5,W1.0)")
    r.add_argument("--data")
    r.set_defaults(func=cmd_predict_runtime)

    c = sub.add_parser("closed-loop", help="imitation-learning phases against the CV expert")
    c.add_argument("--protocol", default="A", help="A (from Dset-2.0) or B (from Dset-All)")
    c.add_argument("--spec", default="vnn1")
    c.add_argument("--epochs", type=int, default=None)
    c.add_argument("--per-class", type=int, default=None)
    c.add_argument("--per-class-test", type=int, default=None)
    c.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    c.add_argument("--frame-budget", type=int, default=200_000)
    c.set_defaults(func=cmd_closed_loop)

    k = sub.add_parser("cascade", help="fit and evaluate the small/large model router")
    k.add_argument("--small", required=True)
    k.add_argument("--large", required=True)
    k.add_argument("--fit", required=True, help="routing training set (Test-comb train)")
    k.add_argument("--data", help="evaluation set (default: --fit)")
    k.add_argument("--clf", default="dt", choices=("dt", "knn", "svm", "cnn"))
    k.add_argument("--features", default="none")
    k.add_argument("--float", action="store_true")
    k.add_argument("--platform", default=GAP8_LIKE.name, choices=sorted(PROFILES))
    k.set_defaults(func=cmd_cascade)

    b = sub.add_parser("bench", help="latency / accuracy / energy of quantized models")
    b.add_argument("--models", required=True, help="comma-separated .vnnq files")
    b.add_argument("--data", required=True)
    b.add_argument("--reps", type=int, default=1000)
    b.add_argument("--kernel", choices=("ref", "fast"), default="fast")
    b.add_argument("--platform", default=GAP8_LIKE.name, choices=sorted(PROFILES))
    b.add_argument("-o", "--output")
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("pareto", help="Pareto front of a bench CSV")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("-o", "--output")
    f.set_defaults(func=cmd_pareto)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        seed = resolve_seed(args.seed, cfg)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, cfg, seed, out)
    except (ValidationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report, do not trace, at the CLI boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
