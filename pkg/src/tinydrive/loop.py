"""Closed-loop imitation learning against the CV expert.

The expert drives from its own (longer-exposure) camera while the quantized
learner predicts in the background on a second camera.  Frames where the
expert is confident and the learner disagrees are stored with the expert's
label; each phase grows the data to a cumulative target, retrains from
scratch and redeploys the quantized model.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cva import Confidence, CvaConfig, cva_step, new_state
from .nncore import FloatModel, TrainConfig, evaluate, model_spec, train
from .quant import QuantModel, evaluate_q, infer_fast, quantize_model
from .simenv import (ALTERED, NUM_STATES, TRACK, CameraConfig, Dataset, LightingProfile, LineImage,
                     Origin, TrackState, combine_datasets, render_dual)

PHASE_CSV_SCHEMA = "tinydrive.phase_report.v1"
PHASE_CSV_COLUMNS = ("protocol", "seed", "phase", "collected", "acc_d20_float", "acc_d20_q",
                     "acc_d10_float", "acc_d10_q", "frames", "disagreement_rate", "partial", "retrained")


@dataclass(frozen=True)
class DisagreementRecord:
    image: LineImage  # learner exposure
    expert_label: TrackState
    expert_confidence: Confidence
    frame: int
    learner_label: int


@dataclass
class StreamResult:
    records: list
    frames: int  # frames consumed
    confident: int  # frames where the expert was confident
    exhausted: bool

    @property
    def disagreement_rate(self) -> float:
        return len(self.records) / self.confident if self.confident else 0.0


def stream_states(seed: int, n_frames: int, dwell: int, start: int = 0) -> np.ndarray:
    """Uniform class schedule: every ``dwell`` frames a fresh state is drawn."""
    first_seg = start // dwell
    last_seg = (start + n_frames - 1) // dwell if n_frames else first_seg - 1
    segs = np.array([np.random.default_rng(np.random.SeedSequence([seed, 1, s])).integers(NUM_STATES)
                     for s in range(first_seg, last_seg + 1)], dtype=np.int64)
    frames = np.arange(start, start + n_frames)
    return segs[frames // dwell - first_seg] if n_frames else np.zeros(0, np.int64)


def _learner_fn(learner) -> Callable[[np.ndarray], int]:
    if isinstance(learner, QuantModel):
        return lambda px: infer_fast(learner, px)[1]
    if callable(learner):
        return learner
    raise TypeError("learner must be a QuantModel or a callable on pixels")


def hidden_mode_run(learner, expert_cam: CameraConfig, learner_cam: CameraConfig, light: LightingProfile,
                    budget: int, seed: int, needed: int | None = None, dwell: int = 8,
                    cva_config: CvaConfig | None = None, start_frame: int = 0,
                    oracle: bool = False) -> StreamResult:
    """Run the expert and learner side by side for up to ``budget`` frames.

    ``learner`` is a QuantModel or a callable on learner pixels; with ``oracle``
    the callable also receives the expert decision (used to build a learner
    that copies the expert).
    """
    if budget <= 0:
        return StreamResult([], 0, 0, False)
    fn = None if oracle else _learner_fn(learner)
    expert = new_state(expert_cam.width, cva_config)
    states = stream_states(seed, budget, dwell, start_frame)
    records: list[DisagreementRecord] = []
    confident = 0
    frames = 0
    for k, state in enumerate(states):
        frame = start_frame + k
        e_img, l_img = render_dual(TrackState(int(state)), expert_cam, learner_cam, light,
                                   np.random.SeedSequence([seed, 2, frame]))
        decision, conf, expert = cva_step(expert, e_img)
        frames += 1
        if conf is not Confidence.HIGH:
            continue
        confident += 1
        guess = learner(l_img.pixels, decision) if oracle else fn(l_img.pixels)
        if int(guess) != int(decision):
            records.append(DisagreementRecord(l_img, decision, conf, frame, int(guess)))
            if needed is not None and len(records) >= needed:
                break
    exhausted = needed is not None and len(records) < needed
    return StreamResult(records, frames, confident, exhausted)


# --------------------------------------------------------------------------- phases

@dataclass
class LoopConfig:
    train_set: Dataset  # data the initial model is trained on
    tests: dict  # name -> Dataset, evaluated after every phase
    protocol: str = "A"
    spec_name: str = "vnn1"
    base_size: int | None = None  # phase targets are fractions of this; defaults to len(train_set)
    phase_targets: tuple[float, ...] = (0.25, 0.50, 1.00)
    phase_names: tuple[str, ...] | None = None
    epochs: int = 200
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=200))
    learner_cam: CameraConfig = field(default_factory=lambda: CameraConfig(acquisition_ms=1.0))
    expert_cam: CameraConfig = field(default_factory=lambda: CameraConfig(acquisition_ms=3.0))
    lights: tuple[LightingProfile, ...] = (TRACK, TRACK, ALTERED)
    cva: CvaConfig = field(default_factory=CvaConfig)
    dwell: int = 8
    frame_budget: int = 200_000
    calib_samples: int = 300
    seed: int = 0

    def __post_init__(self):
        t = list(self.phase_targets)
        if any(b <= a for a, b in zip(t, t[1:])) or (t and t[0] <= 0):
            raise ValueError("phase targets must be positive and strictly increasing")
        if self.learner_cam.acquisition_ms >= self.expert_cam.acquisition_ms:
            raise ValueError("the learner camera must use a shorter exposure than the expert's")
        if len(self.lights) != len(t):
            raise ValueError("one lighting profile per phase")
        if self.base_size is None:
            self.base_size = len(self.train_set)

    def names(self) -> tuple[str, ...]:
        if self.phase_names is not None:
            return tuple(self.phase_names)
        return tuple(f"+{round(100 * p)}%" for p in self.phase_targets)


@dataclass
class PhaseReport:
    phase: str
    index: int
    target: int  # cumulative new-sample target
    collected: int  # new samples this phase
    cumulative: int
    frames: int
    disagreement_rate: float
    partial: bool
    retrained: bool
    converged: bool
    accuracy: dict  # test name -> {"float": a, "quant": a}
    reinforced: list  # per-class counts of the new samples
    light: dict

    def acc(self, test: str, kind: str = "float") -> float:
        return self.accuracy[test][kind]


@dataclass
class LoopState:
    config: LoopConfig
    dataset: Dataset
    model: FloatModel
    qmodel: QuantModel
    phase: int = 0
    collected: int = 0
    frame_cursor: int = 0
    reports: list = field(default_factory=list)


def _calibration_rows(ds: Dataset, n: int) -> np.ndarray:
    idx = np.linspace(0, len(ds) - 1, num=min(n, len(ds))).round().astype(np.int64)
    return ds.pixels[np.unique(idx)]


def _fit(cfg: LoopConfig, data: Dataset) -> tuple[FloatModel, QuantModel]:
    tc = TrainConfig(epochs=cfg.epochs, batch=cfg.train.batch, lr=cfg.train.lr, momentum=cfg.train.momentum,
                     augment=cfg.train.augment, seed=cfg.seed)
    model, _ = train(model_spec(cfg.spec_name), data, None, tc)  # fresh initialisation every time
    return model, quantize_model(model, _calibration_rows(data, cfg.calib_samples))


def _accuracies(cfg: LoopConfig, model: FloatModel, qm: QuantModel) -> dict:
    return {name: {"float": evaluate(model, ds)[0], "quant": evaluate_q(qm, ds)}
            for name, ds in cfg.tests.items()}


def start(cfg: LoopConfig) -> LoopState:
    model, qm = _fit(cfg, cfg.train_set)
    st = LoopState(cfg, cfg.train_set, model, qm)
    st.reports.append(PhaseReport("initial", 0, 0, 0, 0, 0, 0.0, False, True, False,
                                  _accuracies(cfg, model, qm), [0] * NUM_STATES, {}))
    return st


def run_phase(state: LoopState, phase_target: float, light: LightingProfile | None = None,
              name: str | None = None) -> tuple[Dataset, FloatModel, QuantModel, PhaseReport]:
    cfg = state.config
    idx = state.phase + 1
    light = light or cfg.lights[min(state.phase, len(cfg.lights) - 1)]
    target = int(round(phase_target * cfg.base_size))
    needed = max(0, target - state.collected)
    res = hidden_mode_run(state.qmodel, cfg.expert_cam, cfg.learner_cam, light, cfg.frame_budget,
                          cfg.seed, needed=needed, dwell=cfg.dwell, cva_config=cfg.cva,
                          start_frame=state.frame_cursor)
    state.frame_cursor += res.frames
    recs = res.records
    counts = np.bincount([int(r.expert_label) for r in recs], minlength=NUM_STATES).tolist()
    retrained = bool(recs)
    if recs:
        px = np.stack([r.image.pixels for r in recs])
        labels = np.array([int(r.expert_label) for r in recs], np.uint8)
        state.dataset = state.dataset.append(px, labels, np.full(len(recs), Origin.COLLECTED, np.uint8))
        state.model, state.qmodel = _fit(cfg, state.dataset)
    state.collected += len(recs)
    state.phase = idx
    rep = PhaseReport(name or f"phase{idx}", idx, target, len(recs), state.collected, res.frames,
                      res.disagreement_rate, res.exhausted, retrained, not recs,
                      _accuracies(cfg, state.model, state.qmodel), counts,
                      {**asdict(light), "global_jitter": list(light.global_jitter)})
    state.reports.append(rep)
    return state.dataset, state.model, state.qmodel, rep


def run_full_loop(cfg: LoopConfig) -> list[PhaseReport]:
    st = start(cfg)
    for target, light, name in zip(cfg.phase_targets, cfg.lights, cfg.names()):
        run_phase(st, target, light, name)
    return st.reports


def protocol_config(protocol: str, dsets: dict, spec_name: str, seed: int = 0, epochs: int = 200,
                    **overrides) -> LoopConfig:
    """Protocol A: imitate from a Dset-2.0 model at 2.0 ms under track lighting.
    Protocol B: start from Dset-All, learner at 1.0 ms, final phase under altered lighting.

    ``dsets`` maps exposure (2.0, 1.5, 1.0) to (train, test) pairs.
    """
    tests = {"D2.0": dsets[2.0][1], "D1.5": dsets[1.5][1], "D1.0": dsets[1.0][1]}
    base = len(dsets[2.0][0])
    p = protocol.upper()
    if p == "A":
        kw = dict(train_set=dsets[2.0][0], learner_cam=CameraConfig(acquisition_ms=2.0),
                  lights=(TRACK, TRACK, TRACK), phase_names=("+25%", "+50%", "+100%"))
    elif p == "B":
        kw = dict(train_set=combine_datasets([dsets[a][0] for a in (2.0, 1.5, 1.0)]),
                  learner_cam=CameraConfig(acquisition_ms=1.0), lights=(TRACK, TRACK, ALTERED),
                  phase_names=("I1", "I2", "I3"))
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    kw.update(overrides)
    return LoopConfig(tests=tests, protocol=p, spec_name=spec_name, base_size=base, epochs=epochs,
                      train=TrainConfig(epochs=epochs, seed=seed), seed=seed, **kw)


# --------------------------------------------------------------------------- reports

def _row(rep: PhaseReport, protocol: str, seed: int) -> list:
    def a(test, kind):
        v = rep.accuracy.get(test, {}).get(kind)
        return "" if v is None else f"{v:.6f}"
    return [protocol, seed, rep.phase, rep.collected, a("D2.0", "float"), a("D2.0", "quant"),
            a("D1.0", "float"), a("D1.0", "quant"), rep.frames, f"{rep.disagreement_rate:.6f}",
            int(rep.partial), int(rep.retrained)]


def reports_csv(reports: Sequence[PhaseReport], protocol: str, seed: int, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow([f"#schema={PHASE_CSV_SCHEMA}"])
        w.writerow(PHASE_CSV_COLUMNS)
    for r in reports:
        w.writerow(_row(r, protocol, seed))
    return buf.getvalue()


def reports_json(reports: Sequence[PhaseReport], protocol: str, seed: int) -> str:
    return json.dumps({"schema": PHASE_CSV_SCHEMA, "protocol": protocol, "seed": seed,
                       "phases": [asdict(r) for r in reports]}, sort_keys=True, indent=2)
