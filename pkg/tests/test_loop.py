from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest

from tinydrive.cva import Confidence
from tinydrive.loop import (
    PHASE_CSV_COLUMNS,
    PHASE_CSV_SCHEMA,
    LoopConfig,
    hidden_mode_run,
    protocol_config,
    reports_csv,
    reports_json,
    run_full_loop,
    run_phase,
    start,
    stream_states,
)
from tinydrive.nncore import init_model, model_spec
from tinydrive.quant import quantize_model
from tinydrive.simenv import TRACK, CameraConfig, LightingProfile, Origin

EXPERT = CameraConfig(acquisition_ms=3.0)
LEARNER = CameraConfig(acquisition_ms=1.0)


def test_stream_is_balanced_and_resumable():
    s = stream_states(4, 14000, 8)
    counts = np.bincount(s, minlength=7) / len(s)
    assert np.all(np.abs(counts - 1 / 7) < 0.02)
    assert np.array_equal(stream_states(4, 100, 8, start=37), s[37:137])
    assert len(stream_states(4, 0, 8)) == 0


def test_oracle_learner_never_disagrees():
    res = hidden_mode_run(lambda px, decision: int(decision), EXPERT, LEARNER, TRACK, 500, seed=1, oracle=True)
    assert res.frames == 500 and res.confident > 0 and res.records == []


def test_random_learner_near_chance():
    qm = quantize_model(init_model(model_spec("vnn1"), seed=9), np.full((4, 128), 128, np.uint8))
    res = hidden_mode_run(qm, EXPERT, LEARNER, TRACK, 3000, seed=2)
    assert abs(res.disagreement_rate - 6 / 7) <= 0.05


def test_records_carry_high_confidence_and_expert_labels():
    guess = lambda px: 0
    res = hidden_mode_run(guess, EXPERT, LEARNER, LightingProfile(shadow_prob=0.6), 600, seed=3)
    assert res.records
    for r in res.records:
        assert r.expert_confidence is Confidence.HIGH
        assert r.learner_label == 0 != int(r.expert_label)
        assert r.image.pixels.dtype == np.uint8


def test_budget_zero_is_empty():
    res = hidden_mode_run(lambda px: 0, EXPERT, LEARNER, TRACK, 0, seed=0)
    assert res.records == [] and res.frames == 0


def test_stop_at_needed_and_exhaustion():
    res = hidden_mode_run(lambda px: 0, EXPERT, LEARNER, TRACK, 5000, seed=4, needed=25)
    assert len(res.records) == 25 and not res.exhausted and res.frames < 5000
    short = hidden_mode_run(lambda px: 0, EXPERT, LEARNER, TRACK, 10, seed=4, needed=25)
    assert short.exhausted and len(short.records) < 25


def test_hidden_run_deterministic():
    a = hidden_mode_run(lambda px: 3, EXPERT, LEARNER, TRACK, 300, seed=5)
    b = hidden_mode_run(lambda px: 3, EXPERT, LEARNER, TRACK, 300, seed=5)
    assert [(r.frame, int(r.expert_label)) for r in a.records] == [(r.frame, int(r.expert_label)) for r in b.records]
    assert all(np.array_equal(x.image.pixels, y.image.pixels) for x, y in zip(a.records, b.records))


def test_phase_target_arithmetic():
    assert int(round(0.25 * 7000)) == 1750


def test_config_validation(small_dsets):
    tr = small_dsets[2.0][0]
    with pytest.raises(ValueError):
        LoopConfig(tr, {}, phase_targets=(0.5, 0.25), lights=(TRACK, TRACK))
    with pytest.raises(ValueError):
        LoopConfig(tr, {}, learner_cam=CameraConfig(acquisition_ms=3.0))
    with pytest.raises(ValueError):
        LoopConfig(tr, {}, lights=(TRACK,))
    with pytest.raises(ValueError):
        protocol_config("C", small_dsets, "vnn1")


def _tiny_cfg(small_dsets, **kw) -> LoopConfig:
    cfg = dict(epochs=2, frame_budget=4000, calib_samples=50)
    cfg.update(kw)
    return protocol_config("B", small_dsets, "vnn1", seed=0, **cfg)


def test_full_loop_targets_and_cumulative_size(small_dsets):
    cfg = _tiny_cfg(small_dsets)
    st = start(cfg)
    base = cfg.base_size
    for target, light, name in zip(cfg.phase_targets, cfg.lights, cfg.names()):
        run_phase(st, target, light, name)
    reps = st.reports
    assert [r.phase for r in reps] == ["initial", "I1", "I2", "I3"]
    assert [r.target for r in reps[1:]] == [round(0.25 * base), round(0.5 * base), base]
    assert all(not r.partial for r in reps[1:])
    assert [r.cumulative for r in reps[1:]] == [r.target for r in reps[1:]]
    assert len(st.dataset) == len(cfg.train_set) + base
    assert st.dataset.origin_counts()["collected"] == base
    assert sum(sum(r.reinforced) for r in reps) == base


def test_protocol_a_doubles_the_base(small_dsets):
    cfg = protocol_config("A", small_dsets, "vnn1", epochs=2, frame_budget=4000, calib_samples=50)
    st = start(cfg)
    for target, light, name in zip(cfg.phase_targets, cfg.lights, cfg.names()):
        run_phase(st, target, light, name)
    assert len(st.dataset) == 2 * cfg.base_size


def test_zero_disagreement_phase_converges(small_dsets, monkeypatch):
    import tinydrive.loop as loop_mod

    real = loop_mod.hidden_mode_run

    def oracle_run(learner, *a, **kw):
        return real(lambda px, d: int(d), *a, oracle=True, **kw)

    cfg = _tiny_cfg(small_dsets, frame_budget=500)
    st = start(cfg)
    qm_before, ds_before = st.qmodel, st.dataset
    monkeypatch.setattr(loop_mod, "hidden_mode_run", oracle_run)
    _, _, qm, rep = run_phase(st, 0.25, TRACK, "I1")
    assert rep.collected == 0 and not rep.retrained and rep.converged
    assert st.dataset is ds_before and qm is qm_before
    assert rep.accuracy == st.reports[0].accuracy


def test_epochs_zero_identity(small_dsets):
    reps = run_full_loop(_tiny_cfg(small_dsets, epochs=0, frame_budget=2000))
    first = reps[0].accuracy
    for r in reps[1:]:
        for test in first:
            assert r.acc(test, "float") == first[test]["float"]
            assert r.acc(test, "quant") == first[test]["quant"]


def test_partial_phase_flagged(small_dsets):
    reps = run_full_loop(_tiny_cfg(small_dsets, frame_budget=20))
    assert any(r.partial for r in reps[1:])


def test_report_schemas(small_dsets):
    reps = run_full_loop(_tiny_cfg(small_dsets, frame_budget=3000))
    rows = list(csv.reader(io.StringIO(reports_csv(reps, "B", 0))))
    assert rows[0] == [f"#schema={PHASE_CSV_SCHEMA}"] and tuple(rows[1]) == PHASE_CSV_COLUMNS
    assert len(rows) == 2 + len(reps) and rows[2][2] == "initial"
    body = reports_csv(reps, "B", 0, header=False)
    assert body.count("\n") == len(reps)
    doc = json.loads(reports_json(reps, "B", 0))
    assert doc["schema"] == PHASE_CSV_SCHEMA and len(doc["phases"]) == 4
    assert set(doc["phases"][1]["accuracy"]) == {"D2.0", "D1.5", "D1.0"}


def test_collected_samples_come_from_learner_camera(small_dsets):
    cfg = _tiny_cfg(small_dsets)
    st = start(cfg)
    run_phase(st, 0.25)
    new = st.dataset.origins == Origin.COLLECTED
    # 1.0 ms frames are dim compared with the 3.0 ms expert view
    assert st.dataset.pixels[new].mean() < 150
