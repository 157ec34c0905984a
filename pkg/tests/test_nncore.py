from __future__ import annotations

import numpy as np
import pytest

from tinydrive.nncore import (
    FC,
    Conv1d,
    Dropout,
    Flatten,
    FloatModel,
    MaxPool1d,
    ModelSpec,
    ReLU,
    TrainConfig,
    conv1d_forward,
    evaluate,
    first_layer_alive,
    forward,
    forward_batch,
    init_model,
    load_model,
    loss_and_grads,
    mac_count,
    maxpool1d_forward,
    model_spec,
    normalize,
    param_count,
    predict,
    save_model,
    sgd_step,
    softmax,
    train,
)
from tinydrive.simenv import Dataset

# --------------------------------------------------------------------------- naive oracles


def naive_conv(x, w, b, stride):
    cin, length = x.shape
    cout, _, k = w.shape
    n = (length - k) // stride + 1
    out = np.zeros((cout, n))
    for c in range(cout):
        for i in range(n):
            acc = b[c]
            for d in range(cin):
                for t in range(k):
                    acc += w[c, d, t] * x[d, i * stride + t]
            out[c, i] = acc
    return out


def naive_pool(x, k, s):
    n = (x.shape[1] - k) // s + 1
    return np.array([[max(x[c, i * s:i * s + k]) for i in range(n)] for c in range(x.shape[0])])


def naive_forward(model: FloatModel, px: np.ndarray, count: list | None = None) -> np.ndarray:
    """Layer-by-layer composition from the naive loops; ``count`` collects multiplications."""
    x = normalize(px).astype(np.float64)[None, :]
    for l, p in zip(model.spec.layers, model.params):
        if isinstance(l, Conv1d):
            x = naive_conv(x, p[0].astype(np.float64), p[1].astype(np.float64), l.stride)
            if count is not None:
                count.append(x.size * l.in_ch * l.kernel)
        elif isinstance(l, MaxPool1d):
            x = naive_pool(x, l.kernel, l.stride)
        elif isinstance(l, ReLU):
            x = np.maximum(x, 0)
        elif isinstance(l, Flatten):
            x = x.reshape(-1)
        elif isinstance(l, FC):
            w, b = p
            x = np.array([sum(float(w[o, i]) * x[i] for i in range(len(x))) + b[o] for o in range(w.shape[0])])
            if count is not None:
                count.append(w.size)
    return x


# --------------------------------------------------------------------------- primitives


def test_conv_identity_tap(rng):
    x = rng.normal(size=(1, 30))
    w = np.array([[[0, 0, 1, 0, 0]]], float)
    assert np.array_equal(conv1d_forward(x, w, np.zeros(1)), x[:, 2:-2])


def test_conv_zero_input_gives_bias(rng):
    w = rng.normal(size=(3, 2, 5))
    b = np.array([0.5, -1.0, 2.0])
    y = conv1d_forward(np.zeros((2, 20)), w, b, stride=2)
    assert y.shape == (3, 8) and np.all(y == b[:, None])


@pytest.mark.parametrize("trial", range(25))
def test_conv_matches_naive_exactly(trial):
    r = np.random.default_rng(trial)
    cin, cout, k, s = (int(v) for v in (r.integers(1, 4), r.integers(1, 5), r.integers(1, 6), r.integers(1, 4)))
    length = int(r.integers(k, 40))
    # small integers keep every float sum exact, so equality is exact
    x = r.integers(-8, 9, size=(cin, length)).astype(float)
    w = r.integers(-8, 9, size=(cout, cin, k)).astype(float)
    b = r.integers(-8, 9, size=cout).astype(float)
    assert np.array_equal(conv1d_forward(x, w, b, s), naive_conv(x, w, b, s))


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        conv1d_forward(np.zeros((2, 10)), np.zeros((1, 3, 5)), np.zeros(1))
    with pytest.raises(ValueError):
        conv1d_forward(np.zeros((1, 3)), np.zeros((1, 1, 5)), np.zeros(1))


def test_pool_constant_and_length():
    assert np.all(maxpool1d_forward(np.full((2, 50), 3.5)) == 3.5)
    assert maxpool1d_forward(np.zeros((1, 124))).shape == (1, 40)
    with pytest.raises(ValueError):
        maxpool1d_forward(np.zeros((1, 4)))


@pytest.mark.parametrize("trial", range(25))
def test_pool_matches_naive(trial):
    r = np.random.default_rng(100 + trial)
    k, s = int(r.integers(1, 6)), int(r.integers(1, 4))
    x = r.normal(size=(int(r.integers(1, 4)), int(r.integers(k, 50))))
    assert np.array_equal(maxpool1d_forward(x, k, s), naive_pool(x, k, s))


# --------------------------------------------------------------------------- gradient check


def _random_spec(r: np.random.Generator) -> ModelSpec:
    while True:
        width = int(r.integers(16, 40))
        layers, ch, length = [], 1, width
        for _ in range(int(r.integers(1, 3))):
            out, k, s = int(r.integers(1, 4)), int(r.integers(2, 6)), int(r.integers(1, 3))
            if length < k:
                break
            layers += [Conv1d(ch, out, k, s), ReLU()]
            ch, length = out, (length - k) // s + 1
            if r.random() < 0.6:
                pk, ps = int(r.integers(2, 4)), int(r.integers(1, 4))
                if length >= pk:
                    layers.append(MaxPool1d(pk, ps))
                    length = (length - pk) // ps + 1
        if not layers:
            continue
        layers.append(Flatten())
        feat = ch * length
        if r.random() < 0.5:
            h = int(r.integers(2, 6))
            layers += [FC(feat, h), ReLU()]
            feat = h
        if r.random() < 0.5:
            layers.append(Dropout(0.3))
        layers.append(FC(feat, 3))
        spec = ModelSpec("grad", tuple(layers), width)
        spec.shapes()
        return spec


def _as_f64(model: FloatModel) -> FloatModel:
    return FloatModel(model.spec, [None if p is None else (p[0].astype(np.float64), p[1].astype(np.float64))
                                   for p in model.params])


@pytest.mark.parametrize("trial", range(24))
def test_gradients_match_finite_differences(trial):
    r = np.random.default_rng(1000 + trial)
    spec = _random_spec(r)
    model = _as_f64(init_model(spec, seed=trial))
    for i, p in enumerate(model.params):
        if p is not None:
            model.params[i] = (p[0], r.normal(0, 0.1, size=p[1].shape))
    x = r.normal(size=(2, 1, spec.input_width))
    y = r.integers(0, 3, size=2)

    def loss():
        return loss_and_grads(model, x, y, train=True, rng=np.random.default_rng(7))[0]

    _, grads = loss_and_grads(model, x, y, train=True, rng=np.random.default_rng(7))
    eps = 1e-3
    for i, p in enumerate(model.params):
        if p is None:
            continue
        for j, tensor in enumerate(p):
            num = np.zeros_like(tensor)
            for idx in np.ndindex(tensor.shape):
                old = tensor[idx]
                tensor[idx] = old + eps
                up = loss()
                tensor[idx] = old - eps
                down = loss()
                tensor[idx] = old
                num[idx] = (up - down) / (2 * eps)
            ana = grads[i][j]
            denom = max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-12)
            assert np.linalg.norm(ana - num) / denom < 1e-3, (spec.layers, i, j)


def test_gradient_layer_kinds_covered():
    kinds = set()
    for trial in range(24):
        kinds |= {l.kind for l in _random_spec(np.random.default_rng(1000 + trial)).layers}
    assert kinds == {"conv", "pool", "relu", "flatten", "dropout", "fc"}


# --------------------------------------------------------------------------- forward / training


def test_zero_model_logits_equal():
    logits = forward(init_model(model_spec("vnn3"), zero=True), np.full(128, 77, np.uint8))
    assert np.all(logits == logits[0])


def test_softmax_normalised_and_shift_invariant(rng):
    z = rng.normal(size=(50, 7)) * 10
    p = softmax(z)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)
    assert np.array_equal(softmax(z + 3.0).argmax(1), p.argmax(1))


@pytest.mark.parametrize("name", ["vnn1", "vnn2", "vnn3", "vnn4", "lenet5"])
def test_forward_matches_naive_composition(name, rng):
    model = init_model(model_spec(name), seed=5)
    px = rng.integers(0, 256, size=128).astype(np.uint8)
    assert np.allclose(forward(model, px), naive_forward(model, px), atol=1e-4)


@pytest.mark.parametrize("name", ["vnn1", "vnn2", "vnn3", "vnn4", "lenet5"])
def test_mac_count_matches_instrumented_forward(name):
    model = init_model(model_spec(name), seed=0)
    count: list = []
    naive_forward(model, np.zeros(128, np.uint8), count)
    assert mac_count(model.spec) == sum(count)


def test_forward_width_mismatch():
    with pytest.raises(ValueError):
        forward(init_model(model_spec("vnn1")), np.zeros(64, np.uint8))


def test_counts_formula():
    spec = ModelSpec("fc", (Flatten(), FC(160, 7)), 160)
    assert (param_count(spec), mac_count(spec)) == (1127, 1120)


def test_capacity_ordering():
    counts = [param_count(model_spec(n)) for n in ("vnn1", "vnn2", "vnn3", "vnn4", "lenet5")]
    assert counts == sorted(counts) and len(set(counts)) == 5
    assert counts == [579, 591, 815, 4871, 32531]


def test_family_shapes():
    for n in ("vnn1", "vnn2", "vnn3", "vnn4"):
        convs = [l for l in model_spec(n).layers if isinstance(l, Conv1d)]
        assert 1 <= len(convs) <= 3 and all(c.kernel == 5 for c in convs)
        assert isinstance(model_spec(n).layers[-1], FC) and model_spec(n).num_classes == 7
    pools = [l for l in model_spec("lenet5").layers if isinstance(l, MaxPool1d)]
    assert all((p.kernel, p.stride) == (5, 3) for p in pools)


def test_lr_zero_leaves_parameters(rng):
    model = init_model(model_spec("vnn2"), seed=1)
    before = model.flat().copy()
    sgd_step(model, rng.integers(0, 256, size=(4, 128)), np.array([0, 1, 2, 3]), TrainConfig(lr=0.0))
    assert np.array_equal(model.flat(), before)


def test_single_sample_overfit(rng):
    model = init_model(model_spec("vnn2"), seed=2)
    px = rng.integers(0, 256, size=(1, 128))
    cfg = TrainConfig(lr=0.05, momentum=0.9)
    vel = None
    losses = []
    for _ in range(500):
        losses.append(sgd_step(model, px, np.array([4]), cfg, vel, train=False))
        if losses[-1] < 0.01:
            break
    assert losses[-1] < 0.01


def test_train_deterministic_and_history(small_dsets):
    ds = small_dsets[2.0][0].subset(np.arange(0, 280, 4))
    val = small_dsets[2.0][1]
    a, ha = train(model_spec("vnn1"), ds, val, TrainConfig(epochs=3, seed=9))
    b, hb = train(model_spec("vnn1"), ds, val, TrainConfig(epochs=3, seed=9))
    assert np.array_equal(a.flat(), b.flat())
    assert len(ha.loss) == 3 and len(ha.val_accuracy) == 3 and ha.loss == hb.loss
    assert a.train_meta["seed"] == 9 and a.train_meta["final_loss"] == ha.loss[-1]


def test_first_layer_alive():
    m = init_model(model_spec("vnn1"), zero=True)
    px = np.full((5, 128), 200, np.uint8)
    w, b = m.params[0]
    b[:] = -1.0
    assert not first_layer_alive(m, px)
    b[1] = 0.5
    assert first_layer_alive(m, px)


def test_dead_first_epoch_restarts(small_dsets, monkeypatch):
    import tinydrive.nncore as nn

    ds = small_dsets[2.0][0].subset(np.arange(0, 280, 4))
    cfg = TrainConfig(epochs=2, seed=3)
    plain, _ = train(model_spec("vnn1"), ds, None, cfg)
    assert plain.train_meta["restarts"] == 0
    calls = []

    def dead_once(model, pixels, batch=1024):
        calls.append(1)
        return len(calls) > 1

    monkeypatch.setattr(nn, "first_layer_alive", dead_once)
    again, _ = train(model_spec("vnn1"), ds, None, cfg)
    assert again.train_meta["restarts"] == 1
    assert not np.array_equal(again.params[0][0], plain.params[0][0])
    monkeypatch.setattr(nn, "first_layer_alive", lambda model, pixels, batch=1024: False)
    stuck, hist = train(model_spec("vnn1"), ds, None, cfg)
    assert stuck.train_meta["restarts"] == nn.MAX_RESTARTS and len(hist.loss) == 2


def test_train_empty():
    with pytest.raises(ValueError):
        train(model_spec("vnn1"), Dataset(np.zeros((0, 128)), [], []), None, TrainConfig(epochs=1))


def test_evaluate_constant_class():
    model = init_model(model_spec("vnn1"), zero=True)
    model.params[-1][1][:] = np.eye(7)[0]  # bias favours class 0
    ds = Dataset(np.zeros((70, 128)), np.repeat(np.arange(7), 10), np.zeros(70))
    acc, cm = evaluate(model, ds)
    assert acc == pytest.approx(1 / 7)
    assert cm.sum(axis=1).tolist() == [10] * 7


def test_evaluate_batch_independent(small_dsets):
    model = init_model(model_spec("vnn2"), seed=3)
    ds = small_dsets[1.5][1]
    one_by_one = np.array([int(forward(model, p).argmax()) for p in ds.pixels])
    assert np.array_equal(predict(model, ds.pixels, batch=17), one_by_one)
    assert evaluate(model, ds)[0] == np.mean(one_by_one == ds.labels)


def test_vnnf_round_trip(tmp_path, rng):
    model = init_model(model_spec("lenet5"), seed=4)
    model.train_meta["epochs"] = 3
    save_model(model, tmp_path / "m.vnnf")
    back = load_model(tmp_path / "m.vnnf")
    assert back.spec == model.spec and back.train_meta == model.train_meta
    assert np.array_equal(back.flat(), model.flat())
    px = rng.integers(0, 256, size=(5, 128))
    assert np.array_equal(forward_batch(back, px), forward_batch(model, px))
    save_model(back, tmp_path / "n.vnnf")
    assert (tmp_path / "m.vnnf").read_bytes() == (tmp_path / "n.vnnf").read_bytes()
