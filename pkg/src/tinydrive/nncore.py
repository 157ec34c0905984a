"""Float32 1-D CNN training and inference for the VNN family.

Activations are batched as ``(batch, channels, length)``; FC layers see
``(batch, features)``.  Gradients are analytic; optimisation is SGD with
momentum on softmax cross-entropy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .simenv import NUM_STATES, Dataset, LineImage

INPUT_WIDTH = 128


# --------------------------------------------------------------------------- specs

@dataclass(frozen=True)
class Conv1d:
    in_ch: int
    out_ch: int
    kernel: int = 5
    stride: int = 1
    kind: str = "conv"

    def __post_init__(self):
        if self.kernel <= 0 or self.stride <= 0:
            raise ValueError("kernel and stride must be positive")


@dataclass(frozen=True)
class MaxPool1d:
    kernel: int = 5
    stride: int = 3
    kind: str = "pool"

    def __post_init__(self):
        if self.kernel <= 0 or self.stride <= 0:
            raise ValueError("kernel and stride must be positive")


@dataclass(frozen=True)
class ReLU:
    kind: str = "relu"


@dataclass(frozen=True)
class Flatten:
    kind: str = "flatten"


@dataclass(frozen=True)
class Dropout:
    p: float = 0.25
    kind: str = "dropout"


@dataclass(frozen=True)
class FC:
    in_features: int
    out_features: int
    kind: str = "fc"


LayerSpec = Conv1d | MaxPool1d | ReLU | Flatten | Dropout | FC
_KINDS = {"conv": Conv1d, "pool": MaxPool1d, "relu": ReLU, "flatten": Flatten,
          "dropout": Dropout, "fc": FC}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple
    input_width: int = INPUT_WIDTH

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    def to_dict(self) -> dict:
        return {"name": self.name, "input_width": self.input_width,
                "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = tuple(_KINDS[l["kind"]](**{k: v for k, v in l.items() if k != "kind"})
                       for l in d["layers"])
        return cls(d["name"], layers, d.get("input_width", INPUT_WIDTH))

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample activation shape after every layer (index 0 is the input)."""
        shape: tuple[int, ...] = (1, self.input_width)
        out = [shape]
        for l in self.layers:
            if isinstance(l, Conv1d):
                if shape[0] != l.in_ch:
                    raise ValueError(f"{self.name}: conv expects {l.in_ch} channels, got {shape[0]}")
                n = (shape[1] - l.kernel) // l.stride + 1
                if n < 1:
                    raise ValueError(f"{self.name}: input too short for conv")
                shape = (l.out_ch, n)
            elif isinstance(l, MaxPool1d):
                n = (shape[1] - l.kernel) // l.stride + 1
                if n < 1:
                    raise ValueError(f"{self.name}: input too short for pooling")
                shape = (shape[0], n)
            elif isinstance(l, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(l, FC):
                if shape != (l.in_features,):
                    raise ValueError(f"{self.name}: FC expects {l.in_features} inputs, got {shape}")
                shape = (l.out_features,)
            out.append(shape)
        return out


def _conv_stack(name: str, convs: Sequence[tuple[int, int]], pools: Sequence[bool],
                hidden: Sequence[int] = (), num_classes: int = NUM_STATES,
                width: int = INPUT_WIDTH) -> ModelSpec:
    layers: list = []
    ch, length = 1, width
    for (out_ch, stride), pool in zip(convs, pools):
        layers += [Conv1d(ch, out_ch, 5, stride), ReLU()]
        ch, length = out_ch, (length - 5) // stride + 1
        if pool:
            layers.append(MaxPool1d(5, 3))
            length = (length - 5) // 3 + 1
    layers.append(Flatten())
    feat = ch * length
    for h in hidden:
        layers += [FC(feat, h), ReLU()]
        feat = h
    layers += [Dropout(0.25), FC(feat, num_classes)]
    return ModelSpec(name, tuple(layers), width)


def model_spec(name: str, num_classes: int = NUM_STATES, width: int = INPUT_WIDTH) -> ModelSpec:
    key = name.lower()
    if key == "vnn1":
        return _conv_stack("VNN1", [(2, 1)], [True], num_classes=num_classes, width=width)
    if key == "vnn2":
        return _conv_stack("VNN2", [(4, 2)], [True], num_classes=num_classes, width=width)
    if key == "vnn3":
        return _conv_stack("VNN3", [(4, 1), (8, 1)], [True, True], num_classes=num_classes, width=width)
    if key == "vnn4":
        return _conv_stack("VNN4", [(8, 1), (16, 1), (32, 1)], [True, True, False],
                           num_classes=num_classes, width=width)
    if key == "lenet5":
        return _conv_stack("LeNet5", [(6, 1), (16, 1)], [True, True], hidden=(120, 84),
                           num_classes=num_classes, width=width)
    if key == "tinycnn":
        return _conv_stack("TinyCNN", [(2, 2)], [True], num_classes=num_classes, width=width)
    raise ValueError(f"unknown model {name!r}")


FAMILY = ("VNN1", "VNN2", "VNN3", "VNN4", "LeNet5")

# reference points from the published table (thousands); this artifact's 1-D
# reconstructions do not reproduce them
PUBLISHED_KPARAMS = {"LeNet5": 72.85, "VNN4": 6.04, "VNN3": 0.97, "VNN2": 1.29, "VNN1": 0.48}
PUBLISHED_KMAC = {"LeNet5": 181.25, "VNN4": 163.41, "VNN3": 28.69, "VNN2": 5.82, "VNN1": 7.5}


def param_count(spec: ModelSpec) -> int:
    n = 0
    for l in spec.layers:
        if isinstance(l, Conv1d):
            n += l.out_ch * l.in_ch * l.kernel + l.out_ch
        elif isinstance(l, FC):
            n += l.in_features * l.out_features + l.out_features
    return n


def mac_count(spec: ModelSpec) -> int:
    n = 0
    shapes = spec.shapes()
    for l, out_shape in zip(spec.layers, shapes[1:]):
        if isinstance(l, Conv1d):
            n += l.out_ch * l.in_ch * l.kernel * out_shape[1]
        elif isinstance(l, FC):
            n += l.in_features * l.out_features
    return n


# --------------------------------------------------------------------------- primitives

def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid 1-D convolution (cross-correlation). ``x`` is (C, L) or (B, C, L)."""
    single = x.ndim == 2
    xb = x[None] if single else x
    out_ch, in_ch, k = w.shape
    if xb.shape[1] != in_ch:
        raise ValueError(f"conv expects {in_ch} input channels, got {xb.shape[1]}")
    if xb.shape[2] < k:
        raise ValueError("input shorter than kernel")
    cols = sliding_window_view(xb, k, axis=2)[:, :, ::stride, :]  # (B, C, Lout, K)
    y = np.einsum("bclk,ock->bol", cols, w, optimize=True) + b[None, :, None]
    return y[0] if single else y


def maxpool1d_forward(x: np.ndarray, kernel: int = 5, stride: int = 3) -> np.ndarray:
    if x.shape[-1] < kernel:
        raise ValueError("input shorter than pooling window")
    win = sliding_window_view(x, kernel, axis=-1)[..., ::stride, :]
    return win.max(axis=-1)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def normalize(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float32) - 128.0) / 128.0


# --------------------------------------------------------------------------- model

@dataclass
class FloatModel:
    spec: ModelSpec
    params: list  # per layer: (w, b) for conv/fc, None otherwise
    train_meta: dict = field(default_factory=dict)

    def weights(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        for i, p in enumerate(self.params):
            if p is not None:
                yield i, p[0], p[1]

    def copy(self) -> "FloatModel":
        return FloatModel(self.spec, [None if p is None else (p[0].copy(), p[1].copy())
                                      for p in self.params], dict(self.train_meta))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, w, b in self.weights() for a in (w, b)]) \
            if any(p is not None for p in self.params) else np.zeros(0, np.float32)


def init_model(spec: ModelSpec, seed=0, zero: bool = False) -> FloatModel:
    """Uniform He-style fan-in initialisation; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = []
    for l in spec.layers:
        if isinstance(l, Conv1d):
            fan_in = l.in_ch * l.kernel
            shape = (l.out_ch, l.in_ch, l.kernel)
        elif isinstance(l, FC):
            fan_in = l.in_features
            shape = (l.out_features, l.in_features)
        else:
            params.append(None)
            continue
        bound = np.sqrt(6.0 / fan_in)
        w = np.zeros(shape, np.float32) if zero else rng.uniform(-bound, bound, shape).astype(np.float32)
        params.append((w, np.zeros(shape[0], np.float32)))
    spec.shapes()  # validates the layer chain
    return FloatModel(spec, params, {"seed": seed if isinstance(seed, int) else None})


def _forward(model: FloatModel, x: np.ndarray, train: bool = False,
             rng: np.random.Generator | None = None, keep: bool = False,
             trace: list | None = None):
    """Batched forward pass; with ``keep`` returns the per-layer caches for backprop.

    ``trace`` (if given) receives every layer's output in order.
    """
    caches = []
    for l, p in zip(model.spec.layers, model.params):
        if isinstance(l, Conv1d):
            w, b = p
            cols = sliding_window_view(x, l.kernel, axis=2)[:, :, ::l.stride, :]
            bsz, c, n, k = cols.shape
            cols2 = cols.transpose(0, 2, 1, 3).reshape(bsz * n, c * k)
            y = (cols2 @ w.reshape(l.out_ch, -1).T).reshape(bsz, n, l.out_ch).transpose(0, 2, 1)
            y = y + b[None, :, None]
            caches.append((x.shape, cols2) if keep else None)
        elif isinstance(l, MaxPool1d):
            win = sliding_window_view(x, l.kernel, axis=2)[:, :, ::l.stride, :]
            arg = win.argmax(axis=-1)
            y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
            caches.append((x.shape, arg) if keep else None)
        elif isinstance(l, ReLU):
            y = np.maximum(x, 0)
            caches.append(x > 0 if keep else None)
        elif isinstance(l, Flatten):
            y = x.reshape(x.shape[0], -1)
            caches.append(x.shape if keep else None)
        elif isinstance(l, Dropout):
            if train and l.p > 0:
                mask = (rng.random(x.shape) >= l.p).astype(np.float32) / (1.0 - l.p)
                y = x * mask
                caches.append(mask if keep else None)
            else:
                y = x
                caches.append(None)
        elif isinstance(l, FC):
            w, b = p
            y = x @ w.T + b
            caches.append(x if keep else None)
        x = y
        if trace is not None:
            trace.append(y)
    return (x, caches) if keep else x


def _backward(model: FloatModel, caches, grad: np.ndarray) -> list:
    grads: list = [None] * len(model.params)
    g = grad
    for i in range(len(model.spec.layers) - 1, -1, -1):
        l, cache = model.spec.layers[i], caches[i]
        if isinstance(l, FC):
            x = cache
            w = model.params[i][0]
            grads[i] = (g.T @ x, g.sum(axis=0))
            g = g @ w
        elif isinstance(l, Dropout):
            if cache is not None:
                g = g * cache
        elif isinstance(l, Flatten):
            g = g.reshape(cache)
        elif isinstance(l, ReLU):
            g = g * cache
        elif isinstance(l, MaxPool1d):
            shape, arg = cache
            gx = np.zeros(shape, dtype=g.dtype)
            n = arg.shape[-1]
            base = np.arange(n) * l.stride
            for k in range(l.kernel):
                # indices base + k are distinct for fixed k, so fancy += is safe
                gx[:, :, base + k] += np.where(arg == k, g, 0)
            g = gx
        elif isinstance(l, Conv1d):
            shape, cols2 = cache
            w = model.params[i][0]
            bsz, c, length = shape
            n = (length - l.kernel) // l.stride + 1
            g2 = g.transpose(0, 2, 1).reshape(bsz * n, l.out_ch)
            grads[i] = ((g2.T @ cols2).reshape(w.shape), g.sum(axis=(0, 2)))
            if i == 0:
                break  # no gradient needed w.r.t. the input image
            dcols = (g2 @ w.reshape(l.out_ch, -1)).reshape(bsz, n, c, l.kernel)
            gx = np.zeros(shape, dtype=g.dtype)
            span = (n - 1) * l.stride + 1
            for k in range(l.kernel):
                gx[:, :, k:k + span:l.stride] += dcols[:, :, :, k].transpose(0, 2, 1)
            g = gx
    return grads


def forward_batch(model: FloatModel, pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels)
    if px.shape[-1] != model.spec.input_width:
        raise ValueError(f"expected width {model.spec.input_width}, got {px.shape[-1]}")
    return _forward(model, normalize(px.reshape(-1, 1, model.spec.input_width)))


def forward(model: FloatModel, img: LineImage | np.ndarray) -> np.ndarray:
    px = img.pixels if isinstance(img, LineImage) else np.asarray(img)
    if px.ndim != 1:
        raise ValueError("forward takes a single image")
    return forward_batch(model, px[None])[0]


def predict(model: FloatModel, pixels: np.ndarray, batch: int = 1024) -> np.ndarray:
    px = np.asarray(pixels).reshape(-1, model.spec.input_width)
    out = [forward_batch(model, px[i:i + batch]).argmax(axis=1) for i in range(0, len(px), batch)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def loss_and_grads(model: FloatModel, x: np.ndarray, y: np.ndarray, train: bool = False,
                   rng: np.random.Generator | None = None):
    """Mean softmax cross-entropy over a normalised batch ``x`` (B, 1, L) and its gradients."""
    logits, caches = _forward(model, x, train=train, rng=rng, keep=True)
    p = softmax(logits.astype(np.float64))
    bsz = len(y)
    loss = float(-np.log(np.maximum(p[np.arange(bsz), y], 1e-12)).mean())
    g = p
    g[np.arange(bsz), y] -= 1.0
    g = (g / bsz).astype(logits.dtype)
    return loss, _backward(model, caches, g)


# --------------------------------------------------------------------------- training

@dataclass(frozen=True)
class Augmentation:
    shift: int = 4
    brightness: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 2.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    augment: Augmentation | None = field(default_factory=Augmentation)
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def augment(pixels: np.ndarray, aug: Augmentation, rng: np.random.Generator) -> np.ndarray:
    """Random shift (edge-replicated), brightness scaling and noise, in pixel units."""
    px = np.asarray(pixels, dtype=np.float32)
    bsz, width = px.shape
    if aug.shift:
        shifts = rng.integers(-aug.shift, aug.shift + 1, size=bsz)
        idx = np.clip(np.arange(width)[None, :] - shifts[:, None], 0, width - 1)
        px = np.take_along_axis(px, idx, axis=1)
    lo, hi = aug.brightness
    px = px * rng.uniform(lo, hi, size=(bsz, 1)).astype(np.float32)
    if aug.noise_sigma > 0:
        px = px + rng.normal(0, aug.noise_sigma, size=px.shape).astype(np.float32)
    return np.clip(px, 0, 255)


def sgd_step(model: FloatModel, pixels: np.ndarray, labels: np.ndarray, config: TrainConfig,
             velocity: list | None = None, rng: np.random.Generator | None = None,
             train: bool = True) -> float:
    """One momentum-SGD update in place; returns the batch loss."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    x = normalize(np.asarray(pixels).reshape(-1, 1, model.spec.input_width))
    loss, grads = loss_and_grads(model, x, np.asarray(labels, dtype=np.int64), train=train,
                                 rng=rng or np.random.default_rng(0))
    if velocity is None:
        velocity = [None if g is None else (np.zeros_like(g[0]), np.zeros_like(g[1])) for g in grads]
    for i, g in enumerate(grads):
        if g is None:
            continue
        w, b = model.params[i]
        vw, vb = velocity[i]
        vw *= config.momentum
        vw += g[0]
        vb *= config.momentum
        vb += g[1]
        w -= config.lr * vw
        b -= config.lr * vb
    return loss


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)


def first_layer_alive(model: FloatModel, pixels: np.ndarray, batch: int = 1024) -> bool:
    """True when some channel of the first conv layer fires (ReLU > 0) on ``pixels``."""
    l = model.spec.layers[0]
    if not isinstance(l, Conv1d):
        return True
    w, b = model.params[0]
    for s in range(0, len(pixels), batch):
        x = normalize(np.asarray(pixels[s:s + batch]).reshape(-1, 1, model.spec.input_width))
        if np.any(conv1d_forward(x, w, b, l.stride) > 0):
            return True
    return False


MAX_RESTARTS = 3


def train(spec: ModelSpec, train_set: Dataset, val_set: Dataset | None, config: TrainConfig,
          val_every: int = 1, labels: np.ndarray | None = None) -> tuple[FloatModel, TrainHistory]:
    """Train from scratch; fully determined by ``config.seed`` and the data.

    If every first-layer channel is dead after the first epoch the run restarts
    from fresh seeds (at most ``MAX_RESTARTS`` times); ``train_meta["restarts"]``
    counts them.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    y_all = np.asarray(train_set.labels if labels is None else labels, dtype=np.int64)
    if y_all.max() >= spec.num_classes:
        raise ValueError("label outside the model's output range")
    root = np.random.SeedSequence(config.seed)
    for attempt in range(MAX_RESTARTS + 1):
        # children 0-2 serve the first attempt, so runs without a restart keep their old seeds
        seeds = root.spawn(3)
        model, hist, dead = _train_run(spec, train_set, val_set, config, val_every, y_all, seeds,
                                       check=attempt < MAX_RESTARTS)
        if not dead:
            break
    model.train_meta["restarts"] = attempt
    return model, hist


def _train_run(spec, train_set, val_set, config, val_every, y_all, seeds, check):
    model = init_model(spec, np.random.default_rng(seeds[0]))
    model.train_meta = {"seed": config.seed, "epochs": config.epochs}
    rng = np.random.default_rng(seeds[1])
    drop_rng = np.random.default_rng(seeds[2])
    velocity = [None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1])) for p in model.params]
    hist = TrainHistory()
    n = len(train_set)
    px_all = train_set.pixels
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch):
            idx = order[s:s + config.batch]
            px = px_all[idx]
            if config.augment is not None:
                px = augment(px, config.augment, rng)
            total += sgd_step(model, px, y_all[idx], config, velocity, drop_rng) * len(idx)
        hist.loss.append(total / n)
        if epoch == 0 and check and not first_layer_alive(model, px_all):
            return model, hist, True
        if val_set is not None and (epoch + 1) % val_every == 0:
            hist.val_accuracy.append(evaluate(model, val_set)[0])
    model.train_meta["final_loss"] = hist.loss[-1] if hist.loss else None
    return model, hist, False


def confusion(pred: np.ndarray, labels: np.ndarray, num_classes: int = NUM_STATES) -> np.ndarray:
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, np.int64), np.asarray(pred, np.int64)), 1)
    return m


def evaluate(model: FloatModel, dataset: Dataset, labels: np.ndarray | None = None):
    """(accuracy, confusion matrix) with rows = true class, columns = prediction."""
    y = dataset.labels if labels is None else labels
    cm = confusion(predict(model, dataset.pixels), y, model.spec.num_classes)
    total = cm.sum()
    return (float(np.trace(cm) / total) if total else 0.0), cm


# --------------------------------------------------------------------------- persistence

_F_MAGIC = b"VNNF"


def save_model(model: FloatModel, path: str | Path) -> None:
    header = {"format": "vnnf", "version": 1, "spec": model.spec.to_dict(),
              "normalization": {"offset": 128.0, "scale": 128.0},
              "train_meta": model.train_meta,
              "tensors": [[list(w.shape), list(b.shape)] for _, w, b in model.weights()]}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_F_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, w, b in model.weights():
            f.write(w.astype("<f4").tobytes())
            f.write(b.astype("<f4").tobytes())


def load_model(path: str | Path) -> FloatModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _F_MAGIC:
        raise ValueError(f"{path}: not a .vnnf model file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    spec = ModelSpec.from_dict(header["spec"])
    off = 8 + hlen
    params = []
    shapes = iter(header["tensors"])
    for l in spec.layers:
        if isinstance(l, (Conv1d, FC)):
            ws, bs = next(shapes)
            arrs = []
            for shp in (ws, bs):
                cnt = int(np.prod(shp))
                arrs.append(np.frombuffer(raw, "<f4", cnt, off).reshape(shp).astype(np.float32))
                off += 4 * cnt
            params.append(tuple(arrs))
        else:
            params.append(None)
    return FloatModel(spec, params, header.get("train_meta", {}))
