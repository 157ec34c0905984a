"""Post-training int8 quantization with power-of-two scales.

A real value ``r`` is stored as ``q`` with ``r ~= q * 2**exp``.  The network
input is ``pixel - 128`` at exponent -7, which is exactly the float
normalisation ``(pixel - 128) / 128``.  Conv and FC layers accumulate in
int32 at ``in_exp + w_exp`` and are brought back to int8 by a rounding right
shift of ``out_exp - acc_exp`` bits; a following ReLU is fused into that
step.  The final FC returns its int32 accumulators as logits.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .nncore import FC, Conv1d, Dropout, FloatModel, MaxPool1d, ModelSpec, ReLU, _forward, normalize
from .simenv import Dataset, LineImage

INPUT_EXP = -7
INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class CalibStats:
    """Running min/max of the input (index 0) and of every layer output (index i + 1)."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    n_samples: int

    def merge(self, other: "CalibStats") -> "CalibStats":
        return CalibStats(tuple(map(min, self.mins, other.mins)), tuple(map(max, self.maxs, other.maxs)),
                          self.n_samples + other.n_samples)


def calibrate(model: FloatModel, val_set: Dataset | np.ndarray, batch: int = 512) -> CalibStats:
    px = val_set.pixels if isinstance(val_set, Dataset) else np.asarray(val_set, np.uint8)
    px = px.reshape(-1, model.spec.input_width)
    if len(px) == 0:
        raise ValueError("empty calibration set")
    stats = None
    for s in range(0, len(px), batch):
        x = normalize(px[s:s + batch].reshape(-1, 1, model.spec.input_width))
        trace = [x]
        _forward(model, x, trace=trace)
        part = CalibStats(tuple(float(t.min()) for t in trace), tuple(float(t.max()) for t in trace),
                          len(x))
        stats = part if stats is None else stats.merge(part)
    return stats


def scale_exp(max_abs: float) -> int:
    """Smallest ``n`` with ``max_abs / 2**n <= 127``; zero tensors get 0."""
    if not max_abs > 0 or not math.isfinite(max_abs):
        return 0
    n = math.ceil(math.log2(max_abs / 127.0))
    while max_abs / 2.0**n > 127.0:  # guard against log2 rounding
        n += 1
    while max_abs / 2.0 ** (n - 1) <= 127.0:
        n -= 1
    return n


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(w: np.ndarray, exp: int | None = None) -> tuple[np.ndarray, int]:
    w = np.asarray(w, dtype=np.float64)
    if exp is None:
        exp = scale_exp(float(np.abs(w).max(initial=0.0)))
    q = np.clip(round_half_away(w / 2.0**exp), -128, 127).astype(np.int8)
    return q, exp


def dequantize(q: np.ndarray, exp: int) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * 2.0**exp


@dataclass(frozen=True)
class QLayer:
    kind: str  # conv | fc | pool
    w: np.ndarray | None = None
    b: np.ndarray | None = None
    stride: int = 1
    kernel: int = 5
    in_exp: int = 0
    w_exp: int = 0
    out_exp: int = 0
    shift: int = -1  # -1 on the final layer: return int32 accumulators
    relu: bool = False

    @property
    def acc_exp(self) -> int:
        return self.in_exp + self.w_exp


@dataclass(frozen=True)
class QuantModel:
    spec: ModelSpec
    layers: tuple[QLayer, ...]
    input_exp: int = INPUT_EXP
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        plan = tuple((l.kind, l.w, l.b, l.stride, l.kernel, l.shift, l.relu) for l in self.layers)
        object.__setattr__(self, "_plan", plan)

    @property
    def output_exp(self) -> int:
        return self.layers[-1].acc_exp


def _post_range(stats: CalibStats, layers, i: int) -> float:
    """max |activation| that leaves layer ``i``, after a following ReLU if there is one."""
    lo, hi = stats.mins[i + 1], stats.maxs[i + 1]
    j = i + 1
    while j < len(layers) and isinstance(layers[j], (Dropout,)):
        j += 1
    if j < len(layers) and isinstance(layers[j], ReLU):
        lo, hi = max(lo, 0.0), max(hi, 0.0)
    return max(abs(lo), abs(hi))


def quantize(model: FloatModel, stats: CalibStats) -> QuantModel:
    layers = model.spec.layers
    if len(stats.maxs) != len(layers) + 1:
        raise ValueError("calibration stats do not cover every activation of this model")
    last = max(i for i, l in enumerate(layers) if isinstance(l, (Conv1d, FC)))
    if not isinstance(layers[last], FC):
        raise ValueError("model must end in a fully connected layer")
    exp = INPUT_EXP
    out: list[QLayer] = []
    for i, (l, p) in enumerate(zip(layers, model.params)):
        if isinstance(l, (Conv1d, FC)):
            w, b = p
            wq, w_exp = quantize_tensor(w)
            acc_exp = exp + w_exp
            bq = np.clip(round_half_away(np.asarray(b, np.float64) / 2.0**acc_exp),
                         -INT32_MAX - 1, INT32_MAX).astype(np.int32)
            relu = i + 1 < len(layers) and isinstance(layers[i + 1], ReLU)
            if i == last:
                out_exp, shift = acc_exp, -1
            else:
                out_exp = max(scale_exp(_post_range(stats, layers, i)), acc_exp)
                shift = out_exp - acc_exp
            kernel = l.kernel if isinstance(l, Conv1d) else 1
            stride = l.stride if isinstance(l, Conv1d) else 1
            out.append(QLayer("conv" if isinstance(l, Conv1d) else "fc", wq, bq, stride, kernel,
                              exp, w_exp, out_exp, shift, relu))
            exp = out_exp
        elif isinstance(l, MaxPool1d):
            out.append(QLayer("pool", stride=l.stride, kernel=l.kernel, in_exp=exp, out_exp=exp))
        # ReLU is fused, Flatten and Dropout are no-ops at inference
    return QuantModel(model.spec, tuple(out), INPUT_EXP, {"calib_samples": stats.n_samples})


def quantize_input(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.uint8) ^ np.uint8(0x80)).view(np.int8)  # pixel - 128


def _run(qm: QuantModel, img, conv, fc, pool) -> tuple[np.ndarray, int]:
    px = img.pixels if isinstance(img, LineImage) else np.asarray(img)
    if px.shape != (qm.spec.input_width,):
        raise ValueError(f"expected a width-{qm.spec.input_width} image, got shape {px.shape}")
    x = quantize_input(px).reshape(1, -1)
    for kind, w, b, stride, kernel, shift, relu in qm._plan:
        if kind == "conv":
            x = conv(x, w, b, stride, shift, relu)
        elif kind == "pool":
            x = pool(x, kernel, stride)
        else:
            x = fc(x.reshape(-1), w, b, shift, relu)
    return x, int(x.argmax())  # argmax keeps the lowest index on ties


def infer_ref(qm: QuantModel, img) -> tuple[np.ndarray, int]:
    return _run(qm, img, kernels.conv1d_ref, kernels.fc_ref, kernels.maxpool1d)


def infer_fast(qm: QuantModel, img) -> tuple[np.ndarray, int]:
    return _run(qm, img, kernels.conv1d_fast, kernels.fc_fast, kernels.maxpool1d)


def infer_with(backend, qm: QuantModel, img, fast: bool = True) -> tuple[np.ndarray, int]:
    """Run on a specific kernel backend module (see ``kernels.backends()``)."""
    if fast:
        return _run(qm, img, backend.conv1d_fast, backend.fc_fast, backend.maxpool1d)
    return _run(qm, img, backend.conv1d_ref, backend.fc_ref, backend.maxpool1d)


def predict_q(qm: QuantModel, pixels: np.ndarray, fast: bool = True) -> np.ndarray:
    fn = infer_fast if fast else infer_ref
    px = np.asarray(pixels, np.uint8).reshape(-1, qm.spec.input_width)
    return np.array([fn(qm, p)[1] for p in px], dtype=np.int64)


def evaluate_q(qm: QuantModel, dataset: Dataset, fast: bool = True) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict_q(qm, dataset.pixels, fast) == dataset.labels))


def quantize_model(model: FloatModel, calib: Dataset | np.ndarray) -> QuantModel:
    return quantize(model, calibrate(model, calib))


# --------------------------------------------------------------------------- .vnnq files

_Q_MAGIC = b"VNNQ"
_FIELDS = ("kind", "stride", "kernel", "in_exp", "w_exp", "out_exp", "shift", "relu")


def save_qmodel(qm: QuantModel, path: str | Path) -> None:
    layers = []
    for l in qm.layers:
        d = {k: getattr(l, k) for k in _FIELDS}
        if l.w is not None:
            d["w_shape"], d["b_len"] = list(l.w.shape), int(l.b.shape[0])
        layers.append(d)
    header = {"format": "vnnq", "version": 1, "spec": qm.spec.to_dict(), "input_exp": qm.input_exp,
              "layers": layers, "meta": qm.meta}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_Q_MAGIC + struct.pack("<I", len(blob)) + blob)
        for l in qm.layers:
            if l.w is not None:
                f.write(l.w.astype(np.int8).tobytes())
                f.write(l.b.astype("<i4").tobytes())


def load_qmodel(path: str | Path) -> QuantModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _Q_MAGIC:
        raise ValueError(f"{path}: not a .vnnq model file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    off = 8 + hlen
    layers = []
    for d in header["layers"]:
        w = b = None
        if "w_shape" in d:
            n = int(np.prod(d["w_shape"]))
            w = np.frombuffer(raw, np.int8, n, off).reshape(d["w_shape"]).copy()
            off += n
            b = np.frombuffer(raw, "<i4", d["b_len"], off).astype(np.int32)
            off += 4 * d["b_len"]
        layers.append(QLayer(w=w, b=b, **{k: d[k] for k in _FIELDS}))
    if off != len(raw):
        raise ValueError(f"{path}: trailing or missing tensor data")
    return QuantModel(ModelSpec.from_dict(header["spec"]), tuple(layers), header["input_exp"],
                      header.get("meta", {}))
