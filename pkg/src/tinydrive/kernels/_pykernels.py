"""Pure numpy fallback with the same integer semantics as the compiled kernels."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def requantize(acc, shift: int, relu: bool) -> np.ndarray:
    v = np.asarray(acc, dtype=np.int64)
    if shift > 0:
        half = np.int64(1) << (shift - 1)
        mag = (np.abs(v) + half) >> shift
        v = np.where(v >= 0, mag, -mag)
    v = np.clip(v, -128, 127)
    if relu:
        v = np.maximum(v, 0)
    return v.astype(np.int8)


def _check_conv(x, w, b, stride):
    cin, length = x.shape
    if w.shape[1] != cin or b.shape[0] != w.shape[0]:
        raise ValueError("conv1d: shape mismatch")
    if length < w.shape[2] or stride < 1:
        raise ValueError("conv1d: input shorter than kernel")
    return (length - w.shape[2]) // stride + 1


def conv1d_ref(x, w, b, stride: int, shift: int, relu: bool) -> np.ndarray:
    x = np.asarray(x, np.int8)
    w = np.asarray(w, np.int8)
    b = np.asarray(b, np.int32)
    n = _check_conv(x, w, b, stride)
    k = w.shape[2]
    xi = x.astype(np.int32)
    acc = np.repeat(b[:, None].astype(np.int32), n, axis=1)
    span = stride * (n - 1) + 1
    for c in range(x.shape[0]):
        for t in range(k):
            tap = xi[c, t:t + span:stride]
            acc += w[:, c, t].astype(np.int32)[:, None] * tap[None, :]
    return requantize(acc, shift, relu)


def conv1d_fast(x, w, b, stride: int, shift: int, relu: bool) -> np.ndarray:
    x = np.asarray(x, np.int8)
    w = np.asarray(w, np.int8)
    b = np.asarray(b, np.int32)
    n = _check_conv(x, w, b, stride)
    cols = sliding_window_view(x.astype(np.int32), w.shape[2], axis=1)[:, ::stride][:, :n]
    patches = cols.transpose(1, 0, 2).reshape(n, -1)
    acc = w.reshape(w.shape[0], -1).astype(np.int32) @ patches.T + b[:, None]
    return requantize(acc, shift, relu)


def _fc(x, w, b, shift, relu, rowwise):
    x = np.asarray(x, np.int8)
    w = np.asarray(w, np.int8)
    b = np.asarray(b, np.int32)
    if w.shape[1] != x.shape[0] or b.shape[0] != w.shape[0]:
        raise ValueError("fc: shape mismatch")
    xi = x.astype(np.int32)
    if rowwise:
        acc = np.array([int(b[o]) + int(w[o].astype(np.int32) @ xi) for o in range(w.shape[0])],
                       dtype=np.int32)
    else:
        acc = (w.astype(np.int32) @ xi + b).astype(np.int32)
    if shift < 0:
        return acc
    return requantize(acc, shift, relu)


def fc_ref(x, w, b, shift: int, relu: bool) -> np.ndarray:
    return _fc(x, w, b, shift, relu, rowwise=True)


def fc_fast(x, w, b, shift: int, relu: bool) -> np.ndarray:
    return _fc(x, w, b, shift, relu, rowwise=False)


def maxpool1d(x, kernel: int, stride: int) -> np.ndarray:
    x = np.asarray(x, np.int8)
    if x.shape[1] < kernel or kernel < 1 or stride < 1:
        raise ValueError("maxpool: input shorter than kernel")
    return sliding_window_view(x, kernel, axis=1)[:, ::stride].max(axis=2)


def dt_predict_u8(feature, threshold, left, right, value, x) -> int:
    node = 0
    while feature[node] >= 0:
        node = left[node] if int(x[feature[node]]) <= threshold[node] else right[node]
    return int(value[node])


def dt_predict_u8_batch(feature, threshold, left, right, value, xs) -> np.ndarray:
    xs = np.asarray(xs)
    node = np.zeros(len(xs), dtype=np.int64)
    feature = np.asarray(feature)
    rows = np.arange(len(xs))
    active = feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[active]
        go_left = xs[r, feature[nd]].astype(np.int32) <= np.asarray(threshold)[nd]
        node[active] = np.where(go_left, np.asarray(left)[nd], np.asarray(right)[nd])
        active = feature[node] >= 0
    return np.asarray(value)[node].astype(np.int32)


class TreeWalker:
    def __init__(self, feature, threshold, left, right, value):
        self.arrays = tuple(np.ascontiguousarray(a, dtype=np.int32)
                            for a in (feature, threshold, left, right, value))
        self._lists = tuple(a.tolist() for a in self.arrays)

    def predict(self, x) -> int:
        feature, threshold, left, right, value = self._lists
        node = 0
        while feature[node] >= 0:
            node = left[node] if int(x[feature[node]]) <= threshold[node] else right[node]
        return value[node]

    def predict_batch(self, xs) -> np.ndarray:
        return dt_predict_u8_batch(*self.arrays, xs)
