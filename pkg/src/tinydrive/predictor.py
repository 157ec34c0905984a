"""Runtime lighting predictor: pick a weight set per frame, or route between two models.

Feature menu: raw pixels (``none``), the mean of each image third (``mean``)
or a PCA projection (``pca-mle``, ``pca-3``, ``pca-2``).  Classifier menu:
CART decision tree, k-nearest neighbours, linear SVM and a one-conv CNN.
Trees and SVMs have integer variants that run on raw ``uint8`` input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from . import kernels
from .nncore import Augmentation, FloatModel, ModelSpec, TrainConfig, model_spec, predict, train
from .quant import QuantModel, infer_fast, infer_ref
from .simenv import Dataset, LineImage, Origin

WEIGHT_IDS = ("W2.0", "W1.5", "W1.0")
ORIGIN_WEIGHTS = {Origin.D20: "W2.0", Origin.D15: "W1.5", Origin.D10: "W1.0"}


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, LineImage) else np.asarray(img)


# --------------------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureSpec:
    kind: str = "none"  # none | mean | pca
    components: str | int | None = None  # pca only: "mle" or a count

    def __post_init__(self):
        if self.kind not in ("none", "mean", "pca"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "pca" and not (self.components == "mle" or
                                       (isinstance(self.components, int) and self.components >= 1)):
            raise ValueError("pca features need components='mle' or a positive count")

    @classmethod
    def parse(cls, text: str) -> "FeatureSpec":
        t = text.strip().lower()
        if t in ("none", "raw"):
            return cls("none")
        if t in ("mean", "mean-thirds", "thirds"):
            return cls("mean")
        if t.startswith("pca"):
            rest = t[3:].lstrip("-_")
            if rest in ("m", "mle"):
                return cls("pca", "mle")
            if rest.isdigit():
                return cls("pca", int(rest))
        raise ValueError(f"unknown feature spec {text!r}")

    def __str__(self) -> str:
        if self.kind == "pca":
            return f"pca-{self.components}"
        return self.kind


def thirds(width: int) -> tuple[int, int]:
    return width // 3, (2 * width) // 3


def thirds_sizes(width: int) -> tuple[int, int, int]:
    a, b = thirds(width)
    return a, b - a, width - b


def thirds_sums(pixels: np.ndarray) -> np.ndarray:
    """Integer sums per third; ``mean <= t`` is exactly ``sum <= floor(t * size)``."""
    s = np.asarray(pixels).astype(np.int64)
    a, b = thirds(s.shape[-1])
    return np.stack([s[..., :a].sum(-1), s[..., a:b].sum(-1), s[..., b:].sum(-1)], axis=-1)


def mean_thirds(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    a, b = thirds(px.shape[-1])
    return np.stack([px[..., :a].mean(-1), px[..., a:b].mean(-1), px[..., b:].mean(-1)], axis=-1)


def extract(spec: FeatureSpec, img, pca: "PcaModel | None" = None) -> np.ndarray:
    return extract_batch(spec, _pixels(img)[None], pca)[0]


def extract_batch(spec: FeatureSpec, pixels: np.ndarray, pca: "PcaModel | None" = None) -> np.ndarray:
    px = np.asarray(pixels)
    if spec.kind == "none":
        return px.astype(np.float64)
    if spec.kind == "mean":
        return mean_thirds(px)
    if pca is None:
        raise ValueError("PCA features need a fitted PcaModel")
    return pca.transform(px)


def feature_matrix(spec: FeatureSpec, width: int, pca: "PcaModel | None" = None):
    """(A, c) with features = pixels @ A.T + c; every menu entry is affine in the pixels."""
    if spec.kind == "none":
        return np.eye(width), np.zeros(width)
    if spec.kind == "mean":
        a, b = thirds(width)
        m = np.zeros((3, width))
        for r, (lo, hi) in enumerate(((0, a), (a, b), (b, width))):
            m[r, lo:hi] = 1.0 / (hi - lo)
        return m, np.zeros(3)
    if pca is None:
        raise ValueError("PCA features need a fitted PcaModel")
    return pca.components, -pca.components @ pca.mean


# --------------------------------------------------------------------------- PCA

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_ratio: np.ndarray  # (k,), descending
    method: str = "fixed"

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, np.float64) - self.mean) @ self.components.T

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.components + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "components": self.components.tolist(),
                "explained_ratio": self.explained_ratio.tolist(), "method": self.method}

    @classmethod
    def from_dict(cls, d: dict) -> "PcaModel":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["components"], np.float64),
                   np.asarray(d["explained_ratio"], np.float64), d.get("method", "fixed"))


def minka_log_likelihood(spectrum: np.ndarray, rank: int, n_samples: int) -> float:
    """Laplace-approximated evidence for a ``rank``-dimensional probabilistic PCA."""
    d = len(spectrum)
    if not 1 <= rank < d:
        raise ValueError("rank must lie in [1, n_features)")
    eps = 1e-15
    pu = -rank * math.log(2.0)
    for i in range(1, rank + 1):
        pu += math.lgamma((d - i + 1) / 2.0) - math.log(math.pi) * (d - i + 1) / 2.0
    top = spectrum[:rank]
    if np.any(top <= 0):
        return -math.inf
    pl = -np.sum(np.log(top)) * n_samples / 2.0
    v = max(eps, float(np.sum(spectrum[rank:])) / (d - rank))
    pv = -math.log(v) * n_samples * (d - rank) / 2.0
    m = d * rank - rank * (rank + 1.0) / 2.0
    pp = math.log(2.0 * math.pi) * (m + rank) / 2.0
    filled = spectrum.astype(np.float64).copy()
    filled[rank:] = v
    pa = 0.0
    for i in range(rank):
        diff = spectrum[i] - spectrum[i + 1:]
        inv = 1.0 / filled[i + 1:] - 1.0 / filled[i]
        prod = diff * inv
        if np.any(prod <= 0):
            return -math.inf
        pa += float(np.sum(np.log(prod))) + (d - i - 1) * math.log(n_samples)
    return pu + pl + pv + pp - pa / 2.0 - rank * math.log(n_samples) / 2.0


def mle_rank(spectrum: np.ndarray, n_samples: int) -> int | None:
    """Dimensionality with the largest evidence; ``None`` when every rank is degenerate."""
    d = len(spectrum)
    best, best_ll = None, -math.inf
    for r in range(1, d):
        ll = minka_log_likelihood(spectrum, r, n_samples)
        if ll > best_ll:
            best, best_ll = r, ll
    return best


def pca_fit(data: np.ndarray, components: str | int = "mle", variance_fallback: float = 0.95) -> PcaModel:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs at least 2 samples")
    n, d = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order].T
    # deterministic sign: largest-magnitude entry of each component is positive
    flip = np.sign(vecs[np.arange(d), np.abs(vecs).argmax(axis=1)])
    vecs = vecs * np.where(flip == 0, 1.0, flip)[:, None]
    total = vals.sum()
    ratio = vals / total if total > 0 else np.zeros(d)
    method = "fixed"
    if components == "mle":
        spectrum = vals[:min(n, d)]
        k = mle_rank(spectrum, n) if len(spectrum) > 1 else None
        method = "mle"
        if k is None:
            k = int(np.searchsorted(np.cumsum(ratio), variance_fallback) + 1)
            method = "variance"
        if d == 1:
            k = 1
    else:
        k = int(components)
    k = max(1, min(k, d))
    return PcaModel(mean, vecs[:k].copy(), ratio[:k].copy(), method)


# --------------------------------------------------------------------------- decision tree

@dataclass
class DecisionTree:
    """CART tree in flat arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # leaf class
    proba: np.ndarray  # (nodes, classes)
    n_features: int
    max_depth: int | None = None
    min_leaf: int = 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, dep = stack.pop()
            best = max(best, dep)
            if self.feature[node] >= 0:
                stack += [(int(self.left[node]), dep + 1), (int(self.right[node]), dep + 1)]
        return best

    def predict_one(self, x) -> int:
        feature, threshold, left, right = self.feature, self.threshold, self.left, self.right
        node = 0
        while feature[node] >= 0:
            node = left[node] if x[feature[node]] <= threshold[node] else right[node]
        return int(self.value[node])

    def apply(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs)
        node = np.zeros(len(xs), dtype=np.int64)
        rows = np.arange(len(xs))
        active = self.feature[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            go_left = xs[r, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, xs: np.ndarray) -> np.ndarray:
        return self.value[self.apply(xs)].astype(np.int64)

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "value": self.value.tolist(),
                "proba": self.proba.tolist(), "n_features": self.n_features,
                "max_depth": self.max_depth, "min_leaf": self.min_leaf}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(np.asarray(d["feature"], np.int32), np.asarray(d["threshold"], np.float64),
                   np.asarray(d["left"], np.int32), np.asarray(d["right"], np.int32),
                   np.asarray(d["value"], np.int32), np.asarray(d["proba"], np.float64),
                   d["n_features"], d.get("max_depth"), d.get("min_leaf", 1))


def _best_split(x: np.ndarray, y: np.ndarray, n_classes: int, min_leaf: int):
    """Best (feature, threshold, position) by Gini; exact ties keep the lowest feature, then threshold.

    Minimising weighted Gini is maximising ``sum(cl**2)/nl + sum(cr**2)/nr``,
    compared as exact fractions so ties are genuine ties.
    """
    n, d = x.shape
    best = None  # (score Fraction, feature, threshold)
    onehot = np.eye(n_classes, dtype=np.int64)[y]
    total = onehot.sum(axis=0)
    for f in range(d):
        order = np.argsort(x[:, f], kind="stable")
        vals = x[order, f]
        cl = np.cumsum(onehot[order], axis=0)[:-1]  # counts left of cut after position i
        nl = np.arange(1, n)
        valid = (vals[:-1] < vals[1:]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not valid.any():
            continue
        cr = total - cl
        sl = (cl * cl).sum(axis=1)
        sr = (cr * cr).sum(axis=1)
        nr = n - nl
        score = sl / nl + sr / nr
        score = np.where(valid, score, -np.inf)
        top = score.max()
        for i in np.flatnonzero(score >= top - 1e-9 * max(1.0, abs(top))):
            exact = Fraction(int(sl[i]), int(nl[i])) + Fraction(int(sr[i]), int(nr[i]))
            thr = (float(vals[i]) + float(vals[i + 1])) / 2.0
            if best is None or exact > best[0]:
                best = (exact, f, thr)
    return best


def dt_fit(features: np.ndarray, labels: np.ndarray, max_depth: int | None = None, min_leaf: int = 1,
           n_classes: int | None = None) -> DecisionTree:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("empty training data")
    if len(y) != len(x):
        raise ValueError("features and labels differ in length")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    n_classes = int(n_classes or (y.max() + 1))
    feat, thr, left, right, val, proba = [], [], [], [], [], []

    def new_node(idx):
        counts = np.bincount(y[idx], minlength=n_classes)
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        val.append(int(counts.argmax()))
        proba.append(counts / counts.sum())
        return len(feat) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yy = y[idx]
        if (max_depth is not None and depth >= max_depth) or np.all(yy == yy[0]) or len(idx) < 2 * min_leaf:
            continue
        split = _best_split(x[idx], yy, n_classes, min_leaf)
        if split is None:
            continue
        _, f, t = split
        go_left = x[idx, f] <= t
        feat[node], thr[node] = f, t
        li, ri = idx[go_left], idx[~go_left]
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so nodes are numbered in pre-order, left subtree first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return DecisionTree(np.asarray(feat, np.int32), np.asarray(thr, np.float64),
                        np.asarray(left, np.int32), np.asarray(right, np.int32),
                        np.asarray(val, np.int32), np.asarray(proba, np.float64),
                        x.shape[1], max_depth, min_leaf)


@dataclass
class IntTree:
    """Integer tree on ``uint8`` features: ``x <= floor(t)`` is ``x <= t`` for integer ``x``."""

    feature: np.ndarray
    threshold: np.ndarray  # int32
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        self._walker = kernels.TreeWalker(self.feature, self.threshold, self.left, self.right, self.value)

    def predict_one(self, x: np.ndarray) -> int:
        return self._walker.predict(x)

    def predict(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs)
        if xs.dtype != np.uint8:  # wider integer features (segment sums) take the numpy walk
            return self._walk(xs.astype(np.int64))
        return np.asarray(self._walker.predict_batch(np.ascontiguousarray(xs)), dtype=np.int64)

    def _walk(self, xs: np.ndarray) -> np.ndarray:
        node = np.zeros(len(xs), dtype=np.int64)
        rows = np.arange(len(xs))
        active = self.feature[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            go_left = xs[r, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node].astype(np.int64)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "IntTree":
        return cls(*(np.asarray(d[k], np.int32) for k in ("feature", "threshold", "left", "right", "value")))


def integerize_tree(tree: DecisionTree, lo: int = 0, hi: int = 255, scale=None) -> IntTree:
    """Floor thresholds; with ``scale`` the tree reads ``feature * scale`` integer sums instead."""
    internal = tree.feature >= 0
    raw = tree.threshold[internal]
    if raw.size and (raw.min() < lo or raw.max() > hi):
        raise ValueError(f"threshold outside the integer feature domain [{lo}, {hi}]")
    if scale is not None:
        raw = raw * np.asarray(scale, np.float64)[tree.feature[internal]]
    thr = np.zeros(tree.n_nodes, np.int32)
    thr[internal] = np.floor(raw).astype(np.int32)
    return IntTree(tree.feature.copy(), thr, tree.left.copy(), tree.right.copy(), tree.value.copy())


# --------------------------------------------------------------------------- KNN

@dataclass
class KNN:
    x: np.ndarray
    y: np.ndarray
    k: int = 5
    n_classes: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, np.float64)
        self.y = np.asarray(self.y, np.int64)
        if self.k < 1 or self.k > len(self.x):
            raise ValueError(f"k={self.k} must lie in [1, {len(self.x)}]")
        self.n_classes = int(self.n_classes or self.y.max() + 1)

    def predict(self, q: np.ndarray, chunk: int = 256) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, np.float64))
        out = np.empty(len(q), np.int64)
        for s in range(0, len(q), chunk):
            d2 = ((q[s:s + chunk, None, :] - self.x[None]) ** 2).sum(-1)
            near = np.argsort(d2, axis=1, kind="stable")[:, :self.k]  # distance ties: lowest index
            for r, idx in enumerate(near):
                out[s + r] = np.bincount(self.y[idx], minlength=self.n_classes).argmax()
        return out

    def predict_one(self, q) -> int:
        return int(self.predict(np.asarray(q)[None])[0])

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "y": self.y.tolist(), "k": self.k, "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "KNN":
        return cls(np.asarray(d["x"]), np.asarray(d["y"]), d["k"], d["n_classes"])


def knn_predict(train_x, train_y, query, k: int = 5) -> np.ndarray:
    return KNN(train_x, train_y, k).predict(query)


# --------------------------------------------------------------------------- linear SVM

@dataclass
class LinearSVM:
    """One-vs-rest hinge-loss SVM on standardised features."""

    w: np.ndarray  # (classes, d)
    b: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def decision(self, x: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(np.asarray(x, np.float64)) - self.mu) / self.sigma
        return z @ self.w.T + self.b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.decision(x).argmax(axis=1)

    def predict_one(self, x) -> int:
        return int(self.predict(np.asarray(x)[None])[0])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("w", "b", "mu", "sigma")}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSVM":
        return cls(*(np.asarray(d[k], np.float64) for k in ("w", "b", "mu", "sigma")))


def _hinge_fit(z: np.ndarray, t: np.ndarray, lam: float, iters: int) -> tuple[np.ndarray, float]:
    """Full-batch Pegasos subgradient steps on +-1 targets; returns the best iterate seen."""
    n, d = z.shape
    w, b = np.zeros(d), 0.0
    best = (math.inf, w.copy(), b)
    radius = 1.0 / math.sqrt(lam)
    for it in range(1, iters + 1):
        margin = t * (z @ w + b)
        obj = 0.5 * lam * float(w @ w) + float(np.maximum(0.0, 1.0 - margin).mean())
        if obj < best[0]:
            best = (obj, w.copy(), b)
        act = margin < 1.0
        if not act.any() and lam * float(w @ w) == 0.0:
            break
        gw = lam * w - (t[act, None] * z[act]).sum(axis=0) / n
        gb = -float(t[act].sum()) / n
        eta = 1.0 / (lam * (it + 1))
        w = w - eta * gw
        b = b - eta * gb
        norm = float(np.linalg.norm(w))
        if norm > radius:
            w *= radius / norm
    margin = t * (z @ w + b)
    obj = 0.5 * lam * float(w @ w) + float(np.maximum(0.0, 1.0 - margin).mean())
    if obj < best[0]:
        best = (obj, w, b)
    return best[1], best[2]


def svm_fit(features: np.ndarray, labels: np.ndarray, lam: float = 1e-3, iters: int = 2000,
            n_classes: int | None = None) -> LinearSVM:
    x = np.asarray(features, np.float64)
    y = np.asarray(labels, np.int64)
    if len(x) == 0:
        raise ValueError("empty training data")
    n_classes = int(n_classes or y.max() + 1)
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    sigma = np.where(sigma > 1e-12, sigma, 1.0)
    z = (x - mu) / sigma
    if n_classes == 2:
        w, b = _hinge_fit(z, np.where(y == 1, 1.0, -1.0), lam, iters)
        W, B = np.stack([-w, w]), np.array([-b, b])
    else:
        rows = [_hinge_fit(z, np.where(y == c, 1.0, -1.0), lam, iters) for c in range(n_classes)]
        W, B = np.stack([r[0] for r in rows]), np.array([r[1] for r in rows])
    return LinearSVM(W, B, mu, sigma)


@dataclass
class IntSVM:
    """SVM with features and standardisation folded into int16 weights on raw pixels."""

    w: np.ndarray  # int16 (classes, width)
    b: np.ndarray  # int64
    shift: int

    def predict(self, pixels: np.ndarray) -> np.ndarray:
        px = np.atleast_2d(np.asarray(pixels)).astype(np.int64)
        return (px @ self.w.astype(np.int64).T + self.b).argmax(axis=1)

    def predict_one(self, pixels) -> int:
        return int(self.predict(np.asarray(pixels)[None])[0])

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "b": self.b.tolist(), "shift": self.shift}

    @classmethod
    def from_dict(cls, d: dict) -> "IntSVM":
        return cls(np.asarray(d["w"], np.int16), np.asarray(d["b"], np.int64), int(d["shift"]))


def integerize_svm(svm: LinearSVM, spec: FeatureSpec, width: int, pca: PcaModel | None = None) -> IntSVM:
    a, c = feature_matrix(spec, width, pca)
    ws = svm.w / svm.sigma
    m = ws @ a  # (classes, width)
    e = ws @ (c - svm.mu) + svm.b
    peak = float(np.abs(m).max(initial=0.0))
    if peak == 0.0:
        shift = 0
    else:
        shift = int(math.floor(math.log2(32767.0 / peak)))
        while peak * 2.0**shift > 32767.0:
            shift -= 1
    wq = np.clip(np.rint(m * 2.0**shift), -32768, 32767).astype(np.int16)
    bq = np.rint(e * 2.0**shift).astype(np.int64)
    return IntSVM(wq, bq, shift)


# --------------------------------------------------------------------------- tiny CNN

@dataclass
class CnnBinary:
    model: FloatModel

    def predict(self, pixels: np.ndarray) -> np.ndarray:
        return predict(self.model, pixels)

    def predict_one(self, pixels) -> int:
        return int(self.predict(np.asarray(pixels)[None])[0])

    def to_dict(self) -> dict:
        return {"spec": self.model.spec.to_dict(),
                "params": [None if p is None else [p[0].tolist(), p[1].tolist()] for p in self.model.params]}

    @classmethod
    def from_dict(cls, d: dict) -> "CnnBinary":
        spec = ModelSpec.from_dict(d["spec"])
        params = [None if p is None else (np.asarray(p[0], np.float32), np.asarray(p[1], np.float32))
                  for p in d["params"]]
        return cls(FloatModel(spec, params))


def cnn_binary_fit(pixels: np.ndarray, labels: np.ndarray, epochs: int = 30, seed: int = 0,
                   n_classes: int = 2) -> CnnBinary:
    """Tiny one-conv net; brightness augmentation is off because brightness is the signal."""
    px = np.asarray(pixels, np.uint8)
    y = np.asarray(labels, np.int64)
    spec = model_spec("tinycnn", num_classes=n_classes, width=px.shape[1])
    ds = Dataset(px, np.zeros(len(y), np.uint8), np.zeros(len(y), np.uint8), width=px.shape[1])
    cfg = TrainConfig(epochs=epochs, batch=32, lr=0.05, momentum=0.9,
                      augment=Augmentation(shift=4, brightness=(1.0, 1.0), noise_sigma=2.0), seed=seed)
    model, _ = train(spec, ds, None, cfg, labels=y)
    return CnnBinary(model)


# --------------------------------------------------------------------------- classifier wrapper

CLASSIFIERS = ("dt", "knn", "svm", "cnn")


@dataclass
class Classifier:
    """A menu entry: feature extraction plus one fitted model."""

    kind: str
    features: FeatureSpec
    model: Any
    pca: PcaModel | None = None
    integer: bool = False

    def _input(self, px: np.ndarray) -> np.ndarray:
        if self.kind == "cnn" or (self.integer and self.kind == "svm"):
            return px
        if self.integer:  # integer tree: raw uint8 pixels or per-third pixel sums
            if self.features.kind == "none":
                return px
            return thirds_sums(px)
        return extract_batch(self.features, px, self.pca)

    def predict(self, pixels: np.ndarray) -> np.ndarray:
        px = np.atleast_2d(np.asarray(pixels, np.uint8))
        return np.asarray(self.model.predict(self._input(px)), dtype=np.int64)

    def predict_one(self, img) -> int:
        px = _pixels(img)
        if self.integer and self.kind == "dt" and self.features.kind == "none":
            return self.model.predict_one(px)
        if self.kind == "dt" and not self.integer:
            return self.model.predict_one(extract(self.features, px, self.pca))
        return int(self.predict(px[None])[0])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "features": str(self.features), "integer": self.integer,
                "pca": None if self.pca is None else self.pca.to_dict(), "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        kind, integer = d["kind"], d.get("integer", False)
        loaders = {("dt", False): DecisionTree, ("dt", True): IntTree, ("knn", False): KNN,
                   ("svm", False): LinearSVM, ("svm", True): IntSVM, ("cnn", False): CnnBinary}
        if (kind, integer) not in loaders:
            raise ValueError(f"unknown classifier {kind!r} (integer={integer})")
        model = loaders[(kind, integer)].from_dict(d["model"])
        pca = PcaModel.from_dict(d["pca"]) if d.get("pca") else None
        return cls(kind, FeatureSpec.parse(d["features"]), model, pca, integer)


def fit_classifier(kind: str, features: FeatureSpec | str, pixels: np.ndarray, labels: np.ndarray,
                   integer: bool = False, seed: int = 0, max_depth: int | None = 8, min_leaf: int = 1,
                   k: int = 5, svm_lambda: float = 1e-3, svm_iters: int = 2000,
                   cnn_epochs: int = 30) -> Classifier:
    fs = FeatureSpec.parse(features) if isinstance(features, str) else features
    px = np.asarray(pixels, np.uint8)
    y = np.asarray(labels, np.int64)
    if len(px) == 0:
        raise ValueError("empty training data")
    n_classes = max(2, int(y.max()) + 1)
    pca = pca_fit(px, fs.components) if fs.kind == "pca" else None
    feats = extract_batch(fs, px, pca)
    if kind == "dt":
        tree = dt_fit(feats, y, max_depth, min_leaf, n_classes)
        if integer:
            if fs.kind == "pca":
                raise ValueError("PCA projections are not in the integer feature domain")
            return Classifier("dt", fs, _int_tree(tree, fs, px.shape[1]), pca, True)
        return Classifier("dt", fs, tree, pca)
    if kind == "knn":
        if integer:
            raise ValueError("KNN has no integer variant")
        return Classifier("knn", fs, KNN(feats, y, k, n_classes), pca)
    if kind == "svm":
        svm = svm_fit(feats, y, svm_lambda, svm_iters, n_classes)
        if integer:
            return Classifier("svm", fs, integerize_svm(svm, fs, px.shape[1], pca), pca, True)
        return Classifier("svm", fs, svm, pca)
    if kind == "cnn":
        if fs.kind != "none":
            raise ValueError("the CNN classifier consumes raw pixels only")
        return Classifier("cnn", fs, cnn_binary_fit(px, y, cnn_epochs, seed, n_classes))
    raise ValueError(f"unknown classifier {kind!r}; choose from {CLASSIFIERS}")


def _int_tree(tree: DecisionTree, fs: FeatureSpec, width: int) -> IntTree:
    return integerize_tree(tree, scale=thirds_sizes(width) if fs.kind == "mean" else None)


def integerize(clf: Classifier, train_pixels: np.ndarray | None = None) -> Classifier:
    """Integer variant of a fitted float DT or SVM classifier."""
    if clf.integer:
        return clf
    if clf.kind == "dt":
        if clf.features.kind == "pca":
            raise ValueError("PCA projections are not in the integer feature domain")
        if clf.features.kind == "mean" and train_pixels is None:
            raise ValueError("image width unknown; pass train_pixels")
        width = clf.model.n_features if clf.features.kind == "none" else np.asarray(train_pixels).shape[1]
        return Classifier("dt", clf.features, _int_tree(clf.model, clf.features, width), clf.pca, True)
    if clf.kind == "svm":
        width = clf.pca.mean.shape[0] if clf.pca is not None else (
            clf.model.mu.shape[0] if clf.features.kind == "none" else None)
        if width is None:
            if train_pixels is None:
                raise ValueError("image width unknown; pass train_pixels")
            width = np.asarray(train_pixels).shape[1]
        return Classifier("svm", clf.features, integerize_svm(clf.model, clf.features, width, clf.pca),
                          clf.pca, True)
    raise ValueError(f"{clf.kind} has no integer variant")


# --------------------------------------------------------------------------- weight-set chain

@dataclass
class ChainStage:
    classifier: Classifier
    accepts: str


@dataclass
class ChainTrace:
    """Per-call instrumentation: how many times each stage ran."""

    evaluations: list = field(default_factory=list)

    def hit(self, stage: int, n: int = 1) -> None:
        while len(self.evaluations) <= stage:
            self.evaluations.append(0)
        self.evaluations[stage] += n

    def count(self, stage: int) -> int:
        return self.evaluations[stage] if stage < len(self.evaluations) else 0


def _fuse_chain(trees: Sequence[IntTree]) -> IntTree:
    """One tree equal to the chain: stage i's 0-leaves jump to stage i+1's root; leaf value = stage index."""
    feature, threshold, left, right, value = [], [], [], [], []
    roots: dict[int, int] = {}

    def new(f=-1, t=0, v=0):
        for a, x in ((feature, f), (threshold, t), (left, -1), (right, -1), (value, v)):
            a.append(x)
        return len(feature) - 1

    def root(i):
        if i not in roots:
            roots[i] = new(v=i) if i == len(trees) else emit(i, 0)
        return roots[i]

    def emit(i, node):
        t = trees[i]
        if t.feature[node] < 0:
            return new(v=i) if t.value[node] == 1 else root(i + 1)
        idx = new(int(t.feature[node]), int(t.threshold[node]))
        left[idx] = emit(i, int(t.left[node]))
        right[idx] = emit(i, int(t.right[node]))
        return idx

    root(0)
    return IntTree(*(np.asarray(a, np.int32) for a in (feature, threshold, left, right, value)))


@dataclass
class BinaryChain:
    stages: list
    fallback: str

    def __post_init__(self):
        # integer raw-pixel trees collapse into a single compiled walk
        self._ids = np.array([s.accepts for s in self.stages] + [self.fallback], dtype=object)
        self._fused = None
        if self.stages and all(s.classifier.kind == "dt" and s.classifier.integer
                               and s.classifier.features.kind == "none" for s in self.stages):
            self._fused = _fuse_chain([s.classifier.model for s in self.stages])

    def select(self, img, trace: ChainTrace | None = None) -> str:
        px = _pixels(img)
        if self._fused is not None and trace is None:
            return self._ids[self._fused.predict_one(px)]
        for i, st in enumerate(self.stages):
            if trace is not None:
                trace.hit(i)
            if st.classifier.predict_one(px) == 1:
                return st.accepts
        return self.fallback

    def select_batch(self, pixels: np.ndarray, trace: ChainTrace | None = None) -> np.ndarray:
        px = np.atleast_2d(np.asarray(pixels, np.uint8))
        if self._fused is not None and trace is None:
            return self._ids[self._fused.predict(px)]
        out = np.full(len(px), self.fallback, dtype=object)
        pending = np.arange(len(px))
        for i, st in enumerate(self.stages):
            if len(pending) == 0:
                break
            if trace is not None:
                trace.hit(i, len(pending))
            acc = st.classifier.predict(px[pending]) == 1
            out[pending[acc]] = st.accepts
            pending = pending[~acc]
        return out

    def to_dict(self) -> dict:
        return {"format": "tinydrive.chain", "version": 1, "fallback": self.fallback,
                "stages": [{"accepts": s.accepts, "classifier": s.classifier.to_dict()} for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "BinaryChain":
        if d.get("format") != "tinydrive.chain":
            raise ValueError("not a chain file")
        return cls([ChainStage(Classifier.from_dict(s["classifier"]), s["accepts"]) for s in d["stages"]],
                   d["fallback"])


def chain_fit(test_comb_train: Dataset, clf: str = "dt", features: str | FeatureSpec = "none",
              integer: bool = True, seed: int = 0, **params) -> BinaryChain:
    """Stage ``i`` separates origin ``i`` from all later origins; the last origin is the fallback."""
    present = [Origin(int(o)) for o in sorted(np.unique(test_comb_train.origins))]
    present = [o for o in present if o in ORIGIN_WEIGHTS]
    if len(present) < 2:
        raise ValueError("the chain needs at least two origins")
    stages = []
    mask = np.isin(test_comb_train.origins, [int(o) for o in present])
    for i, o in enumerate(present[:-1]):
        px = test_comb_train.pixels[mask]
        y = (test_comb_train.origins[mask] == int(o)).astype(np.int64)
        c = fit_classifier(clf, features, px, y, integer=integer, seed=seed + i, **params)
        stages.append(ChainStage(c, ORIGIN_WEIGHTS[o]))
        mask &= test_comb_train.origins != int(o)
    return BinaryChain(stages, ORIGIN_WEIGHTS[present[-1]])


def selection_accuracy(chain: BinaryChain, ds: Dataset) -> float:
    want = np.array([ORIGIN_WEIGHTS.get(Origin(int(o)), "?") for o in ds.origins], dtype=object)
    return float(np.mean(chain.select_batch(ds.pixels) == want)) if len(ds) else 0.0


# --------------------------------------------------------------------------- registry + swap

class WeightSetRegistry(dict):
    """Weight-set id to QuantModel; every entry must share one architecture."""

    def __init__(self, models: dict | None = None):
        super().__init__()
        for k, v in (models or {}).items():
            self[k] = v

    def __setitem__(self, key: str, qm: QuantModel) -> None:
        for other in self.values():
            if other.spec.to_dict() != qm.spec.to_dict():
                raise ValueError("registry entries must share one model spec (weights swap only)")
        super().__setitem__(key, qm)

    @property
    def spec(self) -> ModelSpec | None:
        return next(iter(self.values())).spec if self else None


def select_and_infer(chain: BinaryChain, registry: WeightSetRegistry, img, fast: bool = True,
                     trace: ChainTrace | None = None) -> tuple[str, int]:
    wid = chain.select(img, trace)
    if wid not in registry:
        raise ValueError(f"registry has no weight set {wid!r}")
    _, cls = (infer_fast if fast else infer_ref)(registry[wid], _pixels(img))
    return wid, cls


def swap_predict(chain: BinaryChain, registry: WeightSetRegistry, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(selected ids, predicted classes) for a batch."""
    px = np.atleast_2d(np.asarray(pixels, np.uint8))
    wids = chain.select_batch(px)
    missing = set(wids) - set(registry)
    if missing:
        raise ValueError(f"registry has no weight set(s) {sorted(missing)}")
    cls = np.array([infer_fast(registry[w], p)[1] for w, p in zip(wids, px)], dtype=np.int64)
    return wids, cls


# --------------------------------------------------------------------------- cascade

@dataclass
class CascadeRouter:
    """Label 1 = the small model suffices.  ``classifier is None`` means a constant router."""

    classifier: Classifier | None
    small: str
    large: str
    constant: int | None = None

    def use_small(self, img) -> bool:
        if self.classifier is None:
            return bool(self.constant)
        return self.classifier.predict_one(_pixels(img)) == 1

    def use_small_batch(self, pixels: np.ndarray) -> np.ndarray:
        px = np.atleast_2d(np.asarray(pixels, np.uint8))
        if self.classifier is None:
            return np.full(len(px), bool(self.constant))
        return self.classifier.predict(px) == 1

    def to_dict(self) -> dict:
        return {"format": "tinydrive.cascade", "version": 1, "small": self.small, "large": self.large,
                "constant": self.constant,
                "classifier": None if self.classifier is None else self.classifier.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeRouter":
        c = Classifier.from_dict(d["classifier"]) if d.get("classifier") else None
        return cls(c, d["small"], d["large"], d.get("constant"))


def cascade_fit(test_comb: Dataset, small_model: QuantModel, large_model: QuantModel, clf: str = "dt",
                features: str | FeatureSpec = "none", integer: bool = True, seed: int = 0,
                **params) -> CascadeRouter:
    if len(test_comb) == 0:
        raise ValueError("empty routing set")
    pred = np.array([infer_fast(small_model, p)[1] for p in test_comb.pixels])
    ok = (pred == test_comb.labels).astype(np.int64)
    names = (small_model.spec.name, large_model.spec.name)
    if ok.min() == ok.max():  # small model always (or never) right: nothing to learn
        return CascadeRouter(None, *names, constant=int(ok[0]))
    c = fit_classifier(clf, features, test_comb.pixels, ok, integer=integer, seed=seed, **params)
    return CascadeRouter(c, *names)


def cascade_infer(router: CascadeRouter, small_model: QuantModel, large_model: QuantModel, img) -> tuple[int, bool]:
    """(class, whether the small model ran)."""
    small = router.use_small(img)
    _, cls = infer_fast(small_model if small else large_model, _pixels(img))
    return cls, small


def cascade_predict(router: CascadeRouter, small_model: QuantModel, large_model: QuantModel,
                    pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    px = np.atleast_2d(np.asarray(pixels, np.uint8))
    small = router.use_small_batch(px)
    cls = np.array([infer_fast(small_model if s else large_model, p)[1] for s, p in zip(small, px)],
                   dtype=np.int64)
    return cls, small
