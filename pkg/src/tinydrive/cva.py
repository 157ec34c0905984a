"""Derivative-based computer-vision expert (the imitation-learning teacher).

The classifier only works on a stream: a frame whose derivative never
reaches the edge threshold falls back on the recent decision history.
"""

from __future__ import annotations

import enum
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .simenv import LineImage, TrackState


class Polarity(enum.IntEnum):
    FALLING = -1  # bright -> dark, entering a line band
    RISING = 1


class Confidence(enum.Enum):
    LOW = "low"
    HIGH = "high"


@dataclass(frozen=True)
class Edge:
    position: int
    polarity: Polarity
    magnitude: int


@dataclass(frozen=True)
class CvaConfig:
    threshold: int = 24
    margin: float = 0.11  # band-centre displacement (fraction of width) that means a turn
    history: int = 4
    narrow_band: float = 0.0625  # bands narrower than this fraction of width are markers
    dip_ratio: float = 0.35
    dip_window: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "CvaConfig":
        keys = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in d.items() if k in keys})


@dataclass
class CvaState:
    config: CvaConfig = field(default_factory=CvaConfig)
    width: int = 128
    history: deque = field(default_factory=deque)
    last_decision: TrackState = TrackState.NO_TRACK

    def __post_init__(self):
        self.history = deque(self.history, maxlen=self.config.history)


def derivative(img: LineImage | np.ndarray) -> np.ndarray:
    px = img.pixels if isinstance(img, LineImage) else np.asarray(img)
    return np.diff(px.astype(np.int16))


def detect_edges(deriv: np.ndarray, threshold: int) -> list[Edge]:
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    d = np.asarray(deriv, dtype=np.int32)
    mag = np.abs(d)
    n = len(d)
    if n == 0:
        return []
    left = np.concatenate([[0], mag[:-1]])
    right = np.concatenate([mag[1:], [0]])
    same_l = np.concatenate([[False], np.sign(d[:-1]) == np.sign(d[1:])])
    same_r = np.concatenate([np.sign(d[:-1]) == np.sign(d[1:]), [False]])
    # local extremum of magnitude among same-signed neighbours
    peak = (mag >= threshold) & (~same_l | (mag >= left)) & (~same_r | (mag >= right))
    cand = np.flatnonzero(peak)
    order = sorted(cand.tolist(), key=lambda i: (-mag[i], i))
    kept: list[int] = []
    for i in order:
        # suppression is per polarity so a narrow band keeps both of its edges
        if all(abs(i - j) >= 3 or (d[i] < 0) != (d[j] < 0) for j in kept):
            kept.append(i)
    kept.sort()
    return [Edge(int(i), Polarity.FALLING if d[i] < 0 else Polarity.RISING, int(d[i])) for i in kept]


def bands_from_edges(edges: list[Edge]) -> list[tuple[float, float]] | None:
    """Pair each falling edge with the next rising edge; ``None`` if they do not pair up."""
    bands = []
    i = 0
    while i < len(edges):
        if (edges[i].polarity is Polarity.FALLING and i + 1 < len(edges)
                and edges[i + 1].polarity is Polarity.RISING):
            a, b = edges[i].position, edges[i + 1].position
            bands.append(((a + b) / 2.0 + 1.0, float(b - a)))
            i += 2
        else:
            return None
    return bands


def _classify_bands(bands, width: int, cfg: CvaConfig) -> TrackState | None:
    mid = width / 2.0
    margin = cfg.margin * width
    narrow = cfg.narrow_band * width
    if len(bands) == 0:
        return TrackState.NO_TRACK
    if len(bands) == 1:
        center, _ = bands[0]
        if center < mid - margin:
            return TrackState.TURN_LEFT
        if center > mid + margin:
            return TrackState.TURN_RIGHT
        return TrackState.GO_STRAIGHT
    if len(bands) == 2:
        (c1, w1), (c2, w2) = bands
        n1, n2 = w1 < narrow, w2 < narrow
        if not n1 and not n2 and c1 < mid and c2 > mid:
            return TrackState.CROSSING_STREETS
        if n1 and not n2:
            return TrackState.START_SPEED_LIMIT
        if n2 and not n1:
            return TrackState.STOP_SPEED_LIMIT
    return None


def has_line_dip(px: np.ndarray, cfg: CvaConfig) -> bool:
    """True when some pixel is much darker than its bright neighbourhood (a line, not a shadow)."""
    p = px.astype(np.float64)
    smooth = np.convolve(p, np.ones(3) / 3.0, mode="same")
    smooth[0], smooth[-1] = p[0], p[-1]
    w = cfg.dip_window
    padded = np.pad(smooth, w, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, 2 * w + 1)
    local_max = win.max(axis=1)
    return bool(np.any((local_max > 8) & (smooth < cfg.dip_ratio * local_max)))


def _majority(history) -> TrackState:
    counts = Counter(history)
    best = max(counts.values())
    for decision in reversed(history):  # ties go to the most recent decision
        if counts[decision] == best:
            return decision
    raise AssertionError("unreachable")


def cva_step(state: CvaState, img: LineImage) -> tuple[TrackState, Confidence, CvaState]:
    """Classify the next frame of a stream; ``state`` is updated in place and returned."""
    px = img.pixels
    if px.shape[0] != state.width:
        raise ValueError(f"frame width {px.shape[0]} does not match CVA width {state.width}")
    cfg = state.config
    d = derivative(px)
    decision = None
    if np.abs(d).max(initial=0) >= cfg.threshold:
        bands = bands_from_edges(detect_edges(d, cfg.threshold))
        if bands is not None:
            decision = _classify_bands(bands, state.width, cfg)
    if decision is not None:
        conf = Confidence.HIGH
        state.history.append(decision)
    else:
        conf = Confidence.LOW
        if not has_line_dip(px, cfg):
            decision = TrackState.NO_TRACK
        elif state.history:
            decision = _majority(state.history)
        else:
            decision = TrackState.NO_TRACK
    state.last_decision = decision
    return decision, conf, state


def new_state(width: int = 128, config: CvaConfig | None = None) -> CvaState:
    return CvaState(config or CvaConfig(), width)


def run_stream(frames, width: int = 128, config: CvaConfig | None = None):
    """Run one fresh stream over ``frames``; returns (decisions, confidences)."""
    st = new_state(width, config)
    out, conf = [], []
    for f in frames:
        dec, c, st = cva_step(st, f if isinstance(f, LineImage) else LineImage(np.asarray(f)))
        out.append(dec)
        conf.append(c)
    return out, conf
