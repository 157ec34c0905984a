"""Synthetic line-scan track generator.

Geometry contract (all positions are fractions of the camera width ``W``):

* background (track surface) reflectance 0.9, line reflectance 0.1;
* every band edge is a linear ramp ``EDGE_RAMP`` pixels wide (optical blur);
* ``GO_STRAIGHT``       one main band (width 0.094 W) centred at 0.5 W +- 0.06 W
* ``TURN_LEFT``         one main band centred in [0.18 W, 0.34 W]
* ``TURN_RIGHT``        one main band centred in [0.66 W, 0.82 W]
* ``CROSSING_STREETS``  two main bands centred at 0.5 W -+ [0.22 W, 0.28 W]
* ``START_SPEED_LIMIT`` centred main band + narrow marker (0.031 W) in [0.10 W, 0.20 W]
* ``STOP_SPEED_LIMIT``  centred main band + narrow marker in [0.80 W, 0.90 W]
* ``NO_TRACK``          no band at all

Shadows are a single multiplicative dim band with soft ramps, so a shadow
boundary never produces a derivative comparable to a line edge.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BACKGROUND = 0.9
LINE = 0.1
EDGE_RAMP = 3.0
SHADOW_RAMP = 12.0
MAIN_WIDTH = 0.094
MARKER_WIDTH = 0.031


class TrackState(enum.IntEnum):
    GO_STRAIGHT = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    CROSSING_STREETS = 3
    START_SPEED_LIMIT = 4
    STOP_SPEED_LIMIT = 5
    NO_TRACK = 6


NUM_STATES = len(TrackState)


class Origin(enum.IntEnum):
    D20 = 0
    D15 = 1
    D10 = 2
    COLLECTED = 3

    @property
    def tag(self) -> str:
        return {0: "D2.0", 1: "D1.5", 2: "D1.0", 3: "collected"}[int(self)]

    @classmethod
    def from_tag(cls, tag: str) -> "Origin":
        for o in cls:
            if o.tag == tag:
                return o
        raise ValueError(f"unknown origin tag {tag!r}")

    @classmethod
    def for_exposure(cls, acquisition_ms: float) -> "Origin":
        table = {2.0: cls.D20, 1.5: cls.D15, 1.0: cls.D10}
        return table.get(float(acquisition_ms), cls.COLLECTED)


@dataclass(frozen=True)
class CameraConfig:
    width: int = 128
    acquisition_ms: float = 2.0
    gain: float = 1.0
    noise_sigma: float = 2.0

    def __post_init__(self):
        if self.width < 16:
            raise ValueError("camera width must be >= 16")
        if self.acquisition_ms <= 0:
            raise ValueError("acquisition_ms must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def replace(self, **kw) -> "CameraConfig":
        return CameraConfig(**{**asdict(self), **kw})


@dataclass(frozen=True)
class LightingProfile:
    ambient: float = 0.8
    shadow_prob: float = 0.3
    shadow_depth: float = 0.45
    global_jitter: tuple[float, float] = (0.85, 1.15)

    def __post_init__(self):
        if not 0.0 <= self.ambient <= 1.0:
            raise ValueError("ambient must lie in [0, 1]")
        if not 0.0 <= self.shadow_prob <= 1.0:
            raise ValueError("shadow_prob must lie in [0, 1]")
        if not 0.0 < self.shadow_depth <= 1.0:
            raise ValueError("shadow_depth must lie in (0, 1]")
        lo, hi = self.global_jitter
        if lo <= 0 or hi < lo:
            raise ValueError("global_jitter must be a positive (lo, hi) range")
        object.__setattr__(self, "global_jitter", (float(lo), float(hi)))

    def replace(self, **kw) -> "LightingProfile":
        return LightingProfile(**{**asdict(self), **kw})


CLEAR = LightingProfile(ambient=0.8, shadow_prob=0.0, shadow_depth=1.0, global_jitter=(1.0, 1.0))
TRACK = LightingProfile()
# final closed-loop phase: widened jitter, more frequent shadows
ALTERED = LightingProfile(ambient=0.8, shadow_prob=0.6, shadow_depth=0.35, global_jitter=(0.6, 1.3))


@dataclass(frozen=True)
class LineImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 1:
            raise ValueError("LineImage pixels must be a 1-D uint8 array")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[0]

    def contrast(self) -> int:
        return int(self.pixels.max()) - int(self.pixels.min())


@dataclass(frozen=True)
class Scene:
    """One realisation of track geometry, shadow and global illumination."""

    state: TrackState
    reflectance: np.ndarray  # geometry(state, x) in [0, 1]
    shadow: np.ndarray  # multiplicative, in (0, 1]
    jitter: float


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _band_darkness(x: np.ndarray, center: float, width: float, ramp: float) -> np.ndarray:
    half = width / 2.0
    return np.clip((half + ramp / 2.0 - np.abs(x - center)) / ramp, 0.0, 1.0)


def band_layout(state: TrackState, width: int, rng: np.random.Generator) -> list[tuple[float, float]]:
    """(centre, band width) pairs in pixels for one draw of ``state``."""
    w = float(width)
    main = MAIN_WIDTH * w
    marker = max(MARKER_WIDTH * w, 2.0)
    u = rng.uniform
    state = TrackState(state)
    if state is TrackState.GO_STRAIGHT:
        return [(w * (0.5 + u(-0.06, 0.06)), main)]
    if state is TrackState.TURN_LEFT:
        return [(w * u(0.18, 0.34), main)]
    if state is TrackState.TURN_RIGHT:
        return [(w * u(0.66, 0.82), main)]
    if state is TrackState.CROSSING_STREETS:
        return [(w * (0.5 - u(0.22, 0.28)), main), (w * (0.5 + u(0.22, 0.28)), main)]
    if state is TrackState.START_SPEED_LIMIT:
        return [(w * u(0.10, 0.20), marker), (w * (0.5 + u(-0.04, 0.04)), main)]
    if state is TrackState.STOP_SPEED_LIMIT:
        return [(w * (0.5 + u(-0.04, 0.04)), main), (w * u(0.80, 0.90), marker)]
    return []


def geometry(state: TrackState, width: int, rng: np.random.Generator) -> np.ndarray:
    x = np.arange(width, dtype=np.float64) + 0.5
    dark = np.zeros(width)
    for center, bw in band_layout(state, width, rng):
        dark = np.maximum(dark, _band_darkness(x, center, bw, EDGE_RAMP))
    return BACKGROUND - (BACKGROUND - LINE) * dark


def draw_scene(state: TrackState, width: int, light: LightingProfile, seed) -> Scene:
    rng = _rng(seed)
    refl = geometry(state, width, rng)
    jitter = float(rng.uniform(*light.global_jitter))
    shadow = np.ones(width)
    if rng.random() < light.shadow_prob:
        sw = rng.uniform(0.2, 0.6) * width
        sc = rng.uniform(0.0, 1.0) * width
        x = np.arange(width) + 0.5
        inside = _band_darkness(x, sc, sw, SHADOW_RAMP)
        shadow = 1.0 - (1.0 - light.shadow_depth) * inside
    return Scene(TrackState(state), refl, shadow, jitter)


def expose(scene: Scene, cam: CameraConfig, light: LightingProfile, seed) -> LineImage:
    if scene.reflectance.shape[0] != cam.width:
        raise ValueError("scene width does not match camera width")
    rng = _rng(seed)
    level = 255.0 * light.ambient * scene.jitter * (cam.acquisition_ms / 2.0) * cam.gain
    signal = level * scene.reflectance * scene.shadow
    if cam.noise_sigma > 0:
        signal = signal + rng.normal(0.0, cam.noise_sigma, size=cam.width)
    return LineImage(np.clip(np.rint(signal), 0, 255).astype(np.uint8))


def _child_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    if isinstance(seed, np.random.SeedSequence):
        return seed.spawn(n)
    if isinstance(seed, np.random.Generator):
        return [np.random.SeedSequence(int(s)) for s in seed.integers(0, 2**63, size=n)]
    return np.random.SeedSequence(seed).spawn(n)


def render_scene(state: TrackState, cam: CameraConfig, light: LightingProfile, seed) -> LineImage:
    scene_seed, noise_seed = _child_seeds(seed, 2)
    scene = draw_scene(state, cam.width, light, np.random.default_rng(scene_seed))
    return expose(scene, cam, light, np.random.default_rng(noise_seed))


def render_dual(state: TrackState, cam_expert: CameraConfig, cam_learner: CameraConfig,
                light: LightingProfile, seed) -> tuple[LineImage, LineImage]:
    """Expert and learner frames of one scene; only exposure and noise differ."""
    if cam_expert.width != cam_learner.width:
        raise ValueError("expert and learner cameras must share the same width")
    scene_seed, noise_seed = _child_seeds(seed, 2)
    scene = draw_scene(state, cam_expert.width, light, np.random.default_rng(scene_seed))
    if cam_expert == cam_learner:
        img = expose(scene, cam_expert, light, np.random.default_rng(noise_seed))
        return img, img
    e_seed, l_seed = noise_seed.spawn(2)
    return (expose(scene, cam_expert, light, np.random.default_rng(e_seed)),
            expose(scene, cam_learner, light, np.random.default_rng(l_seed)))


# --------------------------------------------------------------------------- datasets

SPLIT_TRAIN, SPLIT_TEST = "train", "test"
_SPLIT_KEY = {SPLIT_TRAIN: 0, SPLIT_TEST: 1}


@dataclass(frozen=True)
class LabeledSample:
    image: LineImage
    label: TrackState
    origin: Origin


@dataclass(frozen=True)
class DatasetSpec:
    states: tuple[int, ...] = tuple(range(NUM_STATES))
    per_class_train: int = 1000
    per_class_test: int = 300
    cam: CameraConfig = field(default_factory=CameraConfig)
    light: LightingProfile = field(default_factory=LightingProfile)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "states": [int(s) for s in self.states],
            "per_class_train": self.per_class_train,
            "per_class_test": self.per_class_test,
            "cam": asdict(self.cam),
            "light": {**asdict(self.light), "global_jitter": list(self.light.global_jitter)},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        light = dict(d["light"])
        light["global_jitter"] = tuple(light["global_jitter"])
        return cls(states=tuple(d["states"]), per_class_train=d["per_class_train"],
                   per_class_test=d["per_class_test"], cam=CameraConfig(**d["cam"]),
                   light=LightingProfile(**light), seed=d["seed"])


class Dataset:
    """Labeled line images held as flat arrays plus a provenance manifest."""

    def __init__(self, pixels, labels, origins, split: str = SPLIT_TRAIN,
                 manifest: dict | None = None, width: int | None = None):
        pixels = np.asarray(pixels, dtype=np.uint8)
        if pixels.ndim != 2:
            if pixels.size == 0:
                pixels = pixels.reshape(0, width or 0)
            else:
                raise ValueError("pixels must be (n, width)")
        self.pixels = pixels
        self.labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
        self.origins = np.asarray(origins, dtype=np.uint8).reshape(-1)
        if not (len(self.pixels) == len(self.labels) == len(self.origins)):
            raise ValueError("pixels, labels and origins must have equal length")
        if len(self.labels) and self.labels.max() >= NUM_STATES:
            raise ValueError("label outside the TrackState range")
        self.split = split
        self.manifest = dict(manifest or {})
        self.manifest["counts"] = self.class_counts()

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(LineImage(self.pixels[i]), TrackState(int(self.labels[i])),
                             Origin(int(self.origins[i])))

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=NUM_STATES).astype(int).tolist()

    def origin_counts(self) -> dict[str, int]:
        return {Origin(int(o)).tag: int(n) for o, n in zip(*np.unique(self.origins, return_counts=True))}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        m = {k: v for k, v in self.manifest.items() if k != "counts"}
        m["subset_of"] = m.get("kind", "dataset")
        return Dataset(self.pixels[idx], self.labels[idx], self.origins[idx], self.split, m, self.width)

    def append(self, pixels, labels, origins) -> "Dataset":
        """New dataset with rows appended (the original is left untouched)."""
        pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, self.width)
        m = {k: v for k, v in self.manifest.items() if k != "counts"}
        m["appended"] = m.get("appended", 0) + len(pixels)
        return Dataset(np.concatenate([self.pixels, pixels]),
                       np.concatenate([self.labels, np.asarray(labels, np.uint8)]),
                       np.concatenate([self.origins, np.asarray(origins, np.uint8)]),
                       self.split, m, self.width)

    def equals(self, other: "Dataset") -> bool:
        return (self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.origins, other.origins))

    def manifest_json(self) -> str:
        return json.dumps(self.manifest, sort_keys=True, indent=2)


def _sample_seed(seed: int, split: str, state: int, index: int) -> np.random.SeedSequence:
    # counter-based: the stream for a sample depends only on its coordinates
    return np.random.SeedSequence([int(seed), _SPLIT_KEY[split], int(state), int(index)])


def _generate_split(spec: DatasetSpec, split: str, per_class: int) -> Dataset:
    if per_class <= 0:
        raise ValueError("per-class counts must be > 0")
    origin = Origin.for_exposure(spec.cam.acquisition_ms)
    n = per_class * len(spec.states)
    pixels = np.empty((n, spec.cam.width), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint8)
    row = 0
    for state in spec.states:
        for i in range(per_class):
            img = render_scene(TrackState(state), spec.cam, spec.light,
                               _sample_seed(spec.seed, split, state, i))
            pixels[row] = img.pixels
            labels[row] = state
            row += 1
    manifest = {"kind": "generated", "split": split, "origin": origin.tag, "spec": spec.to_dict()}
    return Dataset(pixels, labels, np.full(n, origin, np.uint8), split, manifest)


def generate_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    return (_generate_split(spec, SPLIT_TRAIN, spec.per_class_train),
            _generate_split(spec, SPLIT_TEST, spec.per_class_test))


def regenerate(manifest: dict) -> Dataset:
    """Rebuild a generated dataset from its manifest alone."""
    if manifest.get("kind") != "generated":
        raise ValueError("only generated datasets can be rebuilt from a manifest")
    spec = DatasetSpec.from_dict(manifest["spec"])
    split = manifest["split"]
    per = spec.per_class_train if split == SPLIT_TRAIN else spec.per_class_test
    return _generate_split(spec, split, per)


def combine_datasets(datasets: Sequence[Dataset]) -> Dataset:
    datasets = list(datasets)
    if not datasets:
        return Dataset(np.zeros((0, 0), np.uint8), [], [], SPLIT_TRAIN, {"kind": "combined", "parts": []})
    if len(datasets) == 1:
        return datasets[0]
    width = datasets[0].width
    if any(d.width != width for d in datasets):
        raise ValueError("cannot combine datasets of different widths")
    manifest = {"kind": "combined",
                "parts": [{k: v for k, v in d.manifest.items()} for d in datasets]}
    return Dataset(np.concatenate([d.pixels for d in datasets]),
                   np.concatenate([d.labels for d in datasets]),
                   np.concatenate([d.origins for d in datasets]),
                   datasets[0].split, manifest, width)


def _split_evenly(total: int, bins: int, offset: int = 0) -> list[int]:
    base, extra = divmod(total, bins)
    return [base + (1 if (i - offset) % bins < extra else 0) for i in range(bins)]


def sample_test_comb(dsets: Sequence[Dataset], n_train: int, n_test: int,
                     seed) -> tuple[Dataset, Dataset]:
    """Mixed-lighting set drawn from per-exposure test sets, stratified by origin and class.

    ``labels`` keep the track state; the origin byte is the prediction target
    for the weight-set selector.
    """
    pools = {}
    for d in dsets:
        for o in np.unique(d.origins):
            for c in range(NUM_STATES):
                idx = np.flatnonzero((d.origins == o) & (d.labels == c))
                if len(idx):
                    pools.setdefault(int(o), {})[c] = (d, idx)
    origins = sorted(pools)
    if not origins:
        raise ValueError("no samples to draw from")
    total = sum(len(idx) for p in pools.values() for _, idx in p.values())
    if n_train + n_test > total:
        raise ValueError(f"requested {n_train + n_test} samples but only {total} available")

    rng = np.random.default_rng(seed)
    tr_rows, te_rows = [], []
    tr_per_origin = _split_evenly(n_train, len(origins))
    te_per_origin = _split_evenly(n_test, len(origins))
    for oi, o in enumerate(origins):
        classes = sorted(pools[o])
        tr_per_class = _split_evenly(tr_per_origin[oi], len(classes), offset=oi)
        te_per_class = _split_evenly(te_per_origin[oi], len(classes), offset=oi)
        for ci, c in enumerate(classes):
            d, idx = pools[o][c]
            a, b = tr_per_class[ci], te_per_class[ci]
            if a + b > len(idx):
                raise ValueError(f"insufficient samples for origin {o} class {c}")
            perm = rng.permutation(idx)
            tr_rows += [(d, i) for i in perm[:a]]
            te_rows += [(d, i) for i in perm[a:a + b]]

    def build(rows, split, n):
        width = dsets[0].width
        px = np.array([d.pixels[i] for d, i in rows], dtype=np.uint8).reshape(-1, width)
        lab = np.array([d.labels[i] for d, i in rows], dtype=np.uint8)
        org = np.array([d.origins[i] for d, i in rows], dtype=np.uint8)
        m = {"kind": "test-comb", "split": split, "target": "origin", "n": n,
             "seed": seed if isinstance(seed, int) else None,
             "sources": [d.manifest.get("origin", d.manifest.get("kind")) for d in dsets]}
        return Dataset(px, lab, org, split, m, width)

    return build(tr_rows, SPLIT_TRAIN, n_train), build(te_rows, SPLIT_TEST, n_test)


def standard_dsets(per_class_train: int, per_class_test: int, seed: int = 0,
                   light: LightingProfile = TRACK, noise_sigma: float = 2.0,
                   exposures: Iterable[float] = (2.0, 1.5, 1.0)) -> dict[float, tuple[Dataset, Dataset]]:
    """Dset-2.0/1.5/1.0 sharing one scene distribution; each exposure gets its own seed."""
    out = {}
    for k, acq in enumerate(exposures):
        spec = DatasetSpec(per_class_train=per_class_train, per_class_test=per_class_test,
                           cam=CameraConfig(acquisition_ms=acq, noise_sigma=noise_sigma),
                           light=light, seed=seed * 10 + k)
        out[float(acq)] = generate_dataset(spec)
    return out


# --------------------------------------------------------------------------- .vnnd files

_D_MAGIC = b"VNND"
_D_VERSION = 1
_D_HEADER = struct.Struct("<4sBHBI")


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Binary samples to ``path`` plus the JSON manifest sidecar next to it."""
    path = Path(path)
    if ds.width > 0xFFFF:
        raise ValueError("width does not fit the u16 header field")
    rows = np.empty((len(ds), ds.width + 2), dtype=np.uint8)
    rows[:, 0] = ds.labels
    rows[:, 1] = ds.origins
    rows[:, 2:] = ds.pixels
    with open(path, "wb") as f:
        f.write(_D_HEADER.pack(_D_MAGIC, _D_VERSION, ds.width, NUM_STATES, len(ds)))
        f.write(rows.tobytes())
    side = {"split": ds.split, "manifest": ds.manifest}
    sidecar_path(path).write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _D_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, width, n_classes, n = _D_HEADER.unpack_from(raw)
    if magic != _D_MAGIC:
        raise ValueError(f"{path}: not a .vnnd dataset")
    if version != _D_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if n_classes != NUM_STATES:
        raise ValueError(f"{path}: expected {NUM_STATES} classes, file declares {n_classes}")
    body = np.frombuffer(raw, np.uint8, offset=_D_HEADER.size)
    if body.size != n * (width + 2):
        raise ValueError(f"{path}: payload size does not match header")
    rows = body.reshape(n, width + 2)
    split, manifest = SPLIT_TRAIN, {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        split, manifest = meta.get("split", split), meta.get("manifest", {})
    return Dataset(rows[:, 2:].copy(), rows[:, 0].copy(), rows[:, 1].copy(), split, manifest, width)
