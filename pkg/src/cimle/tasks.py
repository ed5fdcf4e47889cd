"""Synthetic conditional tasks whose true output modes are known exactly.

``two-mode-vec`` / ``k-mode-vec``
    ``x ~ U[0,1]^4``; ``y`` is one of ``k`` affine functions of ``x``.
``toy-sr``
    32x32 RGB targets built from 4x4 constant blocks plus a +-0.125
    checkerboard whose global polarity is the mode; the condition is the 8x8
    block mean, which cancels the checkerboard exactly.
``toy-layout``
    4-class street layouts (sky, road, building, car) at 32x64, coloured by
    one of 3 palettes. The palette is the mode.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .autodiff import DTYPE

KINDS = ("two-mode-vec", "k-mode-vec", "toy-sr", "toy-layout")

SKY, ROAD, BUILDING, CAR = range(4)
PALETTES = np.array(
    [
        [[0.45, 0.65, 0.95], [0.45, 0.45, 0.45], [0.80, 0.60, 0.40], [0.90, 0.15, 0.15]],
        [[0.95, 0.50, 0.25], [0.15, 0.12, 0.20], [0.30, 0.20, 0.50], [0.15, 0.85, 0.90]],
        [[0.05, 0.05, 0.25], [0.80, 0.80, 0.55], [0.10, 0.65, 0.20], [0.95, 0.95, 0.20]],
    ]
)
JITTER = 0.02
CHECKER = 0.125


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    mode: np.ndarray
    labels: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    def __post_init__(self):
        if len(self.y) != len(self.x) or len(self.mode) != len(self.x):
            raise ValueError("dataset: x, y and mode counts differ")
        if self.manifest:
            if tuple(self.x.shape[1:]) != tuple(self.manifest["cond_shape"]):
                raise ValueError("dataset: condition shape disagrees with manifest")
            if tuple(self.y.shape[1:]) != tuple(self.manifest["target_shape"]):
                raise ValueError("dataset: target shape disagrees with manifest")

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.x[idx], self.y[idx], self.mode[idx], labels, dict(self.manifest, n=len(idx)))

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.x, self.y, self.mode) + (() if self.labels is None else (self.labels,)):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class SyntheticTask:
    """A task kind with its mode oracle and coverage metric.

    ``modes(x)`` returns every true mode for a batch of conditions as an
    array of shape ``(n, k, *target_shape)``; ``metric`` is Euclidean for
    vector tasks and per-pixel RMS for images.
    """

    def __init__(self, kind, k=2, imbalance=None, height=32, width=64, size=32, factor=4):
        if kind not in KINDS:
            raise ValueError(f"unknown task kind {kind!r}; choose from {', '.join(KINDS)}")
        self.kind = kind
        if kind == "two-mode-vec":
            k = 2
        elif kind == "toy-sr":
            k = 2
        elif kind == "toy-layout":
            k = len(PALETTES)
        if kind == "k-mode-vec" and not 2 <= k <= 16:
            raise ValueError(f"k-mode-vec supports 2..16 modes, got {k}")
        self.k = k
        self.height, self.width = height, width
        self.size, self.factor = size, factor
        if kind == "toy-sr" and size % factor:
            raise ValueError("toy-sr: size must be a multiple of factor")
        if kind == "toy-layout" and (height % 4 or width % 4):
            raise ValueError("toy-layout: spatial size must be divisible by 4")
        probs = np.full(k, 1.0 / k) if imbalance is None else np.asarray(imbalance, np.float64)
        if probs.shape != (k,) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ValueError(f"mode probabilities must be {k} non-negative values summing to 1")
        self.mode_probs = probs / probs.sum()
        self.eps = 0.1 if kind.endswith("vec") else 0.05

    # -- shapes ------------------------------------------------------------------

    @property
    def cond_shape(self):
        if self.kind.endswith("vec"):
            return (4,)
        if self.kind == "toy-sr":
            s = self.size // self.factor
            return (3, s, s)
        return (4, self.height, self.width)

    @property
    def target_shape(self):
        if self.kind.endswith("vec"):
            return (4,)
        if self.kind == "toy-sr":
            return (3, self.size, self.size)
        return (3, self.height, self.width)

    def generator_kwargs(self):
        """Descriptor overrides that fit the default generator to this task."""
        if self.kind.endswith("vec"):
            return {"cond_dim": 4, "out_dim": 4}
        if self.kind == "toy-sr":
            return {"in_size": self.size // self.factor}
        return {"height": self.height, "img_width": self.width}

    @property
    def default_arch(self):
        return {"toy-sr": "sr-small", "toy-layout": "layout-small"}.get(self.kind, "vec-mlp")

    # -- mode oracle -------------------------------------------------------------

    def modes(self, x) -> np.ndarray:
        x = np.asarray(x, np.float64)
        if self.kind == "two-mode-vec":
            mu1 = 0.05 + 0.2 * x
            mu2 = 0.75 + 0.2 * np.roll(x, -1, axis=-1)
            return np.stack([mu1, mu2], axis=1).astype(DTYPE)
        if self.kind == "k-mode-vec":
            out = []
            for j in range(self.k):
                bits = np.array([(j >> c) & 1 for c in range(4)], np.float64)
                out.append(0.1 + 0.7 * bits + 0.1 * np.roll(x, -(j % 4), axis=-1))
            return np.stack(out, axis=1).astype(DTYPE)
        if self.kind == "toy-sr":
            f = self.factor
            base = np.repeat(np.repeat(x, f, axis=2), f, axis=3)
            jj, ii = np.meshgrid(np.arange(self.size), np.arange(self.size))
            checker = np.where((ii + jj) % 2 == 0, CHECKER, -CHECKER)
            return np.stack([base + checker, base - checker], axis=1).astype(DTYPE)
        labels = np.argmax(x, axis=1)
        return np.stack([np.moveaxis(PALETTES[s][labels], -1, 1) for s in range(self.k)], axis=1).astype(DTYPE)

    def conditional_mean(self, x) -> np.ndarray:
        """Mixture mean ``sum_j P(mode j) * mode_j(x)``."""
        modes = self.modes(x).astype(np.float64)
        w = self.mode_probs.reshape((1, -1) + (1,) * (modes.ndim - 2))
        return (modes * w).sum(axis=1)

    def metric(self, a, b) -> np.ndarray:
        """Distance over the trailing target axes (broadcasting over leading ones)."""
        d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
        axes = tuple(range(d.ndim - len(self.target_shape), d.ndim))
        if self.kind.endswith("vec"):
            return np.sqrt((d**2).sum(axis=axes))
        return np.sqrt((d**2).mean(axis=axes))

    def nearest_mode(self, x, y):
        """Index of the closest oracle mode per pair and its distance."""
        d = self.metric(self.modes(x), np.asarray(y)[:, None])
        j = np.argmin(d, axis=1)
        return j, d[np.arange(len(j)), j]

    # -- sampling ----------------------------------------------------------------

    def sample_conditions(self, n, rng):
        """Fresh conditions (and label maps for layouts)."""
        if self.kind.endswith("vec"):
            return rng.uniform(0.0, 1.0, size=(n, 4)).astype(DTYPE), None
        if self.kind == "toy-sr":
            s = self.size // self.factor
            return (rng.integers(4, 13, size=(n, 3, s, s)) / 16.0).astype(DTYPE), None
        labels = np.stack([self._layout(rng) for _ in range(n)])
        return one_hot(labels, 4), labels

    def _layout(self, rng, car_col=None):
        h, w = self.height, self.width
        lab = np.full((h, w), SKY, np.int64)
        horizon = int(rng.integers(h * 5 // 16, h // 2 + 1))
        lab[horizon:] = ROAD
        col = 0
        while col < w:
            bw = int(rng.integers(w // 16, w // 4 + 1))
            if rng.random() < 0.7:
                top = int(rng.integers(h // 16, max(horizon - 2, h // 16 + 1)))
                lab[top:horizon, col : col + bw] = BUILDING
            col += bw
        self._place_car(lab, horizon, rng, car_col)
        return lab

    def _place_car(self, lab, horizon, rng, car_col=None):
        h, w = lab.shape
        ch, cw = max(2, h // 8), max(4, w // 8)
        row = min(h - ch, horizon + int(rng.integers(0, max(1, h - horizon - ch + 1))))
        c0 = int(rng.integers(0, w - cw + 1)) if car_col is None else int(car_col) % (w - cw + 1)
        lab[row : row + ch, c0 : c0 + cw] = CAR

    def frame_sequence(self, n_frames, seed=0):
        """Layout frames in which only the car moves one column per frame."""
        if self.kind != "toy-layout":
            raise ValueError("frame sequences are defined for toy-layout only")
        frames = []
        for t in range(n_frames):
            # Same substream each frame: identical scene apart from the car.
            frames.append(self._layout(rngmod.substream(seed, rngmod.DATA, 99), car_col=2 + t))
        labels = np.stack(frames)
        return one_hot(labels, 4), labels

    def make(self, n, seed) -> Dataset:
        if n < 1:
            raise ValueError(f"make_synth: n must be >= 1, got {n}")
        r = rngmod.substream(seed, rngmod.DATA)
        x, labels = self.sample_conditions(n, r)
        mode = r.choice(self.k, size=n, p=self.mode_probs)
        modes = self.modes(x)
        y = modes[np.arange(n), mode]
        if self.kind == "toy-layout":
            jitter = r.uniform(-JITTER, JITTER, size=(n, 4, 3))
            y = y + np.moveaxis(jitter[np.arange(n)[:, None, None], labels], -1, 1)
            y = np.clip(y, 0.0, 1.0).astype(DTYPE)
        manifest = {
            "kind": self.kind,
            "n": n,
            "seed": int(seed),
            "modes": self.k,
            "cond_shape": list(self.cond_shape),
            "target_shape": list(self.target_shape),
        }
        return Dataset(x.astype(DTYPE), y.astype(DTYPE), mode.astype(np.int64), labels, manifest)

    def describe(self):
        return {"kind": self.kind, "k": self.k, "eps": self.eps, "mode_probs": self.mode_probs.tolist()}


def one_hot(labels, classes) -> np.ndarray:
    labels = np.asarray(labels)
    return np.moveaxis(np.eye(classes, dtype=DTYPE)[labels], -1, 1)


def get_task(kind, **kw) -> SyntheticTask:
    if kind == "toy-layout-imbalanced":
        return SyntheticTask("toy-layout", imbalance=(0.8, 0.1, 0.1), **kw)
    return SyntheticTask(kind, **kw)


def make_synth(kind, n, seed, **kw):
    """Dataset plus the task object that serves as its mode oracle."""
    task = get_task(kind, **kw)
    return task.make(n, seed), task
