"""Composite feature distance ``sum_i w_i * ||phi_i(a) - phi_i(b)||_p``.

Feature extractors are fixed and deterministic: raw pixels, a Gaussian blur
pyramid, gradient magnitude, and a seeded bank of random 3x3 filters. A
:class:`DistanceSpec` lists weighted terms; :func:`distances` evaluates a
batch of pairs and stays differentiable in its first argument.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor

KINDS = ("pixels", "blur", "gradmag", "randconv")


def _gaussian_kernel(sigma=1.0, radius=2):
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t**2) / (2 * sigma**2))
    k2 = np.outer(k, k)
    return (k2 / k2.sum()).astype(DTYPE)[None, None]


_BLUR = _gaussian_kernel()
_DX = np.array([[0, 0, 0], [-0.5, 0, 0.5], [0, 0, 0]], DTYPE)[None, None]
_DY = np.ascontiguousarray(_DX.transpose(0, 1, 3, 2))


def _depthwise(x: Tensor, kernel: np.ndarray, stride=1) -> Tensor:
    n, c, h, w = x.shape
    y = ad.conv2d(ad.reshape(x, (n * c, 1, h, w)), Tensor(kernel), stride=stride)
    return ad.reshape(y, (n, c) + y.shape[2:])


def blur_downsample(x: Tensor) -> Tensor:
    """Gaussian blur (sigma 1) followed by 2x decimation."""
    return _depthwise(x, _BLUR, stride=2)


@dataclass(frozen=True)
class FeatureExtractor:
    """A frozen feature map ``phi``.

    ``level`` is the number of blur-downsample steps applied first (the only
    parameter of ``blur``; optional pre-smoothing for the others).
    """

    kind: str = "pixels"
    level: int = 0
    seed: int = 0
    channels: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.level < 0:
            raise ValueError("feature level must be >= 0")

    def _randconv_weights(self, cin):
        rng = np.random.default_rng([self.seed, cin, self.channels])
        return (rng.standard_normal((self.channels, cin, 3, 3)) / np.sqrt(cin * 9)).astype(DTYPE)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if self.kind == "pixels" and self.level == 0:
            return x
        if x.ndim != 4:
            raise ad.ShapeError(f"feature {self.kind}: needs NCHW input, got {x.shape}")
        for _ in range(self.level):
            x = blur_downsample(x)
        if self.kind in ("pixels", "blur"):
            return x
        if self.kind == "gradmag":
            gx = _depthwise(x, _DX)
            gy = _depthwise(x, _DY)
            return ad.sqrt(ad.square(gx) + ad.square(gy) + DTYPE(1e-6))
        w = Tensor(self._randconv_weights(x.shape[1]))
        return ad.leaky_relu(ad.conv2d(x, w))

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Term:
    extractor: FeatureExtractor
    weight: float = 1.0
    p: int = 2
    squared: bool = False

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError(f"norm p must be 1 or 2, got {self.p}")
        if self.squared and self.p != 2:
            raise ValueError("squared norm only defined for p=2")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ValueError(f"term weight must be finite and >= 0, got {self.weight}")


@dataclass(frozen=True)
class DistanceSpec:
    terms: tuple
    calibration: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("distance spec needs at least one term")
        if not any(t.weight > 0 for t in self.terms):
            raise ValueError("distance spec needs at least one positive weight")

    @property
    def embedding_exact(self) -> bool:
        """True when Euclidean distance on :func:`embed` ranks like the full metric."""
        active = [t for t in self.terms if t.weight > 0]
        if any(t.p != 2 for t in active):
            return False
        return len(active) == 1 or all(t.squared for t in active)

    def with_weights(self, weights, calibration=()):
        terms = tuple(dataclasses.replace(t, weight=float(w)) for t, w in zip(self.terms, weights))
        return DistanceSpec(terms, tuple(calibration))

    def to_dict(self):
        return {
            "terms": [
                {**t.extractor.to_dict(), "weight": t.weight, "p": t.p, "squared": t.squared} for t in self.terms
            ]
        }

    @classmethod
    def from_dict(cls, d):
        terms = []
        for t in d["terms"]:
            ex = FeatureExtractor(t["kind"], t.get("level", 0), t.get("seed", 0), t.get("channels", 16))
            terms.append(Term(ex, t["weight"], t["p"], t.get("squared", False)))
        return cls(tuple(terms))


def pixels_spec(p=2, squared=False, weight=1.0) -> DistanceSpec:
    return DistanceSpec((Term(FeatureExtractor("pixels"), weight, p, squared),))


def sr_spec() -> DistanceSpec:
    """l2 on pixels plus l2 on the deepest (coarsest) random-filter features."""
    return DistanceSpec(
        (
            Term(FeatureExtractor("pixels"), 1.0, 2),
            Term(FeatureExtractor("randconv", level=2, seed=11), 1.0, 2),
        )
    )


def layout_spec() -> DistanceSpec:
    """l1 on pixels and every feature scale."""
    kinds = [
        FeatureExtractor("pixels"),
        FeatureExtractor("blur", level=1),
        FeatureExtractor("blur", level=2),
        FeatureExtractor("blur", level=3),
        FeatureExtractor("gradmag"),
        FeatureExtractor("randconv", level=1, seed=7),
    ]
    return DistanceSpec(tuple(Term(k, 1.0, 1) for k in kinds))


def full_spec(p=2) -> DistanceSpec:
    """Every extractor kind with unit weight (calibrate before use)."""
    kinds = [
        FeatureExtractor("pixels"),
        FeatureExtractor("blur", level=1),
        FeatureExtractor("blur", level=2),
        FeatureExtractor("blur", level=3),
        FeatureExtractor("gradmag"),
        FeatureExtractor("randconv", seed=3),
    ]
    return DistanceSpec(tuple(Term(k, 1.0, p) for k in kinds))


PRESETS = {
    "pixels-l2": lambda: pixels_spec(2),
    "pixels-l2sq": lambda: pixels_spec(2, squared=True),
    "pixels-l1": lambda: pixels_spec(1),
    "sr": sr_spec,
    "layout": layout_spec,
}


def area_resize(mask: np.ndarray, size) -> np.ndarray:
    """Area-mean resample of the last two axes to ``size`` (any ratio)."""

    def weights(n_src, n_dst):
        edges_src = np.arange(n_src + 1, dtype=np.float64)
        edges_dst = np.linspace(0.0, n_src, n_dst + 1)
        lo = np.maximum(edges_dst[:-1, None], edges_src[None, :-1])
        hi = np.minimum(edges_dst[1:, None], edges_src[None, 1:])
        w = np.clip(hi - lo, 0.0, None)
        return w / w.sum(axis=1, keepdims=True)

    h, w = size
    if mask.shape[-2:] == (h, w):
        return mask.astype(np.float64)
    rh = weights(mask.shape[-2], h)
    rw = weights(mask.shape[-1], w)
    return np.einsum("ih,...hw,jw->...ij", rh, mask.astype(np.float64), rw)


def _term_norms(term: Term, fa: Tensor, fb: Tensor, mask=None) -> Tensor:
    diff = fa - fb
    axes = tuple(range(1, diff.ndim))
    if mask is not None:
        m = area_resize(mask, diff.shape[-2:]).astype(DTYPE)
        m = m[:, None] if m.ndim == 3 else m[None, None]
        return ad.sum_(ad.abs_(diff * Tensor(m)), axis=axes)
    if term.p == 1:
        return ad.sum_(ad.abs_(diff), axis=axes)
    ss = ad.sum_(ad.square(diff), axis=axes)
    return ss if term.squared else ad.sqrt(ss)


def term_values(spec: DistanceSpec, a, b, mask=None) -> list:
    """Unweighted per-term norms, each a ``(N,)`` Tensor."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"distance: shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        mask = np.asarray(mask)
        if a.ndim != 4 or mask.shape[-2:] != a.shape[-2:]:
            raise ad.ShapeError(f"masked_distance: mask shape {mask.shape} does not match samples {a.shape}")
        if mask.ndim == 3 and mask.shape[0] != a.shape[0]:
            raise ad.ShapeError(f"masked_distance: {mask.shape[0]} masks for {a.shape[0]} samples")
    return [_term_norms(t, t.extractor(a), t.extractor(b), mask) for t in spec.terms]


def distances(spec: DistanceSpec, a, b, mask=None) -> Tensor:
    """Per-pair distances for batches ``a``, ``b`` (leading batch axis); shape ``(N,)``.

    With ``mask`` every term becomes a masked l1 norm, the mask being
    area-resampled to each feature map's spatial size.
    """
    total = None
    for term, v in zip(spec.terms, term_values(spec, a, b, mask)):
        if term.weight == 0:
            continue
        v = v * DTYPE(term.weight)
        total = v if total is None else total + v
    return total


def distance(spec: DistanceSpec, a, b) -> float:
    """Distance between two unbatched samples."""
    a, b = np.asarray(a, DTYPE), np.asarray(b, DTYPE)
    if a.shape != b.shape:
        raise ad.ShapeError(f"distance: shape mismatch {a.shape} vs {b.shape}")
    with ad.no_recording():
        return float(distances(spec, a[None], b[None]).data[0])


def masked_distance(spec: DistanceSpec, a, b, mask) -> float:
    a, b = np.asarray(a, DTYPE), np.asarray(b, DTYPE)
    if a.shape != b.shape:
        raise ad.ShapeError(f"masked_distance: shape mismatch {a.shape} vs {b.shape}")
    mask = np.asarray(mask)
    if mask.shape != a.shape[-2:]:
        raise ad.ShapeError(f"masked_distance: mask shape {mask.shape} vs sample {a.shape}")
    with ad.no_recording():
        return float(distances(spec, a[None], b[None], mask=mask).data[0])


def calibrate_weights(spec: DistanceSpec, pairs, b=None) -> DistanceSpec:
    """Reweight terms so each has mean 1 over the calibration pairs.

    ``pairs`` is a sequence of ``(a, b)`` pairs, or a stacked batch of first
    elements when ``b`` is the stacked batch of second elements. A term whose
    mean is zero keeps weight 1.
    """
    if b is None:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("calibrate_weights: empty pair set")
        a = np.stack([np.asarray(p[0], DTYPE) for p in pairs])
        b = np.stack([np.asarray(p[1], DTYPE) for p in pairs])
    else:
        a, b = np.asarray(pairs, DTYPE), np.asarray(b, DTYPE)
    if len(a) == 0:
        raise ValueError("calibrate_weights: empty pair set")
    with ad.no_recording():
        means = [float(np.mean(v.data, dtype=np.float64)) for v in term_values(spec, a, b)]
    weights = [1.0 / mu if mu > 0 else 1.0 for mu in means]
    return spec.with_weights(weights, calibration=tuple(means))


def embed(spec: DistanceSpec, samples) -> np.ndarray:
    """Search embedding: concatenation of ``sqrt(w_i) * phi_i`` flattened per sample."""
    x = np.asarray(samples, DTYPE)
    parts = []
    with ad.no_recording():
        for t in spec.terms:
            if t.weight == 0:
                continue
            f = t.extractor(x).data.reshape(len(x), -1)
            parts.append(f * DTYPE(np.sqrt(t.weight)))
    return np.concatenate(parts, axis=1) if len(parts) > 1 else np.ascontiguousarray(parts[0])
