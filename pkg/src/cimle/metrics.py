"""Evaluation metrics for conditional samplers.

Samplers are duck-typed: anything with ``latent_shape`` and a batched
``sample(x, z)`` works, so analytic test samplers and trained generators are
scored by the same code.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .distance import DistanceSpec, distances
from .generators import generate

FWV_BANDWIDTHS = (0.3, 0.2, 0.15)


@dataclass
class MetricReport:
    name: str
    values: np.ndarray
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        return math.fsum(self.values) / len(self.values) if len(self.values) else float("nan")

    def tsv(self) -> str:
        lines = ["metric\tinput\tvalue"]
        lines += [f"{self.name}\t{i}\t{float(v)!r}" for i, v in enumerate(self.values)]
        lines.append(f"{self.name}\tmean\t{self.aggregate!r}")
        return "\n".join(lines) + "\n"


def _pair_distances(spec, a, b):
    # Metrics are evaluation-only, so they run in float64 end to end.
    with ad.no_recording(), ad.precision(np.float64):
        return distances(spec, np.asarray(a, np.float64), np.asarray(b, np.float64)).data


def _draw(sampler, x, count, r):
    z = rngmod.sample_latent(r, (count, *sampler.latent_shape))
    return sampler.sample(np.broadcast_to(x, (count, *np.shape(x))), z)


def _content_key(x) -> int:
    x = np.ascontiguousarray(x, ad.DTYPE)
    return int.from_bytes(hashlib.sha256(x.tobytes()).digest()[:8], "little")


# -- faithfulness-weighted variance ------------------------------------------------


@dataclass(frozen=True)
class FWVConfig:
    """``spec`` is the sample distance; ``sigma`` the faithfulness bandwidth."""

    spec: DistanceSpec
    sigma: float = 0.3
    samples: int = 20
    mean: str = "elementwise"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"FWV bandwidth must be > 0, got {self.sigma}")
        if self.samples < 2:
            raise ValueError(f"FWV needs >= 2 samples per input, got {self.samples}")
        if self.mean != "elementwise":
            raise ValueError(f"unknown mean-sample construction {self.mean!r}")


def faithfulness_weighted_variance(samples, targets, cfg: FWVConfig) -> MetricReport:
    """Spread of samples around their mean, weighted by closeness to the ground truth.

    ``samples`` is ``(inputs, samples, ...)`` and ``targets`` ``(inputs, ...)``.
    Each sample contributes ``exp(-d(s, y) / (2 sigma^2)) * d(s, mean)``; the
    per-input value is the average over its samples, ``extra["raw"]`` the
    unnormalized double sum.
    """
    samples = np.asarray(samples, ad.DTYPE)
    targets = np.asarray(targets, ad.DTYPE)
    if samples.ndim < 2 or samples.shape[1] < 2:
        raise ValueError(f"FWV needs (inputs, >=2 samples, ...) got {samples.shape}")
    if samples.shape[0] != targets.shape[0] or samples.shape[2:] != targets.shape[1:]:
        raise ad.ShapeError(f"FWV: samples {samples.shape} vs targets {targets.shape}")
    n, s = samples.shape[:2]
    values = np.zeros(n)
    raw = 0.0
    for j in range(n):
        ys = samples[j]
        mean = ys.astype(np.float64).mean(axis=0)
        spread = _pair_distances(cfg.spec, ys, np.broadcast_to(mean, ys.shape))
        faith = _pair_distances(cfg.spec, ys, np.broadcast_to(targets[j], ys.shape))
        w = np.exp(-faith / (2.0 * cfg.sigma**2))
        contrib = w * spread
        raw += float(contrib.sum())
        values[j] = contrib.sum() / s
    config = {"sigma": cfg.sigma, "samples": s, "inputs": n, "mean_sample": cfg.mean, "normalization": "samples*inputs"}
    return MetricReport("fwv", values, config, {"raw": raw})


def fwv_for_sampler(sampler, inputs, targets, cfg: FWVConfig, seed=0) -> MetricReport:
    r = rngmod.substream(seed, rngmod.EVAL, 1)
    samples = np.stack([_draw(sampler, x, cfg.samples, r) for x in inputs])
    return faithfulness_weighted_variance(samples, targets, cfg)


# -- pairwise diversity ----------------------------------------------------------


def pairwise_diversity(sampler, inputs, spec: DistanceSpec, pairs=40, seed=0) -> MetricReport:
    """Mean distance between independently drawn sample pairs, per input.

    Draws are keyed by input content, so permuting ``inputs`` permutes the
    per-input values and leaves the aggregate unchanged.
    """
    if pairs < 1:
        raise ValueError(f"pairwise_diversity: pairs must be >= 1, got {pairs}")
    values = np.zeros(len(inputs))
    for j, x in enumerate(inputs):
        r = rngmod.substream(seed, rngmod.EVAL, 2, _content_key(x))
        s = _draw(sampler, x, 2 * pairs, r)
        values[j] = math.fsum(_pair_distances(spec, s[:pairs], s[pairs:])) / pairs
    return MetricReport("diversity", values, {"pairs": pairs, "inputs": len(inputs)})


# -- hue histogram ---------------------------------------------------------------


@dataclass
class HueHistogram:
    density: np.ndarray
    edges: np.ndarray
    counted: int
    all_achromatic: bool


def rgb_hue(rgb) -> np.ndarray:
    """Hexagonal hue in degrees ``[0, 360)`` for ``(..., 3)`` RGB; NaN where chroma is 0."""
    rgb = np.asarray(rgb, np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx, mn = rgb.max(axis=-1), rgb.min(axis=-1)
    c = mx - mn
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(mx == r, np.mod((g - b) / c, 6.0), np.where(mx == g, (b - r) / c + 2.0, (r - g) / c + 4.0))
    h = 60.0 * h
    h = np.where(h >= 360.0, h - 360.0, h)
    return np.where(c > 0, h, np.nan)


def hue_histogram(images, bins=36) -> HueHistogram:
    """Normalized histogram of pixel hues over ``(3, H, W)`` images, grey pixels excluded."""
    if bins < 2:
        raise ValueError(f"hue_histogram: bins must be >= 2, got {bins}")
    hues = [rgb_hue(np.moveaxis(np.asarray(im), 0, -1)).ravel() for im in images]
    h = np.concatenate(hues) if hues else np.zeros(0)
    h = h[~np.isnan(h)]
    edges = np.linspace(0.0, 360.0, bins + 1)
    counts = np.histogram(h, bins=edges)[0].astype(np.float64)
    if len(h) == 0:
        return HueHistogram(counts, edges, 0, True)
    return HueHistogram(counts / counts.sum(), edges, len(h), False)


# -- mode coverage ---------------------------------------------------------------


def coverage_from_samples(samples, modes, metric, eps) -> float:
    """Fraction of ``modes`` (k, ...) within ``eps`` of some sample (draws, ...)."""
    d = metric(np.asarray(modes)[:, None], np.asarray(samples)[None])
    return float((d.min(axis=1) <= eps).mean())


def mode_coverage(sampler, task, eps=None, draws=100, inputs=100, seed=0) -> MetricReport:
    """Per fresh input, the fraction of its true modes hit within ``eps`` by ``draws`` samples."""
    eps = task.eps if eps is None else eps
    if eps < 0:
        raise ValueError("mode_coverage: eps must be >= 0")
    r = rngmod.substream(seed, rngmod.EVAL, 3)
    x, _ = task.sample_conditions(inputs, r)
    modes = task.modes(x)
    values = np.array([coverage_from_samples(_draw(sampler, x[j], draws, r), modes[j], task.metric, eps)
                       for j in range(inputs)])
    return MetricReport("coverage", values, {"eps": eps, "draws": draws, "inputs": inputs})


# -- latent interpolation and frame consistency -----------------------------------


def interpolate(gen, x, z_a, z_b, steps) -> np.ndarray:
    """Samples along ``(1-t) z_a + t z_b`` for ``steps`` evenly spaced ``t`` in [0, 1].

    Each frame is an independent single-sample forward pass, so the
    endpoints are bit-identical to ``generate(gen, x, z_a)`` / ``z_b``.
    """
    if steps < 2:
        raise ValueError(f"interpolate: steps must be >= 2, got {steps}")
    z_a = np.asarray(z_a, ad.DTYPE)
    z_b = np.asarray(z_b, ad.DTYPE)
    frames = []
    for i in range(steps):
        if i == 0:
            z = z_a
        elif i == steps - 1:
            z = z_b
        else:
            t = i / (steps - 1)
            z = ((1.0 - t) * z_a.astype(np.float64) + t * z_b.astype(np.float64)).astype(ad.DTYPE)
        frames.append(generate(gen, x, z))
    return np.stack(frames)


def adjacent_distances(spec, frames) -> np.ndarray:
    frames = np.asarray(frames, ad.DTYPE)
    if len(frames) < 2:
        return np.zeros(0)
    return _pair_distances(spec, frames[:-1], frames[1:])


def smoothness_ratio(spec, frames) -> float:
    """Largest adjacent-frame distance over the mean one."""
    d = adjacent_distances(spec, frames)
    return float(d.max() / d.mean()) if len(d) and d.mean() > 0 else 1.0


def frame_consistency(gen, inputs, spec: DistanceSpec, z=None, fresh=False, seed=0) -> np.ndarray:
    """Distances between consecutive outputs over an input sequence.

    With ``fresh=False`` every frame reuses one latent code (``z`` or the
    fixed code for ``seed``); with ``fresh=True`` each frame draws its own.
    """
    inputs = np.asarray(inputs, ad.DTYPE)
    if len(inputs) < 2:
        return np.zeros(0)
    if fresh:
        zs = rngmod.sample_latent(rngmod.substream(seed, rngmod.EVAL, 4), (len(inputs), *gen.latent_shape))
    else:
        z0 = rngmod.fixed_latent(seed, gen.latent_shape) if z is None else np.asarray(z, ad.DTYPE)
        zs = np.broadcast_to(z0, (len(inputs), *gen.latent_shape))
    frames = np.stack([generate(gen, x, zz) for x, zz in zip(inputs, zs)])
    return adjacent_distances(spec, frames)
