"""Rarity scores from per-category average colours, and the masks built from them.

For every category ``p`` and image ``k`` the average colour ``c_k(p)`` of the
pixels labelled ``p`` is collected; a Gaussian KDE over those colours gives a
density, and the rarity of image ``k`` for ``p`` is its inverse (zero when
``p`` does not occur in the image). Rarity drives two things: which images
fill a training batch, and a per-pixel loss weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOP_CATEGORIES = 5
MIN_BANDWIDTH = 1e-3


def average_colour(label_map, image, p):
    """Mean RGB of ``image`` (3, H, W) over pixels where ``label_map == p``; None if absent."""
    label_map = np.asarray(label_map)
    image = np.asarray(image)
    if image.ndim != 3 or label_map.shape != image.shape[1:]:
        raise ValueError(f"average_colour: label map {label_map.shape} not aligned with image {image.shape}")
    sel = label_map == p
    n = int(sel.sum())
    if n == 0:
        return None
    return image[:, sel].astype(np.float64).sum(axis=1) / n


def scott_bandwidth(points) -> float:
    """Isotropic Scott's-rule bandwidth ``n**(-1/(d+4)) * rms std``, floored."""
    pts = np.asarray(points, np.float64)
    n, d = pts.shape
    sd = np.sqrt(np.mean(pts.var(axis=0))) if n > 1 else 0.0
    return max(float(sd * n ** (-1.0 / (d + 4))), MIN_BANDWIDTH)


class KDE:
    """Isotropic Gaussian kernel density estimate in ``R^d``."""

    def __init__(self, points, bandwidth):
        self.points = np.atleast_2d(np.asarray(points, np.float64))
        self.h = float(bandwidth)
        self.dim = self.points.shape[1]
        self.peak = (2 * np.pi * self.h**2) ** (-self.dim / 2)

    def __call__(self, c):
        c = np.asarray(c, np.float64)
        single = c.ndim == 1
        c = np.atleast_2d(c)
        d2 = ((c[:, None, :] - self.points[None, :, :]) ** 2).sum(axis=-1)
        dens = self.peak * np.exp(-d2 / (2 * self.h**2)).mean(axis=1)
        return float(dens[0]) if single else dens


def fit_kde(colours, bandwidth=None) -> KDE:
    pts = np.atleast_2d(np.asarray(colours, np.float64))
    if pts.size == 0:
        raise ValueError("fit_kde: no points")
    h = scott_bandwidth(pts) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError(f"fit_kde: bandwidth must be > 0, got {h}")
    return KDE(pts, h)


@dataclass
class RarityTable:
    """Per (category, image) colours, densities and rarity scores.

    Arrays are indexed ``[p, k]``; ``colours`` is NaN and ``density`` and
    ``rarity`` are 0 where category ``p`` does not occur in image ``k``.
    """

    colours: np.ndarray
    present: np.ndarray
    density: np.ndarray
    rarity: np.ndarray
    area: np.ndarray
    bandwidth: np.ndarray

    @property
    def n_categories(self):
        return self.rarity.shape[0]

    @property
    def n_images(self):
        return self.rarity.shape[1]

    def area_ranking(self):
        """Categories with nonzero area, largest first (ties by lower id)."""
        ids = np.flatnonzero(self.area > 0)
        return ids[np.lexsort((ids, -self.area[ids]))]

    def scaled(self, k, factor):
        """Copy with image ``k``'s rarity scores multiplied by ``factor``."""
        rarity = self.rarity.copy()
        rarity[:, k] *= factor
        return RarityTable(self.colours, self.present, self.density, rarity, self.area, self.bandwidth)


def rarity_scores(label_maps, images, n_categories, bandwidth=None) -> RarityTable:
    """Build the rarity table for a labelled image set.

    ``bandwidth`` overrides Scott's rule; it may be a scalar or one value per
    category.
    """
    n = len(label_maps)
    if n == 0 or len(images) != n:
        raise ValueError(f"rarity_scores: need matching non-empty sets, got {n} label maps and {len(images)} images")
    colours = np.full((n_categories, n, 3), np.nan)
    area = np.zeros(n_categories)
    for k in range(n):
        lab = np.asarray(label_maps[k])
        if lab.size and (lab.min() < 0 or lab.max() >= n_categories):
            raise ValueError(f"rarity_scores: image {k} has labels outside [0, {n_categories})")
        counts = np.bincount(lab.ravel(), minlength=n_categories)
        area += counts
        for p in np.flatnonzero(counts):
            colours[p, k] = average_colour(lab, images[k], p)
    present = ~np.isnan(colours[..., 0])
    density = np.zeros((n_categories, n))
    bw = np.zeros(n_categories)
    for p in range(n_categories):
        if not present[p].any():
            continue
        h = bandwidth if bandwidth is None or np.isscalar(bandwidth) else bandwidth[p]
        kde = fit_kde(colours[p, present[p]], h)
        bw[p] = kde.h
        density[p, present[p]] = kde(colours[p, present[p]])
    rarity = np.zeros_like(density)
    rarity[present] = 1.0 / density[present]
    return RarityTable(colours, present, density, rarity, area, bw)


def portions(table: RarityTable, batch_size: int):
    """``[(category, count), ...]``: equal shares over the top categories, remainder to the largest."""
    if batch_size < 1:
        raise ValueError(f"allocate_batch: batch size must be >= 1, got {batch_size}")
    top = table.area_ranking()[:TOP_CATEGORIES]
    if len(top) == 0:
        raise ValueError("allocate_batch: no category has nonzero area")
    share, rem = divmod(batch_size, len(top))
    counts = [share] * len(top)
    counts[0] += rem
    return [(int(p), c) for p, c in zip(top, counts)]


def selection_probs(table: RarityTable, p: int) -> np.ndarray:
    r = table.rarity[p]
    return r / r.sum()


def allocate_batch(table: RarityTable, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Image indices for one batch; each portion samples with replacement, proportional to rarity."""
    out = []
    for p, count in portions(table, batch_size):
        if count:
            out.append(rng.choice(table.n_images, size=count, replace=True, p=selection_probs(table, p)))
    return np.concatenate(out)


@dataclass
class RarityMask:
    raw: np.ndarray
    normalized: np.ndarray


def mask_from_scores(label_map, scores) -> RarityMask:
    """Per-pixel mask ``scores[label]`` and its max-normalized copy."""
    lab = np.asarray(label_map)
    raw = np.asarray(scores, np.float64)[lab]
    top = raw.max() if raw.size else 0.0
    if not top > 0:
        raise ValueError("build_mask: no pixel has positive rarity")
    return RarityMask(raw, raw / top)


def build_mask(label_map, table: RarityTable, k: int) -> RarityMask:
    """Rarity mask of training image ``k`` (whose labels are ``label_map``)."""
    lab = np.asarray(label_map)
    classes = np.unique(lab)
    if classes.size and (classes[0] < 0 or classes[-1] >= table.n_categories):
        raise ValueError(f"build_mask: labels outside the table's {table.n_categories} categories")
    missing = [int(p) for p in classes if not table.present[p, k]]
    if missing:
        raise ValueError(f"build_mask: categories {missing} have no table entry for image {k}")
    return mask_from_scores(lab, table.rarity[:, k])
