"""Nearest-sample selection: exhaustive search and a random-projection index.

For every training input the generator produces a bank of ``m`` samples;
matching picks the one closest to the ground truth under the composite
distance. Indices are 0-based and ties go to the lowest sample index.

The index follows the composite/simple layout of Dynamic Continuous
Indexing: ``n_composite`` groups of ``n_simple`` random unit directions, each
direction keeping the bank sorted by projection. A query walks a fixed
budget outward from its own projection in every list; points reached by
every list of a composite are candidates and get exact distances.

Instead of trusting the budget, the query then certifies its answer.
Projections onto unit directions never exceed the true distance, and for an
orthonormal composite neither does the norm of the projected difference. A
point no list of a composite reached is therefore at least
``sqrt(sum_s r_s**2)`` away (``r_s`` being how far list ``s`` walked); the
few reached-but-unverified points, or everything when that bound is too
weak, are screened by their exact projected lower bounds in ascending order
until the bound clears the current k-th best distance.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .distance import DistanceSpec, distances, embed

_bank_ids = itertools.count()


class StaleIndexError(RuntimeError):
    pass


class SampleBank:
    """The ``m`` latent codes and generated samples for one training input."""

    def __init__(self, input_index: int, codes, samples):
        self.input_index = int(input_index)
        self.id = next(_bank_ids)
        self.generation = 0
        self._set(codes, samples)

    def _set(self, codes, samples):
        codes = np.asarray(codes, np.float32)
        samples = np.asarray(samples, np.float32)
        if len(codes) != len(samples):
            raise ValueError(f"bank: {len(codes)} codes for {len(samples)} samples")
        self.codes = codes
        self.samples = samples
        self._emb = {}

    @classmethod
    def from_embeddings(cls, embeddings, input_index=0):
        emb = np.asarray(embeddings, np.float32)
        return cls(input_index, np.zeros((len(emb), 0), np.float32), emb)

    @property
    def m(self):
        return len(self.samples)

    def regenerate(self, codes, samples):
        self.generation += 1
        self._set(codes, samples)

    def embeddings(self, spec: DistanceSpec) -> np.ndarray:
        key = id(spec)
        if key not in self._emb:
            self._emb[key] = (spec, embed(spec, self.samples))
        return self._emb[key][1]


@dataclass
class MatchAssignment:
    """Selected sample per input: index, latent code and matched distance."""

    index: dict = field(default_factory=dict)
    code: dict = field(default_factory=dict)
    dist: dict = field(default_factory=dict)

    def add(self, i, j, code, d):
        self.index[i] = int(j)
        self.code[i] = code
        self.dist[i] = float(d)

    def mean_distance(self):
        return float(np.mean([self.dist[i] for i in sorted(self.dist)])) if self.dist else float("nan")


def _spec_distances(bank: SampleBank, y, spec: DistanceSpec, ids=None, chunk=512) -> np.ndarray:
    samples = bank.samples if ids is None else bank.samples[ids]
    y = np.asarray(y, np.float32)
    out = []
    with ad.no_recording():
        for s in range(0, len(samples), chunk):
            part = samples[s : s + chunk]
            out.append(distances(spec, part, np.broadcast_to(y, part.shape)).data)
    return np.concatenate(out) if out else np.zeros(0, np.float32)


def match_bruteforce(bank: SampleBank, y, spec: DistanceSpec):
    """Exact ``argmin_j distance(sample_j, y)``; returns ``(j, distance)``."""
    if bank.m == 0:
        raise ValueError("match_bruteforce: empty bank")
    d = _spec_distances(bank, y, spec)
    j = int(np.argmin(d))
    return j, float(d[j])


def default_budget(m: int) -> int:
    return max(100, int(np.ceil(10 * np.log2(max(m, 2)))))


def _principal_basis(emb, rank, rng, floor=1):
    """Orthonormal basis (D, r) of the dominant subspace of centred ``emb``.

    Randomized range finder with two power iterations; ``r`` is the smallest
    count that captures 99.9% of the total variance, kept within
    ``[floor, rank]``.
    """
    x = emb - emb.mean(axis=0)
    total = float(np.einsum("ij,ij->", x, x))
    k = min(rank, *x.shape)
    if total == 0.0 or k == 0:
        return np.eye(emb.shape[1])[:, : max(k, 1)]
    y = x @ rng.standard_normal((x.shape[1], k))
    for _ in range(2):
        y, _ = np.linalg.qr(y)
        y = x @ (x.T @ y)
    qy, _ = np.linalg.qr(y)
    _, sv, vt = np.linalg.svd(qy.T @ x, full_matrices=False)
    frac = np.cumsum(sv**2) / total
    r = int(np.searchsorted(frac, 0.999) + 1)
    return vt[: min(max(r, floor), k)].T


class ProjectionIndex:
    """Exact Euclidean k-NN over a fixed set of embeddings.

    Directions are random unit vectors drawn inside the bank's dominant
    principal subspace (``directions="data"``) or from the whole space
    (``"gaussian"``). Within a composite they are made orthonormal whenever
    the subspace is large enough, which lets the stopping bound combine all
    of a composite's lists instead of the weakest one.
    """

    def __init__(self, embeddings, n_composite=2, n_simple=10, budget=None, seed=0, bank=None,
                 directions="data", rank=64):
        emb = np.asarray(embeddings, np.float64)
        if emb.ndim != 2 or len(emb) == 0:
            raise ValueError(f"build_index: need a non-empty (m, D) array, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValueError("build_index: embeddings must be finite")
        if directions not in ("data", "gaussian"):
            raise ValueError(f"unknown direction scheme {directions!r}")
        self.m, self.dim = emb.shape
        self.n_composite = n_composite
        self.n_simple = n_simple
        self.budget = default_budget(self.m) if budget is None else int(budget)
        self.bank_id = None if bank is None else bank.id
        self.bank_generation = None if bank is None else bank.generation
        self.points = emb
        rng = rngmod.substream(seed, rngmod.INDEX)
        if directions == "data":
            basis = _principal_basis(emb, max(rank, n_simple), rng, floor=n_simple)
        else:
            basis = np.eye(self.dim)
        r = basis.shape[1]
        self.orthonormal = n_simple <= r
        dirs = []
        for _ in range(n_composite):
            g = rng.standard_normal((r, n_simple))
            if self.orthonormal:
                g, _ = np.linalg.qr(g)
            d = (basis @ g).T
            dirs.append(d / np.linalg.norm(d, axis=1, keepdims=True))
        self.directions = np.concatenate(dirs)
        self.proj = emb @ self.directions.T
        self.order = np.argsort(self.proj, axis=0, kind="stable").T.copy()
        self.sorted_proj = np.take_along_axis(self.proj.T, self.order, axis=1)
        # Per-composite blocks and squared norms for the dense lower bound.
        self.blocks = [np.ascontiguousarray(self.proj[:, c * n_simple : (c + 1) * n_simple]) for c in range(n_composite)]
        self.block_sq = [np.einsum("ij,ij->i", b, b) for b in self.blocks]

    def check_fresh(self, bank: SampleBank):
        if self.bank_id is not None and (bank.id != self.bank_id or bank.generation != self.bank_generation):
            raise StaleIndexError("index was built for a different or since-regenerated sample bank")

    def _combine(self, parts):
        """Lower bound on ||delta|| from per-direction lower bounds of one composite."""
        return np.sqrt(np.sum(parts**2, axis=-1)) if self.orthonormal else np.max(parts, axis=-1)

    def _dense_bound(self, qp):
        """Lower bound on every point's distance, from all composites at once."""
        S = self.n_simple
        if not self.orthonormal:
            return np.abs(self.proj - qp).max(axis=1)
        best = None
        for c, (b, bsq) in enumerate(zip(self.blocks, self.block_sq)):
            qc = qp[c * S : (c + 1) * S]
            qsq = float(qc @ qc)
            # Expanded |b - qc|^2, less a margin covering its rounding error.
            sq = bsq - 2.0 * (b @ qc) + qsq - 1e-12 * (bsq + qsq + 1.0)
            best = sq if best is None else np.maximum(best, sq)
        return np.sqrt(np.maximum(best, 0.0))

    def query(self, q, k=1, slack=0.0, stats=None):
        """Ids of the ``k`` nearest points, plus any within ``(1 + slack)`` of the k-th.

        Returned in order of (distance, id). Exact for every query.
        """
        q = np.asarray(q, np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ad.ShapeError(f"query: dimension {q.shape[0]} != index dimension {self.dim}")
        k = min(k, self.m)
        m, S, C = self.m, self.n_simple, self.n_composite
        qp = self.directions @ q
        pos = np.array([np.searchsorted(self.sorted_proj[s], qp[s]) for s in range(C * S)])
        dist = np.full(m, np.inf)
        found = []

        def evaluate(ids):
            ids = ids[np.isinf(dist[ids])]
            if len(ids):
                diff = self.points[ids] - q
                d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
                dist[ids] = d
                found.append(d)

        def limit():
            seen = np.concatenate(found) if found else np.zeros(0)
            if len(seen) < k:
                return np.inf
            return np.partition(seen, k - 1)[k - 1] * (1.0 + slack) * (1.0 + 1e-9) + 1e-12

        # Walk every sorted list out to the budget; DCI candidates are the
        # points every list of a composite has reached.
        w = max(1, self.budget // 2)
        lo = np.maximum(pos - w, 0)
        hi = np.minimum(pos + w, m)
        radius = np.full(C * S, np.inf)
        for s in range(C * S):
            if lo[s] > 0:
                radius[s] = qp[s] - self.sorted_proj[s, lo[s] - 1]
            if hi[s] < m:
                radius[s] = min(radius[s], self.sorted_proj[s, hi[s]] - qp[s])
        reached = []
        for c in range(C):
            ids = np.concatenate([self.order[s, lo[s] : hi[s]] for s in range(c * S, (c + 1) * S)])
            counts = np.bincount(ids, minlength=m)
            evaluate(np.flatnonzero(counts == S))
            reached.append(np.flatnonzero(counts > 0))
        outer = np.array([self._combine(radius[c * S : (c + 1) * S]) for c in range(C)])
        best = int(np.argmax(outer))
        if outer[best] > limit():
            # Points no list of ``best`` reached are certified; bound the rest.
            pool = reached[best]
            sl = slice(best * S, (best + 1) * S)
            lb = self._combine(np.abs(self.proj[pool, sl] - qp[sl]))
            scan = "walk"
        else:
            pool = np.arange(m)
            lb = self._dense_bound(qp)
            scan = "full"
        # Seed the k-th distance with the most promising points so the
        # filter below discards nearly everything before sorting.
        seed_n = min(len(pool), max(16, k))
        evaluate(pool[np.argpartition(lb, seed_n - 1)[:seed_n]])
        keep = np.isinf(dist if scan == "full" else dist[pool]) & (lb <= limit())
        pool, lb = pool[keep], lb[keep]
        if len(pool) > m // 4:
            # The bounds prune little here; a single dense pass is cheaper.
            diff = self.points - q
            d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            fresh = np.isinf(dist)
            dist[fresh] = d[fresh]
            found.append(d[fresh])
            pool, lb = pool[:0], lb[:0]
        order = np.argsort(lb, kind="stable")
        pool, lb = pool[order], lb[order]
        start, step = 0, 16
        while start < len(pool) and lb[start] <= limit():
            stop = start + step
            evaluate(pool[start:stop][lb[start:stop] <= limit()])
            start, step = stop, step * 2
        if stats is not None:
            stats["candidates"] = int(np.isfinite(dist).sum())
            stats["scan"] = scan
        cut = np.partition(dist, k - 1)[k - 1] * (1.0 + slack)
        hits = np.flatnonzero(dist <= cut)
        return hits[np.lexsort((hits, dist[hits]))]


def build_index(bank, n_composite=2, n_simple=10, budget=None, seed=0, spec=None) -> ProjectionIndex:
    """Index a bank's search embeddings (or a raw ``(m, D)`` array)."""
    if isinstance(bank, SampleBank):
        emb = bank.embeddings(spec) if spec is not None else bank.samples.reshape(bank.m, -1)
        return ProjectionIndex(emb, n_composite, n_simple, budget, seed, bank=bank)
    return ProjectionIndex(bank, n_composite, n_simple, budget, seed)


def match_indexed(index: ProjectionIndex, bank: SampleBank, y, spec: DistanceSpec, k=16, slack=1e-5):
    """Nearest sample via the index, verified under the full metric.

    When the search embedding ranks exactly like ``spec`` the index hit set is
    the true minimizer (plus float near-ties, re-ranked with the same metric
    as :func:`match_bruteforce`). Otherwise the top-``k`` embedding neighbours
    are re-ranked under ``spec``.
    """
    index.check_fresh(bank)
    if bank.m == 0:
        raise ValueError("match_indexed: empty bank")
    q = embed(spec, np.asarray(y, np.float32)[None])[0]
    ids = index.query(q, k=1 if spec.embedding_exact else k, slack=slack)
    ids = np.sort(ids)
    d = _spec_distances(bank, y, spec, ids)
    best = int(np.argmin(d))
    return int(ids[best]), float(d[best])
