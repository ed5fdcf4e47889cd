"""Benchmark harness for the projection index against exhaustive search.

Banks mimic generator output: a smooth random map of a low-dimensional
latent into ``R^D`` plus small isotropic noise, with queries drawn the same
way. ``kind="iid"`` gives unstructured Gaussian points, the worst case for
any projection method.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .matching import ProjectionIndex


def make_points(m, dim, queries, seed=0, kind="manifold", latent_dim=4, noise=0.01):
    r = rngmod.substream(seed, rngmod.INDEX, 1000)
    if kind == "iid":
        return r.standard_normal((m, dim)), r.standard_normal((queries, dim))
    if kind != "manifold":
        raise ValueError(f"unknown benchmark data kind {kind!r}")
    w1 = r.standard_normal((latent_dim, 32))
    w2 = r.standard_normal((32, dim)) / np.sqrt(32)

    def draw(n):
        return np.tanh(r.standard_normal((n, latent_dim)) @ w1) @ w2 + noise * r.standard_normal((n, dim))

    return draw(m), draw(queries)


def brute_force(points, q) -> int:
    """Euclidean argmin, lowest index on ties."""
    diff = points - q
    return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))


def oracle_nearest(points, queries, chunk=2000) -> np.ndarray:
    """Exact argmin for many queries: a matmul shortlist, then direct re-ranking."""
    p = np.asarray(points, np.float64)
    pn = np.einsum("ij,ij->i", p, p)
    out = np.empty(len(queries), np.int64)
    for s in range(0, len(queries), chunk):
        q = np.asarray(queries[s : s + chunk], np.float64)
        approx = pn[None, :] - 2.0 * q @ p.T
        short = np.argpartition(approx, 4, axis=1)[:, :5]
        for i, cand in enumerate(short):
            gap = np.sort(approx[i, cand])
            if gap[-1] - gap[0] < 1e-6 * (1 + abs(gap[0])):
                # Shortlist not separated from the rest; fall back to a full scan.
                out[s + i] = brute_force(p, q[i])
                continue
            diff = p[cand] - q[i]
            d = np.einsum("ij,ij->i", diff, diff)
            out[s + i] = cand[d == d.min()].min()
    return out


@dataclass
class BenchRow:
    m: int
    dim: int
    build_ms: float
    query_us: float
    brute_us: float
    exact_rate: float
    queries: int

    @property
    def ratio(self):
        return self.query_us / self.brute_us


def run(m=10_000, dim=512, queries=1000, seed=0, kind="manifold", n_composite=2, n_simple=10, budget=None):
    points, qs = make_points(m, dim, queries, seed, kind)
    t0 = time.perf_counter()
    index = ProjectionIndex(points, n_composite, n_simple, budget, seed)
    build = time.perf_counter() - t0
    t0 = time.perf_counter()
    got = np.array([index.query(q)[0] for q in qs])
    t_index = time.perf_counter() - t0
    p32 = points.astype(np.float32)
    t0 = time.perf_counter()
    want = np.array([brute_force(p32, q.astype(np.float32)) for q in qs])
    t_brute = time.perf_counter() - t0
    # The float32 scan is the timing baseline; exactness is judged in float64.
    want = np.array([brute_force(points, q) for q in qs]) if queries <= 2000 else oracle_nearest(points, qs)
    return BenchRow(m, dim, build * 1e3, t_index / queries * 1e6, t_brute / queries * 1e6,
                    float(np.mean(got == want)), queries)


def table(rows) -> str:
    lines = ["m\tD\tbuild_ms\tquery_us\tbrute_us\texact_match_rate"]
    for r in rows:
        lines.append(f"{r.m}\t{r.dim}\t{r.build_ms:.1f}\t{r.query_us:.1f}\t{r.brute_us:.1f}\t{r.exact_rate:.4f}")
    return "\n".join(lines) + "\n"

