import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cimle import bench
from cimle.distance import DistanceSpec, layout_spec, pixels_spec, sr_spec
from cimle.generators import build_generator
from cimle.matching import (
    ProjectionIndex,
    SampleBank,
    StaleIndexError,
    build_index,
    default_budget,
    match_bruteforce,
    match_indexed,
)


def vec_bank(values):
    values = np.asarray(values, np.float32).reshape(len(values), -1)
    return SampleBank(0, np.zeros((len(values), 1)), values)


def exact_argmin(points, q):
    d = np.sum((np.asarray(points, np.float64) - q) ** 2, axis=1)
    return int(np.flatnonzero(d == d.min())[0])


# -- exhaustive oracle -----------------------------------------------------------


def test_argmin_example():
    assert match_bruteforce(vec_bank([[3], [1], [2]]), [0], pixels_spec()) == (1, 1.0)


def test_singleton_bank():
    assert match_bruteforce(vec_bank([[7.5]]), [0], pixels_spec())[0] == 0


def test_identical_samples_pick_lowest_index():
    assert match_bruteforce(vec_bank([[2, 2]] * 5), [0, 0], pixels_spec())[0] == 0


def test_empty_bank_rejected():
    with pytest.raises(ValueError):
        match_bruteforce(vec_bank(np.zeros((0, 2))), [0, 0], pixels_spec())


# -- projection index ------------------------------------------------------------


@given(hnp.arrays(np.float64, (2, 5), elements=st.floats(-5, 5)), hnp.arrays(np.float64, 5, elements=st.floats(-5, 5)))
def test_two_points(points, q):
    got = ProjectionIndex(points, 2, 3).query(q)[0]
    assert got == exact_argmin(points, q)


@given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 2**16), st.integers(1, 8))
def test_small_random_banks(m, dim, seed, k):
    r = np.random.default_rng(seed)
    points = r.standard_normal((m, dim))
    index = ProjectionIndex(points, 2, 4, seed=seed)
    for q in r.standard_normal((5, dim)):
        got = index.query(q, k=k)
        d = np.sqrt(np.sum((points - q) ** 2, axis=1))
        want = np.lexsort((np.arange(m), d))[: min(k, m)]
        assert list(got[: min(k, m)]) == list(want)


def test_iid_points_d512_exact():
    points, queries = bench.make_points(10_000, 512, 1000, seed=3, kind="iid")
    index = ProjectionIndex(points, seed=3)
    got = np.array([index.query(q)[0] for q in queries])
    assert np.array_equal(got, bench.oracle_nearest(points, queries))


def test_manifold_points_exact_on_both_direction_schemes():
    points, queries = bench.make_points(2000, 64, 300, seed=4)
    want = np.array([exact_argmin(points, q) for q in queries])
    for scheme in ("data", "gaussian"):
        index = ProjectionIndex(points, directions=scheme, seed=1)
        assert np.array_equal([index.query(q)[0] for q in queries], want)


def test_duplicates_resolve_to_lowest_id():
    r = np.random.default_rng(0)
    base = r.standard_normal((50, 8))
    points = np.concatenate([base, base, base])
    index = ProjectionIndex(points, 2, 4)
    for j in range(50):
        assert index.query(base[j])[0] == j
        q = base[j] + 1e-3 * r.standard_normal(8)
        assert index.query(q)[0] == exact_argmin(points, q) == j
    assert index.query(base[5], k=3).tolist() == [5, 55, 105]


def test_index_structure():
    points = np.random.default_rng(1).standard_normal((500, 30))
    index = ProjectionIndex(points, 3, 5)
    np.testing.assert_allclose(np.linalg.norm(index.directions, axis=1), 1.0, atol=1e-12)
    for s in range(15):
        assert np.all(np.diff(index.sorted_proj[s]) >= 0)
        np.testing.assert_array_equal(index.sorted_proj[s], index.proj[index.order[s], s])


def test_invalid_embeddings_rejected():
    with pytest.raises(ValueError):
        ProjectionIndex(np.array([[0.0, np.nan]]))
    with pytest.raises(ValueError):
        ProjectionIndex(np.zeros((0, 3)))


def test_default_budget():
    assert default_budget(10) == 100
    assert default_budget(10_000) == 133


# -- indexed matching against the oracle -----------------------------------------


def test_indexed_equals_bruteforce_when_embedding_exact():
    r = np.random.default_rng(2)
    spec = pixels_spec(2)
    trials = 0
    for b in range(20):
        bank = vec_bank(r.uniform(0, 1, (300, 12)))
        index = build_index(bank, spec=spec, seed=b)
        for y in r.uniform(0, 1, (50, 12)):
            assert match_indexed(index, bank, y, spec) == match_bruteforce(bank, y, spec)
            trials += 1
    assert trials == 1000


def test_indexed_equals_bruteforce_on_image_spec():
    r = np.random.default_rng(3)
    spec = DistanceSpec(tuple(dataclasses.replace(t, squared=True) for t in sr_spec().terms))
    assert spec.embedding_exact and not sr_spec().embedding_exact
    bank = SampleBank(0, np.zeros((64, 1)), r.uniform(0, 1, (64, 3, 16, 16)))
    index = build_index(bank, spec=spec)
    for y in r.uniform(0, 1, (20, 3, 16, 16)):
        assert match_indexed(index, bank, y, spec)[0] == match_bruteforce(bank, y, spec)[0]


def test_proxy_with_k_equal_m_is_exhaustive():
    r = np.random.default_rng(4)
    spec = layout_spec()
    bank = SampleBank(0, np.zeros((24, 1)), r.uniform(0, 1, (24, 3, 8, 8)))
    index = build_index(bank, spec=spec)
    for y in r.uniform(0, 1, (10, 3, 8, 8)):
        assert match_indexed(index, bank, y, spec, k=bank.m) == match_bruteforce(bank, y, spec)


def test_stale_index_rejected():
    r = np.random.default_rng(5)
    spec = pixels_spec()
    bank = vec_bank(r.uniform(0, 1, (10, 3)))
    index = build_index(bank, spec=spec)
    bank.regenerate(np.zeros((10, 1)), r.uniform(0, 1, (10, 3)))
    with pytest.raises(StaleIndexError):
        match_indexed(index, bank, np.zeros(3), spec)
    other = vec_bank(r.uniform(0, 1, (10, 3)))
    with pytest.raises(StaleIndexError):
        match_indexed(build_index(bank, spec=spec), other, np.zeros(3), spec)


@pytest.mark.parametrize("arch,spec", [("sr-small", sr_spec()), ("layout-small", layout_spec())], ids=["sr", "layout"])
def test_proxy_top_k_quality(arch, spec):
    # Measured 100/100 agreement on these banks; the bound pins proxy quality.
    r = np.random.default_rng(0)
    gen = build_generator(arch, seed=1, init="random")
    agree = 0
    for _ in range(10):
        x = r.uniform(0, 1, (1, *gen.cond_shape)).astype(np.float32)
        z = r.standard_normal((50, *gen.latent_shape)).astype(np.float32)
        bank = SampleBank(0, z, gen.sample(np.repeat(x, 50, 0), z))
        index = build_index(bank, spec=spec)
        for _ in range(10):
            y = gen.sample(x, r.standard_normal((1, *gen.latent_shape)).astype(np.float32))[0]
            agree += match_indexed(index, bank, y, spec)[0] == match_bruteforce(bank, y, spec)[0]
    assert agree >= 95
