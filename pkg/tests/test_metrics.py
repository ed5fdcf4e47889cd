import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cimle import pipeline
from cimle.config import train_config
from cimle.distance import distance, pixels_spec
from cimle.generators import build_generator, generate
from cimle.metrics import (
    FWV_BANDWIDTHS,
    FWVConfig,
    MetricReport,
    faithfulness_weighted_variance,
    frame_consistency,
    hue_histogram,
    interpolate,
    mode_coverage,
    pairwise_diversity,
    rgb_hue,
    smoothness_ratio,
)
from cimle.tasks import get_task
from cimle.trainer import train

from oracles import expected_coverage, fwv_two_samples, hue_degrees

L2 = pixels_spec(2)


class TwoPoint:
    """Emits ``a`` or ``b`` by the sign of the first latent coordinate."""

    latent_shape = (1,)

    def __init__(self, a, b):
        self.a, self.b = np.asarray(a, np.float32), np.asarray(b, np.float32)

    def sample(self, x, z):
        return np.where(z[:, :1] > 0, self.a, self.b)


class Constant:
    latent_shape = (3,)

    def sample(self, x, z):
        return np.broadcast_to(np.asarray(x, np.float32), (len(z), *np.shape(x)[1:])).copy()


class Reversed:
    def __init__(self, inner):
        self.inner, self.latent_shape = inner, inner.latent_shape

    def sample(self, x, z):
        return self.inner.sample(x, z)[::-1]


class ModePicker:
    """Draws one of the task's true modes uniformly; ``fixed`` always picks that mode."""

    latent_shape = (1,)

    def __init__(self, task, fixed=None):
        self.task, self.fixed = task, fixed

    def sample(self, x, z):
        modes = self.task.modes(x)
        k = modes.shape[1]
        if self.fixed is not None:
            pick = np.full(len(z), self.fixed)
        else:
            u = 0.5 * (1 + np.vectorize(math.erf)(z[:, 0].astype(np.float64) / math.sqrt(2)))
            pick = np.minimum((u * k).astype(int), k - 1)
        return modes[np.arange(len(z)), pick]


# -- faithfulness-weighted variance ----------------------------------------------


def test_fwv_default_bandwidths():
    assert FWV_BANDWIDTHS == (0.3, 0.2, 0.15)


def test_fwv_identical_samples_is_zero():
    y = np.random.default_rng(0).uniform(0, 1, (3, 6))
    samples = np.repeat(y[:, None] + 0.1, 5, axis=1)
    assert np.all(faithfulness_weighted_variance(samples, y, FWVConfig(L2)).values == 0)


def test_fwv_sample_at_ground_truth_has_unit_weight():
    y = np.array([[0.2, 0.4, 0.6]], np.float32)
    other = np.array([0.5, 0.5, 0.5], np.float32)
    rep = faithfulness_weighted_variance(np.stack([[y[0], other]]), y, FWVConfig(L2, sigma=0.2))
    mid = (y[0].astype(np.float64) + other) / 2
    d_mid = float(np.linalg.norm(y[0] - mid))
    w_other = math.exp(-float(np.linalg.norm(other - y[0])) / (2 * 0.2**2))
    assert rep.values[0] == pytest.approx((1.0 * d_mid + w_other * d_mid) / 2, rel=1e-6)


def test_fwv_two_sample_oracle():
    r = np.random.default_rng(1)
    for spec in (L2, pixels_spec(1)):
        for _ in range(50):
            s1, s2, y = r.uniform(0, 1, (3, 8)).astype(np.float32)
            sigma = float(r.choice(FWV_BANDWIDTHS))
            got = faithfulness_weighted_variance(np.stack([[s1, s2]]), y[None], FWVConfig(spec, sigma)).values[0]
            want = fwv_two_samples(s1, s2, y, sigma, lambda a, b: distance(spec, a, b))
            assert got == pytest.approx(want, rel=1e-6)


def test_fwv_normalization_and_raw():
    r = np.random.default_rng(2)
    samples, y = r.uniform(0, 1, (4, 6, 5)), r.uniform(0, 1, (4, 5))
    rep = faithfulness_weighted_variance(samples, y, FWVConfig(L2))
    assert rep.extra["raw"] == pytest.approx(rep.values.sum() * 6, rel=1e-12)
    assert rep.aggregate == pytest.approx(rep.extra["raw"] / 24, rel=1e-12)
    assert rep.config["mean_sample"] == "elementwise"


def test_fwv_bandwidth_monotone_exactly():
    r = np.random.default_rng(3)
    for _ in range(100):
        samples = r.uniform(0, 1, (2, 4, 6)).astype(np.float32)
        y = r.uniform(0, 1, (2, 6)).astype(np.float32)
        vals = [faithfulness_weighted_variance(samples, y, FWVConfig(L2, s)).aggregate for s in FWV_BANDWIDTHS]
        assert vals[0] > vals[1] > vals[2] > 0


@given(hnp.arrays(np.float32, (3, 4), elements=st.floats(0, 1, width=32)), st.booleans())
def test_fwv_zero_iff_identical(sample_rows, collapse):
    samples = np.repeat(sample_rows[:1], 3, axis=0) if collapse else sample_rows
    rep = faithfulness_weighted_variance(samples[None], np.full((1, 4), 0.5, np.float32), FWVConfig(L2))
    assert rep.values[0] >= 0
    identical = bool(np.all(samples == samples[0]))
    assert (rep.values[0] == 0) == identical


def test_fwv_config_errors():
    for sigma in (0.0, -0.1):
        with pytest.raises(ValueError):
            FWVConfig(L2, sigma)
    with pytest.raises(ValueError):
        FWVConfig(L2, samples=1)
    with pytest.raises(ValueError):
        faithfulness_weighted_variance(np.zeros((1, 1, 3)), np.zeros((1, 3)), FWVConfig(L2))


def test_report_aggregate_is_mean():
    rep = MetricReport("x", np.array([0.1, 0.2, 0.7]))
    assert rep.aggregate == pytest.approx(1.0 / 3)
    assert rep.tsv().splitlines()[0] == "metric\tinput\tvalue"


# -- pairwise diversity ----------------------------------------------------------


def test_deterministic_sampler_has_zero_diversity():
    x = np.random.default_rng(4).uniform(0, 1, (5, 1, 6)).astype(np.float32)
    assert np.all(pairwise_diversity(Constant(), x, L2).values == 0)


def test_two_point_diversity_is_half_gap():
    a, b = np.zeros(4), np.full(4, 0.5)
    gap = 1.0
    rep = pairwise_diversity(TwoPoint(a, b), np.zeros((1, 1)), L2, pairs=10**4)
    assert abs(rep.aggregate - gap / 2) <= 3 * (gap / 2) / math.sqrt(10**4)


def test_diversity_invariant_to_relabeling_and_sample_order():
    r = np.random.default_rng(5)
    gen = build_generator("vec-mlp", seed=1, init="random")
    x = r.uniform(0, 1, (6, *gen.cond_shape)).astype(np.float32)
    base = pairwise_diversity(gen, x, L2, pairs=10)
    perm = r.permutation(6)
    shuffled = pairwise_diversity(gen, x[perm], L2, pairs=10)
    assert np.array_equal(shuffled.values, base.values[perm])
    assert shuffled.aggregate == base.aggregate
    assert pairwise_diversity(Reversed(gen), x, L2, pairs=10).aggregate == base.aggregate


def test_diversity_rejects_zero_pairs():
    with pytest.raises(ValueError):
        pairwise_diversity(Constant(), np.zeros((1, 1, 2)), L2, pairs=0)


# -- hue histogram ---------------------------------------------------------------


def image_of(*colours, w=4):
    cols = [np.broadcast_to(np.asarray(c, float)[:, None, None], (3, 4, w)) for c in colours]
    return np.concatenate(cols, axis=2)


def test_hue_red_grey_and_two_tone():
    red = hue_histogram([image_of([1, 0, 0])])
    assert red.density[0] == 1.0 and red.density.sum() == 1.0
    grey = hue_histogram([image_of([0.4, 0.4, 0.4])])
    assert grey.all_achromatic and grey.density.sum() == 0
    two = hue_histogram([image_of([1, 0, 0], [0, 1, 0])], bins=36)
    assert two.density[0] == 0.5 and two.density[12] == 0.5


def test_hue_matches_textbook_rule():
    rgb = np.random.default_rng(6).uniform(0, 1, (2000, 3))
    rgb[:50] = rgb[:50, :1]  # some greys
    got = rgb_hue(rgb)
    for px, h in zip(rgb, got):
        want = hue_degrees(*px)
        if want is None:
            assert np.isnan(h)
        else:
            assert h == pytest.approx(want, abs=1e-9)
            assert 0 <= h < 360


def test_hue_bins_validated():
    with pytest.raises(ValueError):
        hue_histogram([image_of([1, 0, 0])], bins=1)


# -- mode coverage ---------------------------------------------------------------


def test_single_mode_sampler_covers_one_over_k():
    task = get_task("two-mode-vec")
    assert mode_coverage(ModePicker(task, fixed=1), task, draws=50, inputs=40).aggregate == 1 / task.k


@pytest.mark.parametrize("draws", [1, 2, 3])
def test_uniform_mode_sampler_matches_expected_coverage(draws):
    task = get_task("two-mode-vec")
    rep = mode_coverage(ModePicker(task), task, draws=draws, inputs=4000, seed=draws)
    sigma = rep.values.std() / math.sqrt(len(rep.values))
    assert abs(rep.aggregate - expected_coverage(task.k, draws)) <= 3 * max(sigma, 1e-12)


def test_zero_eps_with_continuous_noise():
    task = get_task("two-mode-vec")
    gen = build_generator("vec-mlp", seed=0, init="random")
    assert mode_coverage(gen, task, eps=0.0, draws=20, inputs=20).aggregate == 0.0


# -- interpolation and frame consistency ----------------------------------------


@pytest.fixture(scope="module")
def trained_vec():
    cfg = pipeline.default_config(task="two-mode-vec", seed=0)
    run = pipeline.prepare(cfg)
    gen, _ = train(run.gen, run.dataset, run.spec, train_config(cfg))
    return run, gen


def test_interpolation_endpoints_bit_identical():
    gen = build_generator("layout-small", seed=2, init="random")
    r = np.random.default_rng(7)
    x = r.uniform(0, 1, gen.cond_shape).astype(np.float32)
    za, zb = r.standard_normal((2, *gen.latent_shape)).astype(np.float32)
    frames = interpolate(gen, x, za, zb, 7)
    assert np.array_equal(frames[0], generate(gen, x, za))
    assert np.array_equal(frames[-1], generate(gen, x, zb))
    two = interpolate(gen, x, za, zb, 2)
    assert np.array_equal(two, frames[[0, -1]])
    const = interpolate(gen, x, za, za, 5)
    assert all(np.array_equal(f, const[0]) for f in const)
    with pytest.raises(ValueError):
        interpolate(gen, x, za, zb, 1)


def test_interpolation_smoothness_on_trained_model(trained_vec):
    # Unsquared l2 between frames; worst ratio measured 3.75 over these 20 paths.
    run, gen = trained_vec
    x = pipeline.eval_inputs(run.task, 20, 0)
    r = np.random.default_rng(0)
    for j in range(20):
        za, zb = r.standard_normal((2, 4)).astype(np.float32)
        assert smoothness_ratio(L2, interpolate(gen, x[j], za, zb, 20)) <= 5.0


def test_frame_consistency_trivial_cases():
    gen = build_generator("layout-small", seed=3, init="random")
    x = np.random.default_rng(8).uniform(0, 1, gen.cond_shape).astype(np.float32)
    assert np.all(frame_consistency(gen, np.stack([x] * 4), L2) == 0)
    assert len(frame_consistency(gen, x[None], L2)) == 0


def test_fixed_latent_steadier_than_fresh(trained_vec):
    run, gen = trained_vec
    inputs = np.linspace(0.3, 0.32, 10, dtype=np.float32)[:, None] * np.ones(gen.cond_shape, np.float32)
    fixed = frame_consistency(gen, inputs, L2)
    fresh = frame_consistency(gen, inputs, L2, fresh=True)
    assert len(fixed) == 9 and fixed.mean() < fresh.mean()
