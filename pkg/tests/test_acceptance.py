"""End-to-end acceptance criteria, one test each, with a PASS/FAIL summary line."""

import dataclasses
import time

import numpy as np
import pytest

from cimle import bench, formats, pipeline
from cimle import config as cfgmod
from cimle import rng as rngmod
from cimle.config import train_config
from cimle.distance import masked_distance, pixels_spec
from cimle.generators import build_generator, generate
from cimle.matching import ProjectionIndex
from cimle.metrics import (
    FWV_BANDWIDTHS,
    FWVConfig,
    faithfulness_weighted_variance,
    frame_consistency,
    interpolate,
    mode_coverage,
    pairwise_diversity,
)
from cimle.rarity import allocate_batch, build_mask, rarity_scores
from cimle.tasks import get_task
from cimle.trainer import TrainConfig, pretrain_zero_noise, train, train_regression_baseline

from acceptance_log import record
from oracles import fwv_two_samples, gaussian_kde_density, region_split_masked_l1
from test_autodiff import fidelity_errors
from test_data import fuzz_loaders

L2 = pixels_spec(2)


def trained(task, seed, **overrides):
    cfg = pipeline.default_config(task=task, seed=seed, **overrides)
    run = pipeline.prepare(cfg)
    baseline = train_regression_baseline(run.gen.copy(), run.dataset, run.spec, train_config(cfg))
    gen, report = train(run.gen, run.dataset, run.spec, train_config(cfg), table=run.table)
    return run, gen, report, baseline


@pytest.fixture(scope="module")
def layout_models():
    """Per seed: balanced IMLE + baseline, and plain / rebalanced IMLE on the imbalanced variant."""
    out = {}
    for seed in range(3):
        run, gen, _, baseline = trained("toy-layout", seed)
        _, plain, _, _ = trained("toy-layout-imbalanced", seed)
        imb, reb, _, _ = trained("toy-layout-imbalanced", seed, rebalance=1)
        out[seed] = {"run": run, "imle": gen, "baseline": baseline, "imb_run": imb, "plain": plain, "rebalanced": reb}
    return out


# -- 1 ------------------------------------------------------------------------------


def test_criterion_1_mode_coverage_vs_collapse():
    t0 = time.perf_counter()
    imle, base = [], []
    for seed in range(5):
        run, gen, _, baseline = trained("two-mode-vec", seed)
        imle.append(mode_coverage(gen, run.task, 0.1, draws=100, inputs=100, seed=seed).aggregate)
        base.append(mode_coverage(baseline, run.task, 0.1, draws=100, inputs=100, seed=seed).aggregate)
    elapsed = time.perf_counter() - t0
    ok = min(imle) >= 0.95 and max(base) <= 0.55 and elapsed <= 600
    record(1, "mode coverage", ok, f"IMLE coverage min {min(imle):.3f} (>= 0.95), baseline max {max(base):.3f} "
           f"(<= 0.55), {elapsed:.0f}s (<= 600s)")
    assert ok


# -- 2 ------------------------------------------------------------------------------


def test_criterion_2_regression_to_the_mean():
    t0 = time.perf_counter()
    task = get_task("two-mode-vec")
    ds = task.make(20_000, 0)
    gen = build_generator("vec-mlp", seed=0, **task.generator_kwargs())
    pretrain_zero_noise(gen, ds, pixels_spec(2, squared=True), 4000, 3e-4, minibatch=512, seed=0)
    gen.noise_mode = "zero"
    x = pipeline.eval_inputs(task, 500, 1)
    pred = gen.sample(x, np.zeros((500, *gen.latent_shape), np.float32)).astype(np.float64)
    mean = task.conditional_mean(x)
    rel = float(np.mean(np.linalg.norm(pred - mean, axis=1) / np.linalg.norm(mean, axis=1)))
    modes = task.modes(x).astype(np.float64)
    to_mode = float(np.mean(np.min(np.linalg.norm(modes - pred[:, None], axis=2), axis=1) / np.linalg.norm(mean, axis=1)))
    elapsed = time.perf_counter() - t0
    ok = rel < 0.05 and elapsed <= 120
    record(2, "regression to the mean", ok, f"mean relative error to conditional mean {rel:.4f} (< 0.05), "
           f"to nearest mode {to_mode:.3f}, {elapsed:.0f}s (<= 120s)")
    assert ok


# -- 3 ------------------------------------------------------------------------------


def matching_share(task, **overrides):
    cfg = pipeline.default_config(task=task, m=1000, seed=0, **overrides)
    run = pipeline.prepare(cfg)
    _, report = train(run.gen, run.dataset, run.spec, train_config(cfg))
    fr = report.fractions
    return fr["features"] + fr["matching"]


def test_criterion_3_matcher_exactness_and_cost():
    points, queries = bench.make_points(10_000, 512, 100_000, seed=0)
    index = ProjectionIndex(points, seed=0)
    t0 = time.perf_counter()
    got = np.array([index.query(q)[0] for q in queries])
    t_index = (time.perf_counter() - t0) / len(queries)
    exact = float(np.mean(got == bench.oracle_nearest(points, queries)))
    p32 = points.astype(np.float32)
    t0 = time.perf_counter()
    for q in queries[:1000]:
        bench.brute_force(p32, q.astype(np.float32))
    t_brute = (time.perf_counter() - t0) / 1000
    ratio = t_index / t_brute
    # Matching share of training at m = 1000 with the default exhaustive matcher.
    vec = matching_share("two-mode-vec", outer_steps=5)
    sr = matching_share("toy-sr", outer_steps=2, batch_size=8, minibatch=4)
    layout = matching_share("toy-layout", outer_steps=1, batch_size=4, minibatch=2)
    ok = exact == 1.0 and ratio <= 0.2 and vec < 0.1 and sr < 0.1
    record(3, "matcher", ok, f"exact on {exact:.2%} of 1e5 queries (100%), indexed/brute time {ratio:.3f} (<= 0.2), "
           f"matching share at m=1000: two-mode-vec {vec:.3f}, toy-sr {sr:.3f} (< 0.1); "
           f"toy-layout {layout:.3f} (reported, feature-bound)")
    assert ok


# -- 4 ------------------------------------------------------------------------------


def test_criterion_4_gradient_fidelity(monkeypatch):
    t0 = time.perf_counter()
    errors, crossed, fine = fidelity_errors(monkeypatch)
    elapsed = time.perf_counter() - t0
    clean = float(np.mean(errors[~crossed] <= 1e-3))
    raw = float(np.mean(errors <= 1e-3))
    kinks_ok = bool(np.all(fine[crossed] <= 1e-3))
    ok = clean >= 0.99 and kinks_ok and elapsed <= 60
    record(4, "gradient fidelity", ok, f"{clean:.2%} of {int((~crossed).sum())} coordinates away from kinks within 1e-3 "
           f"(>= 99%), raw rate {raw:.2%} over {len(errors)}, {int(crossed.sum())} kink-straddling coordinates "
           f"{'all' if kinks_ok else 'NOT all'} within 1e-3 on a 1e-6 stencil, {elapsed:.0f}s (<= 60s)")
    assert ok


# -- 5 ------------------------------------------------------------------------------


def test_criterion_5_fwv_correctness():
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        s1, s2, y = r.uniform(0, 1, (3, 12)).astype(np.float32)
        sigma = float(r.choice(FWV_BANDWIDTHS))
        got = faithfulness_weighted_variance(np.stack([[s1, s2]]), y[None], FWVConfig(L2, sigma)).values[0]
        want = fwv_two_samples(s1, s2, y, sigma, lambda a, b: float(np.linalg.norm(np.float64(a) - b)))
        worst = max(worst, abs(got - want) / max(abs(want), 1e-12))
    monotone = 0
    for _ in range(100):
        samples = r.uniform(0, 1, (3, 5, 8)).astype(np.float32)
        y = r.uniform(0, 1, (3, 8)).astype(np.float32)
        v = [faithfulness_weighted_variance(samples, y, FWVConfig(L2, s)).aggregate for s in FWV_BANDWIDTHS]
        monotone += v[0] > v[1] > v[2]
    zero_iff = True
    for _ in range(100):
        base = r.uniform(0, 1, 6).astype(np.float32)
        same = np.repeat(base[None, None], 4, axis=1)
        diff = same.copy()
        diff[0, int(r.integers(4)), int(r.integers(6))] += np.float32(0.25)
        y = r.uniform(0, 1, (1, 6)).astype(np.float32)
        zero_iff &= faithfulness_weighted_variance(same, y, FWVConfig(L2)).values[0] == 0
        zero_iff &= faithfulness_weighted_variance(diff, y, FWVConfig(L2)).values[0] > 0
    ok = worst <= 1e-6 and monotone == 100 and zero_iff
    record(5, "FWV", ok, f"two-sample oracle max relative error {worst:.1e} (<= 1e-6), strict bandwidth "
           f"monotonicity on {monotone}/100 fixtures, zero-iff-identical {'holds' if zero_iff else 'violated'}")
    assert ok


# -- 6 ------------------------------------------------------------------------------


def test_criterion_6_rebalancing():
    r = np.random.default_rng(1)
    colours = r.uniform(0, 1, (15, 3))
    imgs = np.broadcast_to(colours[:, :, None, None], (15, 3, 4, 4)).copy()
    labels = np.zeros((15, 4, 4), int)
    table = rarity_scores(labels, imgs, 1, bandwidth=0.12)
    case_err = max(abs(table.rarity[0, k] * gaussian_kde_density(colours, 0.12, colours[k]) - 1) for k in range(15))

    draws = allocate_batch(table, 10**5, np.random.default_rng(2))
    counts = np.bincount(draws, minlength=15)
    p = table.rarity[0] / table.rarity[0].sum()
    sigma = np.sqrt(10**5 * p * (1 - p))
    within = bool(np.all(np.abs(counts - 10**5 * p) <= 3 * sigma))

    labs = r.integers(0, 3, (6, 8, 8))
    table2 = rarity_scores(labs, r.uniform(0, 1, (6, 3, 8, 8)), 3)
    mask_err, max_one = 0.0, True
    for k in range(6):
        mask = build_mask(labs[k], table2, k).normalized
        max_one &= mask.max() == 1.0
        a, b = r.uniform(0, 1, (2, 3, 8, 8))
        want = region_split_masked_l1(a, b, mask)
        mask_err = max(mask_err, abs(masked_distance(pixels_spec(1), a, b, mask) - want) / want)
    ok = case_err <= 1e-12 and within and mask_err <= 1e-6 and max_one
    record(6, "rebalancing", ok, f"rarity case formula relative error {case_err:.1e}, allocation within 3 sigma "
           f"on all 15 images over 1e5 draws: {within}, masked loss vs region oracle {mask_err:.1e} (<= 1e-6), "
           f"mask max exactly 1: {max_one}")
    assert ok


# -- 7 ------------------------------------------------------------------------------


def test_criterion_7_diversity_ordering(layout_models):
    rows, ok = [], True
    for seed, m in layout_models.items():
        x = pipeline.eval_inputs(m["run"].task, 25, 0)
        imle = pairwise_diversity(m["imle"], x, m["run"].spec, pairs=40).aggregate
        base = pairwise_diversity(m["baseline"], x, m["run"].spec, pairs=40).aggregate
        xi = pipeline.eval_inputs(m["imb_run"].task, 25, 0)
        plain = pairwise_diversity(m["plain"], xi, m["imb_run"].spec, pairs=40).aggregate
        reb = pairwise_diversity(m["rebalanced"], xi, m["imb_run"].spec, pairs=40).aggregate
        ok &= imle > base == 0.0 and plain <= reb
        rows.append(f"seed {seed}: IMLE {imle:.3f} > baseline {base:.3f}, plain {plain:.3f} <= rebalanced {reb:.3f}")
    record(7, "diversity ordering", ok, "; ".join(rows))
    assert ok


# -- 8 ------------------------------------------------------------------------------


def test_criterion_8_interpolation_and_consistency(layout_models):
    endpoints, rows, ok = True, [], True
    for seed, m in layout_models.items():
        gen, task, spec = m["imle"], m["run"].task, m["run"].spec
        r = rngmod.substream(seed, 321)
        for x in pipeline.eval_inputs(task, 5, seed):
            za, zb = rngmod.sample_latent(r, (2, *gen.latent_shape))
            frames = interpolate(gen, x, za, zb, 8)
            endpoints &= np.array_equal(frames[0], generate(gen, x, za))
            endpoints &= np.array_equal(frames[-1], generate(gen, x, zb))
        seq, _ = task.frame_sequence(12, seed)
        fixed = frame_consistency(gen, seq, spec, seed=seed).mean()
        fresh = frame_consistency(gen, seq, spec, fresh=True, seed=seed).mean()
        ok &= fixed < fresh
        rows.append(f"seed {seed}: fixed-z {fixed:.3f} < fresh-z {fresh:.3f}")
    ok &= endpoints
    record(8, "interpolation", ok, f"endpoints bit-identical on 15 paths: {endpoints}; " + "; ".join(rows))
    assert ok


# -- 9 ------------------------------------------------------------------------------


def test_criterion_9_reproducibility_and_formats(tmp_path):
    cfg = TrainConfig(outer_steps=3, batch_size=8, m=6, inner_steps=3, minibatch=4, seed=4)
    ds = get_task("toy-sr").make(16, 4)
    outs = []
    for workers in (1, 1, 4):
        gen = build_generator("sr-small", seed=4)
        c = dataclasses.replace(cfg, workers=workers)
        _, report = train(gen, ds, cfgmod.base_spec(pipeline.default_config(task="toy-sr")), c)
        outs.append((report, formats.checkpoint_bytes(gen)))
    same_runs = outs[0] == outs[1]
    same_workers = outs[0] == outs[2]

    gen = build_generator("layout-small", seed=5, init="random")
    formats.save_checkpoint(tmp_path / "c.ciml", gen)
    back = formats.load_checkpoint(tmp_path / "c.ciml")
    ckpt_rt = formats.checkpoint_bytes(back) == (tmp_path / "c.ciml").read_bytes()
    img = np.random.default_rng(6).uniform(0, 1, (3, 8, 8))
    formats.save_image(tmp_path / "i.ppm", img)
    loaded = formats.load_image(tmp_path / "i.ppm")
    formats.save_image(tmp_path / "j.ppm", loaded)
    img_rt = (tmp_path / "i.ppm").read_bytes() == (tmp_path / "j.ppm").read_bytes()
    img_rt &= float(np.abs(loaded - img).max()) <= 1 / 255

    crashes, rejected, parsed = fuzz_loaders(10_000, seed=0)
    ok = same_runs and same_workers and ckpt_rt and img_rt and not crashes
    record(9, "reproducibility", ok, f"identical reports/checkpoints across runs: {same_runs}, across 1 vs 4 workers: "
           f"{same_workers}; checkpoint round trip bit-identical: {ckpt_rt}; image round trip: {img_rt}; "
           f"fuzzing 1e4 mutations: {len(crashes)} crashes ({rejected} rejected, {parsed} parsed)")
    assert ok
