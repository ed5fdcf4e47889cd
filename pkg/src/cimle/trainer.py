"""Conditional IMLE training, zero-noise pretraining and the regression baseline.

One outer iteration picks a batch of inputs, draws ``m`` latent codes per
input, keeps the code whose sample lands nearest the target, and then takes
``inner_steps`` gradient steps on random minibatches of the matched
``(x, z, y)`` triples. The matched codes stay fixed for the whole outer
iteration; each inner step runs the generator forward again with the
current parameters.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .distance import DistanceSpec, distances
from .generators import ConditionalGenerator
from .matching import MatchAssignment, SampleBank, build_index, match_bruteforce, match_indexed
from .rarity import RarityTable, allocate_batch, build_mask
from .tasks import Dataset

PRETRAIN = 8


class NumericalAbort(FloatingPointError):
    def __init__(self, message, input_index=None):
        super().__init__(message)
        self.input_index = input_index


@dataclass
class TrainConfig:
    outer_steps: int = 20
    batch_size: int = 64
    m: int = 20
    inner_steps: int = 100
    minibatch: int = 16
    lr: float = 1e-3
    pretrain_steps: int = 0
    upsample_switch_step: int = 0
    rebalance: bool = False
    rebalance_mask: bool = True
    optimizer: str = "adam"
    matcher: str = "bruteforce"
    index_k: int = 16
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        counts = {
            "outer_steps": self.outer_steps, "batch_size": self.batch_size, "m": self.m,
            "inner_steps": self.inner_steps, "minibatch": self.minibatch, "workers": self.workers,
        }
        for name, v in counts.items():
            if v < (0 if name == "outer_steps" else 1):
                raise ValueError(f"{name} must be >= 1, got {v}")
        if self.pretrain_steps < 0 or self.upsample_switch_step < 0:
            raise ValueError("pretrain_steps and upsample_switch_step must be >= 0")
        if self.minibatch > self.batch_size:
            raise ValueError(f"minibatch {self.minibatch} exceeds batch_size {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.matcher not in ("bruteforce", "index"):
            raise ValueError(f"unknown matcher {self.matcher!r}")


@dataclass
class TrainReport:
    """Per-outer-iteration matched distances, per-step losses and timings.

    ``timing["features"]`` is the search-embedding cost of the index matcher;
    ``timing["matching"]`` is the search itself (all of exhaustive matching).
    Equality ignores wall-clock fields so two runs can be compared exactly.
    """

    outer_distance: list = field(default_factory=list)
    inner_loss: list = field(default_factory=list)
    pretrain_loss: list = field(default_factory=list)
    matched_index: list = field(default_factory=list)
    timing: dict = field(default_factory=lambda: {"sampling": 0.0, "features": 0.0, "matching": 0.0, "gradient": 0.0,
                                                   "total": 0.0},
                         compare=False)
    checkpoints: list = field(default_factory=list)

    @property
    def fractions(self):
        total = self.timing["total"] or 1.0
        return {k: self.timing[k] / total for k in ("sampling", "features", "matching", "gradient")}

    def lines(self):
        """One tab-separated record per outer iteration."""
        yield "outer\tmean_matched_distance\tmean_inner_loss"
        per = len(self.inner_loss) // max(len(self.outer_distance), 1)
        for k, d in enumerate(self.outer_distance):
            chunk = self.inner_loss[k * per : (k + 1) * per]
            yield f"{k}\t{d!r}\t{float(np.mean(chunk)) if chunk else float('nan')!r}"

    def to_dict(self):
        return asdict(self)


def _batch_loss(gen, spec, x, z, y, mask, indices):
    out = gen.forward(x, z)
    d = distances(spec, out, y, mask)
    bad = ~np.isfinite(d.data)
    if bad.any():
        i = int(indices[np.flatnonzero(bad)[0]])
        raise NumericalAbort(f"non-finite loss for training input {i}", i)
    return ad.mean(d)


def _gradient_step(gen, opt, spec, x, z, y, mask, indices):
    with ad.recording():
        loss = _batch_loss(gen, spec, x, z, y, mask, indices)
        grads = ad.backward(loss)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalAbort(f"non-finite gradient on minibatch starting at input {int(indices[0])}", int(indices[0]))
    opt.step(grads)
    return loss.item()


def pretrain_zero_noise(gen: ConditionalGenerator, dataset: Dataset, spec: DistanceSpec, steps: int, lr: float,
                        minibatch=16, seed=0, optimizer="adam", report=None, keep_zero=False):
    """Plain regression with the latent input zeroed; upsampling stays nearest.

    The noise mode is restored afterwards unless ``keep_zero``.
    """
    if steps < 0:
        raise ValueError(f"pretrain steps must be >= 0, got {steps}")
    if steps == 0:
        return gen
    previous = gen.noise_mode
    gen.noise_mode = "zero"
    gen.set_upsample_mode("nearest")
    opt = ad.make_optimizer(optimizer, gen.parameters(), lr)
    n = len(dataset)
    b = min(minibatch, n)
    z = np.zeros((b, *gen.latent_shape), ad.DTYPE)
    for step in range(steps):
        r = rngmod.substream(seed, PRETRAIN, step)
        idx = r.choice(n, size=b, replace=False)
        loss = _gradient_step(gen, opt, spec, dataset.x[idx], z, dataset.y[idx], None, idx)
        if report is not None:
            report.pretrain_loss.append(loss)
    if not keep_zero:
        gen.noise_mode = previous
    return gen


def train_regression_baseline(gen, dataset, spec, cfg: TrainConfig, steps=None):
    """Deterministic baseline: zero-noise regression left in zero-noise mode."""
    steps = cfg.outer_steps * cfg.inner_steps if steps is None else steps
    return pretrain_zero_noise(gen, dataset, spec, steps, cfg.lr, cfg.minibatch, cfg.seed, cfg.optimizer,
                               keep_zero=True)


def _select_batch(cfg, dataset, k, table):
    r = rngmod.substream(cfg.seed, rngmod.BATCH, k)
    if cfg.rebalance:
        return allocate_batch(table, cfg.batch_size, r)
    n = len(dataset)
    return r.choice(n, size=min(cfg.batch_size, n), replace=False)


def _match_one(gen, dataset, spec, cfg, k, pos, i, mask):
    t0 = time.perf_counter()
    codes = rngmod.latent_codes(cfg.seed, k, pos, cfg.m, gen.latent_shape)
    x = np.broadcast_to(dataset.x[i], (cfg.m, *dataset.x.shape[1:]))
    samples = gen.sample(x, codes)
    bank = SampleBank(i, codes, samples)
    t1 = time.perf_counter()
    if mask is None and cfg.matcher == "index":
        bank.embeddings(spec)
    t2 = time.perf_counter()
    if mask is not None:
        d = _masked_bank_distances(bank, dataset.y[i], spec, mask)
        j = int(np.argmin(d))
        dist = float(d[j])
    elif cfg.matcher == "index":
        index = build_index(bank, spec=spec, seed=cfg.seed)
        j, dist = match_indexed(index, bank, dataset.y[i], spec, k=cfg.index_k)
    else:
        j, dist = match_bruteforce(bank, dataset.y[i], spec)
    if not np.isfinite(dist):
        raise NumericalAbort(f"non-finite matched distance for training input {i}", i)
    return j, codes[j], dist, t1 - t0, t2 - t1, time.perf_counter() - t2


def _masked_bank_distances(bank, y, spec, mask):
    with ad.no_recording():
        y_rep = np.broadcast_to(np.asarray(y, ad.DTYPE), bank.samples.shape)
        return distances(spec, bank.samples, y_rep, mask).data


def match_batch(gen, dataset, spec, cfg, k, batch, masks=None):
    """Match every input of ``batch``.

    Returns the assignment keyed by batch position and the summed sampling,
    search-feature and search times.
    """
    jobs = [(pos, int(i), None if masks is None else masks[pos]) for pos, i in enumerate(batch)]

    def run(job):
        pos, i, mask = job
        return _match_one(gen, dataset, spec, cfg, k, pos, i, mask)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    assign = MatchAssignment()
    t_sample = t_feat = t_match = 0.0
    for (pos, i, _), (j, code, dist, ts, tf, tm) in zip(jobs, results):
        assign.add(pos, j, code, dist)
        t_sample += ts
        t_feat += tf
        t_match += tm
    return assign, t_sample, t_feat, t_match


def train(gen: ConditionalGenerator, dataset: Dataset, spec: DistanceSpec, cfg: TrainConfig,
          table: RarityTable | None = None, on_outer=None):
    """Run conditional IMLE; returns ``(gen, report)`` with ``gen`` updated in place.

    ``table`` supplies rarity scores when ``cfg.rebalance`` is on; masks are
    then applied to the loss unless ``cfg.rebalance_mask`` is off.
    ``on_outer(k, gen, report)`` is called after every outer iteration.
    """
    if len(dataset) == 0:
        raise ValueError("train: empty dataset")
    if cfg.rebalance and table is None:
        raise ValueError("train: rebalancing needs a rarity table")
    use_mask = cfg.rebalance and cfg.rebalance_mask
    if use_mask and dataset.labels is None:
        raise ValueError("train: loss rebalancing needs label maps")
    report = TrainReport()
    t_start = time.perf_counter()
    if cfg.pretrain_steps:
        pretrain_zero_noise(gen, dataset, spec, cfg.pretrain_steps, cfg.lr, cfg.minibatch, cfg.seed,
                            cfg.optimizer, report)
    opt = ad.make_optimizer(cfg.optimizer, gen.parameters(), cfg.lr)
    step = 0
    if cfg.upsample_switch_step == 0 and cfg.outer_steps > 0:
        gen.set_upsample_mode("bilinear")
    for k in range(cfg.outer_steps):
        batch = _select_batch(cfg, dataset, k, table)
        masks = None
        if use_mask:
            masks = np.stack([build_mask(dataset.labels[i], table, int(i)).normalized for i in batch])
        assign, ts, tf, tm = match_batch(gen, dataset, spec, cfg, k, batch, masks)
        report.timing["sampling"] += ts
        report.timing["features"] += tf
        report.timing["matching"] += tm
        report.outer_distance.append(assign.mean_distance())
        report.matched_index.append([assign.index[p] for p in range(len(batch))])
        codes = np.stack([assign.code[p] for p in range(len(batch))])
        x_b, y_b = dataset.x[batch], dataset.y[batch]
        b = cfg.minibatch
        t0 = time.perf_counter()
        for l in range(cfg.inner_steps):
            r = rngmod.substream(cfg.seed, rngmod.BATCH, k, l + 1)
            sub = r.choice(len(batch), size=min(b, len(batch)), replace=False)
            mask = None if masks is None else masks[sub]
            loss = _gradient_step(gen, opt, spec, x_b[sub], codes[sub], y_b[sub], mask, batch[sub])
            report.inner_loss.append(loss)
            step += 1
            if step == cfg.upsample_switch_step:
                gen.set_upsample_mode("bilinear")
        report.timing["gradient"] += time.perf_counter() - t0
        if on_outer is not None:
            on_outer(k, gen, report)
    report.timing["total"] = time.perf_counter() - t_start
    return gen, report


def matched_objective(gen, dataset, spec, cfg, k, batch, assign):
    """Recompute ``mean_i min_j distance(T(x_i, z_ij), y_i)`` from the stored codes."""
    codes = np.stack([assign.code[p] for p in range(len(batch))])
    with ad.no_recording():
        out = gen.forward(dataset.x[batch], codes)
        return ad.mean(distances(spec, out, dataset.y[batch])).item()
