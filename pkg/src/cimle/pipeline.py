"""Glue from a resolved run config to task, data, model and metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from . import rng as rngmod
from .distance import DistanceSpec, calibrate_weights
from .generators import ConditionalGenerator, build_generator
from .rarity import RarityTable, rarity_scores
from .tasks import Dataset, SyntheticTask, get_task

CALIBRATION_PAIRS = 64


@dataclass
class Run:
    cfg: dict
    task: SyntheticTask
    dataset: Dataset
    gen: ConditionalGenerator
    spec: DistanceSpec
    table: RarityTable | None


def calibrated(spec: DistanceSpec, dataset: Dataset, seed: int, pairs=CALIBRATION_PAIRS) -> DistanceSpec:
    """Weights set so every term averages 1 over random pairs of training targets."""
    r = rngmod.substream(seed, rngmod.EVAL, 0)
    a = r.integers(0, len(dataset), pairs)
    b = r.integers(0, len(dataset), pairs)
    return calibrate_weights(spec, dataset.y[a], dataset.y[b])


def model_for(cfg: dict, task: SyntheticTask) -> ConditionalGenerator:
    arch = cfg["model"] or task.default_arch
    kw = task.generator_kwargs() if arch == task.default_arch else {}
    if cfg["noise_dim"]:
        kw["noise_dim"] = cfg["noise_dim"]
    return build_generator(arch, cfg["seed"], **kw)


def prepare(cfg: dict, dataset: Dataset | None = None) -> Run:
    task = get_task(cfg["task"])
    if dataset is None:
        dataset = task.make(cfg["n_train"], cfg["seed"])
    gen = model_for(cfg, task)
    spec = cfgmod.base_spec(cfg)
    if cfg["distance.calibrate"]:
        spec = calibrated(spec, dataset, cfg["seed"])
    table = None
    if cfg["rebalance"]:
        if dataset.labels is None:
            raise cfgmod.ConfigError(f"rebalance needs a task with label maps, not {cfg['task']!r}")
        table = rarity_scores(dataset.labels, dataset.y, gen.cond_shape[0] if task.kind == "toy-layout" else 1)
    return Run(cfg, task, dataset, gen, spec, table)


def default_config(**overrides) -> dict:
    raw = {k: str(v) for k, v in overrides.items()}
    return cfgmod.resolve(raw)


def eval_inputs(task: SyntheticTask, n: int, seed: int) -> np.ndarray:
    x, _ = task.sample_conditions(n, rngmod.substream(seed, rngmod.EVAL, 10))
    return x
