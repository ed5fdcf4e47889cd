"""Flat ``key = value`` run configuration with dotted keys.

Blank lines and ``#`` comments are ignored. Unknown keys are errors. The
distance metric is configured either by ``distance.preset`` (plus optional
``distance.weights`` and ``distance.calibrate``) or by explicit
``distance.term<N>`` lines, which is what resolved configs contain::

    distance.term0 = pixels level=0 seed=0 channels=16 weight=1.0 p=2 squared=0
"""

from __future__ import annotations

import re

from .distance import PRESETS, DistanceSpec, FeatureExtractor, Term
from .trainer import TrainConfig

TASK_DEFAULTS = {
    "two-mode-vec": {
        "m": 20, "batch_size": 64, "inner_steps": 100, "outer_steps": 30, "minibatch": 16, "lr": 1e-3,
        "n_train": 500, "distance.preset": "pixels-l2sq",
    },
    "k-mode-vec": {
        "m": 40, "batch_size": 64, "inner_steps": 100, "outer_steps": 40, "minibatch": 16, "lr": 1e-3,
        "n_train": 1000, "distance.preset": "pixels-l2sq",
    },
    "toy-sr": {
        "m": 20, "batch_size": 64, "inner_steps": 20, "outer_steps": 10, "minibatch": 4, "lr": 1e-3,
        "n_train": 200, "distance.preset": "sr", "upsample_switch_step": 100,
    },
    "toy-layout": {
        "m": 10, "batch_size": 16, "inner_steps": 20, "outer_steps": 30, "minibatch": 4, "lr": 1e-3,
        "n_train": 200, "distance.preset": "layout",
    },
}
TASK_DEFAULTS["toy-layout-imbalanced"] = TASK_DEFAULTS["toy-layout"]

# key -> (type, default); None defaults come from the task table above.
SCHEMA = {
    "task": (str, "two-mode-vec"),
    "model": (str, ""),
    "noise_dim": (int, 0),
    "n_train": (int, None),
    "m": (int, None),
    "batch_size": (int, None),
    "inner_steps": (int, None),
    "outer_steps": (int, None),
    "minibatch": (int, None),
    "lr": (float, None),
    "pretrain_steps": (int, 0),
    "upsample_switch_step": (int, None),
    "rebalance": (bool, False),
    "rebalance_mask": (bool, True),
    "optimizer": (str, "adam"),
    "matcher": (str, "bruteforce"),
    "index_k": (int, 16),
    "workers": (int, 1),
    "seed": (int, 0),
    "out_dir": (str, "run"),
    "checkpoint_every": (int, 0),
    "distance.preset": (str, None),
    "distance.weights": (str, ""),
    "distance.calibrate": (bool, None),
}
TERM_KEY = re.compile(r"^distance\.term(\d+)$")
TRAIN_KEYS = [f for f in TrainConfig.__dataclass_fields__]


class ConfigError(ValueError):
    """Bad or unknown configuration key (a usage error)."""


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_text(text: str) -> dict:
    """Raw ``{key: value-string}``; later duplicates override earlier ones."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value
    return out


def resolve(raw: dict) -> dict:
    """Typed config with task defaults filled in; raises :class:`ConfigError`."""
    for key in raw:
        if key not in SCHEMA and not TERM_KEY.match(key):
            raise ConfigError(f"unknown config key {key!r}")
    task = raw.get("task", SCHEMA["task"][1])
    if task not in TASK_DEFAULTS:
        raise ConfigError(f"unknown task {task!r}; choose from {', '.join(TASK_DEFAULTS)}")
    defaults = dict(TASK_DEFAULTS[task])
    cfg = {}
    for key, (typ, default) in SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = _parse_bool(raw[key]) if typ is bool else typ(raw[key])
            except ValueError as e:
                raise ConfigError(f"config key {key!r}: {e}") from None
        else:
            cfg[key] = defaults.get(key, default)
    if cfg["upsample_switch_step"] is None:
        cfg["upsample_switch_step"] = 0
    terms = {int(TERM_KEY.match(k).group(1)): v for k, v in raw.items() if TERM_KEY.match(k)}
    if terms:
        cfg["distance.terms"] = [parse_term(terms[i]) for i in sorted(terms)]
        if cfg["distance.calibrate"] is None:
            cfg["distance.calibrate"] = False
    else:
        if cfg["distance.preset"] not in PRESETS:
            raise ConfigError(f"unknown distance preset {cfg['distance.preset']!r}")
        if cfg["distance.calibrate"] is None:
            cfg["distance.calibrate"] = cfg["distance.preset"] in ("sr", "layout")
    return cfg


def load(path) -> dict:
    with open(path) as f:
        return resolve(parse_text(f.read()))


def parse_term(s: str) -> Term:
    parts = s.split()
    if not parts:
        raise ConfigError("empty distance term")
    fields = {}
    for p in parts[1:]:
        if "=" not in p:
            raise ConfigError(f"distance term field {p!r} is not key=value")
        k, v = p.split("=", 1)
        fields[k] = v
    allowed = {"level", "seed", "channels", "weight", "p", "squared"}
    if set(fields) - allowed:
        raise ConfigError(f"unknown distance term fields {sorted(set(fields) - allowed)}")
    try:
        ex = FeatureExtractor(parts[0], int(fields.get("level", 0)), int(fields.get("seed", 0)),
                              int(fields.get("channels", 16)))
        return Term(ex, float(fields.get("weight", 1.0)), int(fields.get("p", 2)),
                    _parse_bool(fields.get("squared", "0")))
    except ValueError as e:
        raise ConfigError(f"distance term {s!r}: {e}") from None


def format_term(t: Term) -> str:
    e = t.extractor
    return (f"{e.kind} level={e.level} seed={e.seed} channels={e.channels} "
            f"weight={t.weight!r} p={t.p} squared={int(t.squared)}")


def base_spec(cfg: dict) -> DistanceSpec:
    """The configured spec before any calibration."""
    if "distance.terms" in cfg:
        return DistanceSpec(tuple(cfg["distance.terms"]))
    spec = PRESETS[cfg["distance.preset"]]()
    if cfg["distance.weights"]:
        w = [float(v) for v in cfg["distance.weights"].split(",")]
        if len(w) != len(spec.terms):
            raise ConfigError(f"distance.weights has {len(w)} values for {len(spec.terms)} terms")
        spec = spec.with_weights(w)
    return spec


def train_config(cfg: dict) -> TrainConfig:
    kw = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    try:
        return TrainConfig(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def dump(cfg: dict, spec: DistanceSpec | None = None) -> str:
    """Resolved config text; with ``spec`` the metric is written as explicit terms."""
    lines = []
    for key in SCHEMA:
        if key.startswith("distance."):
            continue
        v = cfg[key]
        lines.append(f"{key} = {int(v) if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
    if spec is not None:
        lines.append("distance.calibrate = 0")
        lines.extend(f"distance.term{i} = {format_term(t)}" for i, t in enumerate(spec.terms))
    else:
        lines.append(f"distance.preset = {cfg['distance.preset']}")
        if cfg["distance.weights"]:
            lines.append(f"distance.weights = {cfg['distance.weights']}")
        lines.append(f"distance.calibrate = {int(cfg['distance.calibrate'])}")
    return "\n".join(lines) + "\n"
