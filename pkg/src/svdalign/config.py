"""Run configuration: a flat `key = value` text format with a strict schema.

Unknown keys are errors, not warnings — a silently ignored typo in a
hyperparameter name is the fastest way to an irreproducible result. The data
directory can be overridden by the SVDALIGN_DATA environment variable.
"""

from __future__ import annotations

import dataclasses
import os

from .errors import ConfigError

DATA_DIR_ENV = "SVDALIGN_DATA"

METHODS = ("ssa", "bp", "dfa", "usf", "brsf", "svd_bp")
DATASETS = ("cifar10", "synthetic-spiral", "synthetic-blobs")
ARCHITECTURES = ("mlp3", "smallconv")


@dataclasses.dataclass
class RunConfig:
    method: str = "ssa"
    dataset: str = "synthetic-spiral"
    architecture: str = "mlp3"
    epochs: int = 20
    batch_size: int = 128
    lr: float = 3e-4
    seed: int = 0
    alpha: float = 1.0
    beta: float = 1e-3
    gamma: float = 1e-4
    lambda_hoyer: float = 1e-3
    sigma_feedback: float = 0.0    # 0 = 1/sqrt(d_N)
    sigma_targets: float = 0.0     # 0 = 1/sqrt(n) per layer
    factored: str = "auto"         # auto|true|false; auto follows the method
    rank_init: float = 1.0         # fraction of min(m, n) at initialization
    rank_schedule: bool = False
    phase1_fraction: float = 0.3
    phase1_target_fraction: float = 0.7
    energy_threshold: float = 0.95
    hoyer_period: int = 10
    n_samples: int = 3000          # synthetic datasets only
    subset_size: int = 0           # 0 = full training split
    test_subset_size: int = 0
    probe_batch_size: int = 256
    diag_probe: bool = True        # per-epoch probe-batch alignment angles
    diag_per_step: bool = False
    augment: bool = False
    data_dir: str = "./data"
    out_dir: str = "./runs"

    def wants_factored(self) -> bool:
        if self.factored == "auto":
            return self.method in ("ssa", "svd_bp")
        return self.factored == "true"


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if raw == "":
        raise ConfigError(f"empty value for {key}", field=key)
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} value {raw!r} as {kind}", field=key)


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", field=key)
        if key in values:
            raise ConfigError(f"duplicate config key {key!r}", field=key)
        values[key] = _parse_value(key, raw)
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _require(ok: bool, message: str, field: str):
    if not ok:
        raise ConfigError(message, field=field)


def validate_config(cfg: RunConfig) -> None:
    _require(cfg.method in METHODS, f"method must be one of {METHODS}", "method")
    _require(cfg.dataset in DATASETS, f"dataset must be one of {DATASETS}", "dataset")
    _require(cfg.architecture in ARCHITECTURES,
             f"architecture must be one of {ARCHITECTURES}", "architecture")
    _require(cfg.epochs >= 1, "epochs must be >= 1", "epochs")
    _require(cfg.batch_size >= 1, "batch_size must be >= 1", "batch_size")
    _require(cfg.lr >= 0, "lr must be >= 0", "lr")
    _require(cfg.seed >= 0, "seed must be >= 0", "seed")
    for name in ("alpha", "beta", "gamma", "lambda_hoyer",
                 "sigma_feedback", "sigma_targets"):
        _require(getattr(cfg, name) >= 0, f"{name} must be >= 0", name)
    _require(cfg.factored in ("auto", "true", "false"),
             "factored must be auto, true, or false", "factored")
    _require(0.0 < cfg.rank_init <= 1.0, "rank_init must be in (0, 1]", "rank_init")
    _require(0.0 < cfg.phase1_fraction <= 1.0,
             "phase1_fraction must be in (0, 1]", "phase1_fraction")
    _require(0.0 < cfg.phase1_target_fraction <= 1.0,
             "phase1_target_fraction must be in (0, 1]", "phase1_target_fraction")
    _require(0.0 < cfg.energy_threshold <= 1.0,
             "energy_threshold must be in (0, 1]", "energy_threshold")
    _require(cfg.hoyer_period >= 1, "hoyer_period must be >= 1", "hoyer_period")
    _require(cfg.n_samples >= 10, "n_samples must be >= 10", "n_samples")
    _require(cfg.subset_size >= 0, "subset_size must be >= 0", "subset_size")
    _require(cfg.test_subset_size >= 0,
             "test_subset_size must be >= 0", "test_subset_size")
    _require(cfg.probe_batch_size >= 1,
             "probe_batch_size must be >= 1", "probe_batch_size")
    if cfg.architecture == "smallconv":
        _require(cfg.dataset == "cifar10",
                 "smallconv expects image input (dataset = cifar10)", "architecture")
    if cfg.method in ("ssa", "svd_bp"):
        _require(cfg.factored != "false",
                 f"method {cfg.method} trains SVD factors; factored cannot be false",
                 "factored")
    if cfg.augment:
        _require(cfg.dataset == "cifar10",
                 "augment applies to image datasets only", "augment")


def resolved_data_dir(cfg: RunConfig) -> str:
    return os.environ.get(DATA_DIR_ENV) or cfg.data_dir
