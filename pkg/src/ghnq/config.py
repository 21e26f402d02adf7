"""Run configuration: one INI-style file, strictly validated.

Sections mirror the library configs ([space], [hypernet], [train], [quant],
[eval]) plus [run], [paths] and [data]. Unknown sections or keys are hard
errors, so a typo in a hyperparameter cannot silently fall back to a
default. Omitted keys take the documented defaults. All RNG streams derive
from the single [run] seed.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from typing import Optional

from .errors import ConfigError
from .evaluation import DEFAULT_PRECISIONS, parse_precision
from .graphs import SpaceConfig
from .hypernet import HypernetConfig
from .quant import QuantError
from .training import TrainConfig


@dataclasses.dataclass
class PathsConfig:
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"
    graph_dir: str = "runs/graphs"
    data_dir: str = ""


@dataclasses.dataclass
class DataConfig:
    source: str = "synthetic"  # or "cifar10"
    num_train: int = 512
    num_test: int = 512
    noise: float = 0.25

    def validate(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"data source must be synthetic or cifar10, "
                              f"got '{self.source}'")
        if self.num_train < 1 or self.num_test < 1:
            raise ConfigError("num_train and num_test must be positive")


@dataclasses.dataclass
class EvalConfig:
    test_batch_size: int = 64
    precisions: tuple[str, ...] = DEFAULT_PRECISIONS
    iid: int = 20
    deep: int = 20
    wide: int = 20
    bnfree: int = 20
    deep_depth_min: int = 0  # 0 = derive from the training range
    deep_depth_max: int = 0
    wide_width_min: int = 0
    wide_width_max: int = 0

    def validate(self):
        if self.test_batch_size < 2:
            raise ConfigError("test_batch_size must be >= 2")
        for token in self.precisions:
            try:
                parse_precision(token)
            except QuantError as exc:
                raise ConfigError(str(exc)) from exc

    def split_sizes(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in ("iid", "deep", "wide", "bnfree")
                if getattr(self, k) > 0}

    def deep_range(self) -> Optional[tuple[int, int]]:
        if self.deep_depth_min and self.deep_depth_max:
            return (self.deep_depth_min, self.deep_depth_max)
        return None

    def wide_range(self) -> Optional[tuple[int, int]]:
        if self.wide_width_min and self.wide_width_max:
            return (self.wide_width_min, self.wide_width_max)
        return None


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    paths: PathsConfig = dataclasses.field(default_factory=PathsConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    space: SpaceConfig = dataclasses.field(default_factory=SpaceConfig)
    hypernet: HypernetConfig = dataclasses.field(default_factory=HypernetConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    eps_fold: float = 1e-5
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    # derived seeds, all functions of the master seed
    @property
    def hypernet_seed(self) -> int:
        return self.seed + 1

    @property
    def data_seed(self) -> int:
        return self.seed + 2

    def validate(self):
        from .errors import GhnqError
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        self.data.validate()
        self.eval.validate()
        try:
            self.space.validate()
            self.hypernet.validate()
            self.train.validate()
        except GhnqError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eps_fold <= 0:
            raise ConfigError("eps_fold must be positive")
        if self.data.source == "cifar10":
            if not self.paths.data_dir:
                raise ConfigError("data source cifar10 requires paths.data_dir")
            if tuple(self.space.input_resolution) != (3, 32, 32):
                raise ConfigError("cifar10 requires input resolution 3x32x32")


# key name -> (attribute path, parser)
_SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": ("seed", int),
        "jobs": ("jobs", int),
    },
    "paths": {
        "checkpoint_dir": ("paths.checkpoint_dir", str),
        "report_dir": ("paths.report_dir", str),
        "graph_dir": ("paths.graph_dir", str),
        "data_dir": ("paths.data_dir", str),
    },
    "data": {
        "source": ("data.source", str),
        "num_train": ("data.num_train", int),
        "num_test": ("data.num_test", int),
        "noise": ("data.noise", float),
    },
    "space": {
        "max_params": ("space.max_params", int),
        "depth_min": ("space.depth_range.0", int),
        "depth_max": ("space.depth_range.1", int),
        "width_min": ("space.width_range.0", int),
        "width_max": ("space.width_range.1", int),
        "residual_prob": ("space.residual_prob", float),
        "concat_prob": ("space.concat_prob", float),
        "depthwise_prob": ("space.depthwise_prob", float),
        "dilated_prob": ("space.dilated_prob", float),
        "pool_downsample_prob": ("space.pool_downsample_prob", float),
        "bn_free": ("space.bn_free", "bool"),
        "input_channels": ("space.input_resolution.0", int),
        "input_height": ("space.input_resolution.1", int),
        "input_width": ("space.input_resolution.2", int),
        "num_classes": ("space.num_classes", int),
    },
    "hypernet": {
        "embed_dim": ("hypernet.embed_dim", int),
        "mp_rounds": ("hypernet.mp_rounds", int),
        "canonical_out": ("hypernet.canonical_shape.0", int),
        "canonical_in": ("hypernet.canonical_shape.1", int),
        "canonical_kh": ("hypernet.canonical_shape.2", int),
        "canonical_kw": ("hypernet.canonical_shape.3", int),
        "s_max": ("hypernet.s_max", int),
        "normalization": ("hypernet.normalization", str),
        "decoder_hidden": ("hypernet.decoder_hidden", int),
    },
    "train": {
        "epochs": ("train.epochs", int),
        "lr": ("train.lr", float),
        "lr_drop_epoch": ("train.lr_drop_epoch", int),
        "lr_drop_factor": ("train.lr_drop_factor", float),
        "beta1": ("train.beta1", float),
        "beta2": ("train.beta2", float),
        "weight_decay": ("train.weight_decay", float),
        "batch_size": ("train.batch_size", int),
        "meta_batch_size": ("train.meta_batch_size", int),
    },
    "quant": {
        "eps_fold": ("eps_fold", float),
    },
    "eval": {
        "test_batch_size": ("eval.test_batch_size", int),
        "precisions": ("eval.precisions", "strlist"),
        "iid": ("eval.iid", int),
        "deep": ("eval.deep", int),
        "wide": ("eval.wide", int),
        "bnfree": ("eval.bnfree", int),
        "deep_depth_min": ("eval.deep_depth_min", int),
        "deep_depth_max": ("eval.deep_depth_max", int),
        "wide_width_min": ("eval.wide_width_min", int),
        "wide_width_max": ("eval.wide_width_max", int),
    },
}


def _parse_value(raw: str, kind, where: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        if kind == "strlist":
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _assign(cfg: RunConfig, dotted: str, value):
    parts = dotted.split(".")
    target = cfg
    for part in parts[:-1]:
        target = getattr(target, part)
    last = parts[-1]
    if last.isdigit():
        # tuple element: rebuild the tuple on the owner
        owner = cfg
        for part in parts[:-2]:
            owner = getattr(owner, part)
        attr = parts[-2]
        current = list(getattr(owner, attr))
        current[int(last)] = value
        object.__setattr__(owner, attr, tuple(current))
    else:
        object.__setattr__(target, last, value)


def load_run_config(path: str, seed_override: Optional[int] = None,
                    jobs_override: Optional[int] = None) -> RunConfig:
    """Parse and fully validate a run configuration file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file '{path}' does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as f:
            parser.read_file(f)
    except (configparser.Error, OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse '{path}': {exc}") from exc

    cfg = RunConfig()
    # dataclasses holding tuples are frozen (HypernetConfig); rebuild via dict
    hyper_kwargs = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            dotted, kind = _SCHEMA[section][key]
            value = _parse_value(raw, kind, f"[{section}] {key}")
            if dotted.startswith("hypernet."):
                hyper_kwargs[dotted[len("hypernet."):]] = value
            else:
                _assign(cfg, dotted, value)
    if hyper_kwargs:
        base = dataclasses.asdict(cfg.hypernet)
        canonical = list(base.pop("canonical_shape"))
        for slot in list(hyper_kwargs):
            if slot.startswith("canonical_shape."):
                canonical[int(slot.split(".")[1])] = hyper_kwargs.pop(slot)
        base.update(hyper_kwargs)
        base["canonical_shape"] = tuple(canonical)
        cfg.hypernet = HypernetConfig(**base)
    # master seed drives the sampling space directly
    if seed_override is not None:
        cfg.seed = seed_override
    if jobs_override is not None:
        cfg.jobs = jobs_override
    cfg.space = dataclasses.replace(cfg.space, rng_seed=cfg.seed)
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    cfg.validate()
    return cfg
