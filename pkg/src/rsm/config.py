"""Pipeline configuration: a TOML file whose sections mirror the modules.

Every key has a default, so an empty (or absent) file is a valid config.
Section-level ``seed`` values fall back to the top-level ``seed``.
"""

import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .datagen import SyntheticConfig, default_paper_config
from .errors import ConfigError
from .simrank import METHODS
from .survnet import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class PathsConfig:
    cohort: str = None  # None: the pipeline generates a synthetic cohort
    out_dir: str = "rsm-out"


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = None
    append_missing_indicators: bool = False


@dataclass(frozen=True)
class SignificanceConfig:
    alpha: float = 0.05
    step: int = 1
    top_fraction: float = None


@dataclass(frozen=True)
class ClusterConfig:
    k_max: int = 10
    seed: int = None


@dataclass(frozen=True)
class RankConfig:
    method: str = "pca"
    bandwidth: float = None
    cutoff: float = 0.95
    k: int = 10
    window: str = "nearest"
    seed: int = None


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    datagen: SyntheticConfig = None
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = None
    significance: SignificanceConfig = field(default_factory=SignificanceConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    rank: RankConfig = field(default_factory=RankConfig)

    def __post_init__(self):
        if self.datagen is None:
            object.__setattr__(self, "datagen", default_paper_config(self.seed))
        if self.train is None:
            object.__setattr__(self, "train", TrainConfig(seed=self.seed))
        self.validate()

    def seed_for(self, section):
        value = getattr(getattr(self, section), "seed", None)
        return self.seed if value is None else value

    def validate(self):
        if not 0 < self.split.train_fraction < 1:
            raise ConfigError("split.train_fraction must lie in (0, 1)")
        if not 0 < self.significance.alpha < 1:
            raise ConfigError("significance.alpha must lie in (0, 1)")
        if self.significance.step < 1:
            raise ConfigError("significance.step must be at least 1")
        tf = self.significance.top_fraction
        if tf is not None and not 0 < tf <= 1:
            raise ConfigError("significance.top_fraction must lie in (0, 1]")
        if self.cluster.k_max < 3:
            raise ConfigError("cluster.k_max must be at least 3")
        if self.rank.method not in METHODS:
            raise ConfigError(f"rank.method must be one of {METHODS}")
        if self.rank.window not in ("nearest", "split"):
            raise ConfigError("rank.window must be 'nearest' or 'split'")
        if self.rank.k < 1:
            raise ConfigError("rank.k must be at least 1")
        if not 0 < self.rank.cutoff <= 1:
            raise ConfigError("rank.cutoff must lie in (0, 1]")
        if self.rank.bandwidth is not None and not self.rank.bandwidth > 0:
            raise ConfigError("rank.bandwidth must be positive")

    def to_dict(self):
        out = {"seed": self.seed}
        for f in fields(self):
            if f.name != "seed":
                out[f.name] = asdict(getattr(self, f.name))
        return out


_SECTIONS = {
    "paths": PathsConfig,
    "split": SplitConfig,
    "significance": SignificanceConfig,
    "cluster": ClusterConfig,
    "rank": RankConfig,
}


def _build(cls, section, values):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _datagen(values, seed):
    values = dict(values)
    values.setdefault("seed", seed)
    base = default_paper_config(values["seed"])
    sq = tuple(values.get("subset_sq", base.subset_sq))
    lin = tuple(values.get("subset_lin", base.subset_lin))
    # coefficients not given: keep the default draw if it fits, else draw afresh
    rng = np.random.default_rng([values["seed"], 0xA1FA])
    drawn_a = tuple(rng.normal(0.0, 0.25, len(sq)))
    drawn_b = tuple(rng.normal(0.0, 0.25, len(lin)))
    values.setdefault("alpha", base.alpha if len(base.alpha) == len(sq) else drawn_a)
    values.setdefault("beta", base.beta if len(base.beta) == len(lin) else drawn_b)
    return _build(SyntheticConfig, "datagen", values)


def from_dict(data, seed_override=None):
    data = dict(data)
    seed = data.pop("seed", 0) if seed_override is None else seed_override
    data.pop("seed", None)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    allowed = set(_SECTIONS) | {"datagen", "train"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    for name, section in data.items():
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
    kwargs = {name: _build(cls, name, data.get(name, {})) for name, cls in _SECTIONS.items()}

    train = dict(data.get("train", {}))
    if "lambda" in train:
        train["lam"] = train.pop("lambda")
    if "hidden_sizes" in train:
        train["hidden_sizes"] = tuple(train["hidden_sizes"])
    train.setdefault("seed", seed)
    kwargs["train"] = _build(TrainConfig, "train", train)
    kwargs["datagen"] = _datagen(data.get("datagen", {}), seed)
    try:
        return PipelineConfig(seed=seed, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, seed_override=None):
    """Read a TOML config; ``None`` gives the all-defaults config."""
    if path is None:
        return from_dict({}, seed_override)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data, seed_override)


def override(config, **sections):
    """Copy of ``config`` with selected fields replaced, e.g. ``rank={"k": 5}``."""
    kwargs = {}
    for name, values in sections.items():
        if values:
            kwargs[name] = replace(getattr(config, name), **values)
    try:
        return replace(config, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
