"""Synthetic survival cohort with known informative and non-informative features.

Event times follow a log-linear-quadratic predictor

    eta_i = alpha . x_i[sq]**2 + beta . x_i[lin] + eps_i,   eps_i ~ N(0, noise_sd**2)

and are either exponential with mean ``exp(eta_i)`` (default) or equal to
``exp(eta_i)`` (``event_law="deterministic"``). Feature subsets are 1-based.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import Cohort

EVENT_LAWS = ("exponential", "deterministic")


@dataclass(frozen=True)
class SyntheticConfig:
    n_samples: int = 20000
    k_informative: int = 10
    subset_sq: tuple = (1, 3, 5, 7)
    subset_lin: tuple = (2, 4, 6, 8, 9, 10)
    alpha: tuple = ()
    beta: tuple = ()
    noise_sd: float = 0.1
    m_noninformative: int = 5
    censor_fraction: float = 0.5
    mnar_rate: float = 0.45
    mar_rate: float = 0.05
    seed: int = 0
    event_law: str = "exponential"
    mnar_strength: float = 2.0  # |gamma_j| of the logistic MNAR link

    def __post_init__(self):
        object.__setattr__(self, "subset_sq", tuple(int(i) for i in self.subset_sq))
        object.__setattr__(self, "subset_lin", tuple(int(i) for i in self.subset_lin))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        self.validate()

    def validate(self):
        if self.n_samples < 0 or self.k_informative < 0 or self.m_noninformative < 0:
            raise ValueError("sample and feature counts must be non-negative")
        sq, lin = set(self.subset_sq), set(self.subset_lin)
        if sq & lin:
            raise ValueError("subset_sq and subset_lin must be disjoint")
        if len(sq) != len(self.subset_sq) or len(lin) != len(self.subset_lin):
            raise ValueError("feature subsets must not repeat indices")
        if any(i < 1 or i > self.k_informative for i in sq | lin):
            raise ValueError("subset indices must lie in 1..k_informative")
        if len(self.alpha) != len(self.subset_sq) or len(self.beta) != len(self.subset_lin):
            raise ValueError("alpha/beta lengths must match subset_sq/subset_lin")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if not 0 <= self.censor_fraction <= 1:
            raise ValueError("censor_fraction must lie in [0, 1]")
        if not 0 <= self.mnar_rate <= 0.45 or not 0 <= self.mar_rate <= 0.05:
            raise ValueError("mnar_rate must lie in [0, 0.45] and mar_rate in [0, 0.05]")
        if self.event_law not in EVENT_LAWS:
            raise ValueError(f"event_law must be one of {EVENT_LAWS}")

    @property
    def n_features(self):
        return self.k_informative + self.m_noninformative

    def feature_names(self):
        return tuple([f"x{i + 1}" for i in range(self.k_informative)]
                     + [f"noninf_{i + 1}" for i in range(self.m_noninformative)])

    def to_dict(self):
        return asdict(self)


def default_paper_config(seed=0):
    """Ten informative features (four squared, six linear) plus five noise features."""
    rng = np.random.default_rng([seed, 0xA1FA])
    subset_sq, subset_lin = (1, 3, 5, 7), (2, 4, 6, 8, 9, 10)
    return SyntheticConfig(
        n_samples=20000,
        k_informative=10,
        subset_sq=subset_sq,
        subset_lin=subset_lin,
        alpha=tuple(rng.normal(0.0, 0.25, len(subset_sq))),
        beta=tuple(rng.normal(0.0, 0.25, len(subset_lin))),
        noise_sd=0.1,
        m_noninformative=5,
        censor_fraction=0.5,
        mnar_rate=0.45,
        mar_rate=0.05,
        seed=seed,
    )


@dataclass(frozen=True, eq=False)
class SyntheticDraw:
    """Released cohort plus the hidden quantities used to produce it."""

    cohort: Cohort
    full_features: np.ndarray  # before masking
    true_event_time: np.ndarray
    predictor: np.ndarray
    config: SyntheticConfig = field(repr=False)

    def truth(self):
        cfg = self.config
        k = cfg.k_informative
        return {
            "alpha": list(cfg.alpha),
            "beta": list(cfg.beta),
            "subset_sq": list(cfg.subset_sq),
            "subset_lin": list(cfg.subset_lin),
            "informative_ids": list(range(1, k + 1)),
            "noninformative_ids": list(range(k + 1, cfg.n_features + 1)),
            "feature_names": list(cfg.feature_names()),
            "noise_sd": cfg.noise_sd,
            "event_law": cfg.event_law,
            "seed": cfg.seed,
        }


def censored_count(n, fraction):
    # tolerance keeps 0.3 * 10 from rounding up to 4
    return min(n, math.ceil(fraction * n - 1e-9))


def simulate(config):
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, m = config.n_samples, config.n_features

    x = rng.standard_normal((n, m))
    sq = np.array(config.subset_sq, dtype=int) - 1
    lin = np.array(config.subset_lin, dtype=int) - 1
    eta = (x[:, sq] ** 2) @ np.array(config.alpha) + x[:, lin] @ np.array(config.beta)
    eta = eta + rng.normal(0.0, 1.0, n) * config.noise_sd
    mean_time = np.exp(eta)
    u = rng.random(n)
    if config.event_law == "exponential":
        true_time = -mean_time * np.log1p(-u)  # inverse CDF
    else:
        true_time = mean_time

    recorded = true_time.copy()
    censored = np.zeros(n, dtype=bool)
    n_cens = censored_count(n, config.censor_fraction)
    cens_idx = rng.permutation(n)[:n_cens]
    censored[cens_idx] = True
    frac = np.maximum(rng.random(n_cens), np.finfo(float).tiny)
    recorded[cens_idx] = true_time[cens_idx] * frac

    observed = _missingness(rng, recorded, m, config)
    released = np.where(observed, x, np.nan)
    cohort = Cohort(
        ids=np.arange(n),
        features=released,
        observed=observed,
        event_time=recorded,
        censored=censored,
        feature_names=config.feature_names(),
    )
    return SyntheticDraw(cohort=cohort, full_features=x, true_event_time=true_time,
                         predictor=eta, config=config)


def _missingness(rng, recorded, m, config):
    n = recorded.shape[0]
    if n == 0 or m == 0:
        return np.ones((n, m), dtype=bool)
    # event-time quantile in [0, 1]
    q = np.argsort(np.argsort(recorded, kind="stable"), kind="stable") / max(n - 1, 1)
    gamma = config.mnar_strength * np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
    w = 1.0 / (1.0 + np.exp(-np.outer(q, gamma)))
    p_mnar = np.clip(config.mnar_rate * w / w.mean(axis=0), 0.0, 1.0)
    mnar = rng.random((n, m)) < p_mnar
    # MAR acts on the cells MNAR left alone so the two rates add up
    p_mar = config.mar_rate / (1.0 - config.mnar_rate) if config.mnar_rate < 1 else 0.0
    mar = rng.random((n, m)) < p_mar
    return ~(mnar | mar)


def generate(config):
    return simulate(config).cohort
