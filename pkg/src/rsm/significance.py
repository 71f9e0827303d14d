"""Feature significance from trained gate weights.

Features are ranked by ``|w|``. The most significant set is the shortest
top-ranked prefix whose ``|w|`` values pass a two-sample Kolmogorov-Smirnov
test against all ``|w|`` values; the least significant set repeats the
procedure from the bottom of the ranking.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSelectionWarning


@dataclass(frozen=True, eq=False)
class SignificanceReport:
    weights: np.ndarray
    ranking: np.ndarray
    most_significant: tuple
    least_significant: tuple
    ks_trace: list = field(default_factory=list)
    ks_trace_bottom: list = field(default_factory=list)
    alpha: float = 0.05
    step: int = 1
    top_fraction: float = None

    def to_dict(self, feature_names=None):
        out = {
            "weights": [float(w) for w in self.weights],
            "ranking": [int(i) for i in self.ranking],
            "most_significant": [int(i) for i in self.most_significant],
            "least_significant": [int(i) for i in self.least_significant],
            "ks_trace": [list(t) for t in self.ks_trace],
            "ks_trace_bottom": [list(t) for t in self.ks_trace_bottom],
            "alpha": self.alpha,
            "step": self.step,
            "top_fraction": self.top_fraction,
        }
        if feature_names is not None:
            out["feature_names"] = list(feature_names)
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(
            weights=np.asarray(d["weights"], dtype=float),
            ranking=np.asarray(d["ranking"], dtype=int),
            most_significant=tuple(d["most_significant"]),
            least_significant=tuple(d["least_significant"]),
            ks_trace=[tuple(t) for t in d.get("ks_trace", [])],
            ks_trace_bottom=[tuple(t) for t in d.get("ks_trace_bottom", [])],
            alpha=d.get("alpha", 0.05),
            step=d.get("step", 1),
            top_fraction=d.get("top_fraction"),
        )


def rank_features(weights):
    """0-based feature indices by descending ``|w|``; ties keep index order."""
    w = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return np.argsort(-np.abs(w), kind="stable")


def kolmogorov_sf(lam):
    """P(K > lam) for the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.0:
        # the alternating series converges slowly here; use the equivalent
        # theta-function form 1 - sqrt(2 pi)/lam * sum exp(-(2k-1)^2 pi^2 / (8 lam^2))
        s, k = 0.0, 1
        while True:
            term = math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam))
            s += term
            if term < 1e-16:
                break
            k += 1
        p = 1.0 - math.sqrt(2 * math.pi) / lam * s
    else:
        p, j = 0.0, 1
        while True:
            term = math.exp(-2.0 * j * j * lam * lam)
            p += term if j % 2 else -term
            if term < 1e-12:
                break
            j += 1
        p *= 2.0
    return min(1.0, max(0.0, p))


def ks_two_sample(a, b):
    """Two-sided two-sample KS statistic and asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    na, nb = a.size, b.size
    if na == 0 or nb == 0:
        raise ValueError("both samples must be non-empty")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / na
    cdf_b = np.searchsorted(b, grid, side="right") / nb
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    ne = na * nb / (na + nb)
    return d, kolmogorov_sf(math.sqrt(ne) * d)


def _scan(magnitudes, ordered, alpha, step, limit):
    trace = []
    for n in range(step, limit + 1, step):
        d, p = ks_two_sample(magnitudes[ordered[:n]], magnitudes)
        trace.append((n, d, p))
        if p > alpha:
            return n, trace
    return None, trace


def select_significant(weights, alpha=0.05, step=1, top_fraction=None):
    """Most/least significant feature sets (0-based indices) from gate weights.

    ``top_fraction`` replaces the KS rule for the most significant set with a
    fixed top share of the ranking (e.g. 0.3 for "top 30%").
    """
    w = np.asarray(weights, dtype=float)
    m = w.shape[0]
    if m < 4:
        raise ValueError("need at least 4 weights")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if step < 1:
        raise ValueError("step must be at least 1")
    ranking = rank_features(w)
    mags = np.abs(w)

    n_top, trace = _scan(mags, ranking, alpha, step, m - 1)
    if top_fraction is not None:
        if not 0 < top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")
        n_top = max(1, math.ceil(top_fraction * m - 1e-9))
    elif n_top is None:
        warnings.warn("no prefix passed the KS test; every feature is marked most significant",
                      DegenerateSelectionWarning, stacklevel=2)
        n_top = m
    most = tuple(int(i) for i in ranking[:n_top])

    n_bottom, trace_bottom = _scan(mags, ranking[::-1], alpha, step, m - 1)
    if n_bottom is None:
        n_bottom = 0
    n_bottom = min(n_bottom, m - n_top)
    least = tuple(int(i) for i in ranking[m - n_bottom:]) if n_bottom else ()
    return SignificanceReport(weights=w.copy(), ranking=ranking, most_significant=most,
                              least_significant=least, ks_trace=trace,
                              ks_trace_bottom=trace_bottom, alpha=alpha, step=step,
                              top_fraction=top_fraction)
