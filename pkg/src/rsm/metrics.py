"""Time-dependent concordance and MAE for discrete survival PDFs.

Undefined metrics (no comparable pairs, no uncensored records) are reported
as ``nan`` rather than 0.
"""

from dataclasses import dataclass, field

import numpy as np

QUANTILES = (0.25, 0.5, 0.75, 1.0)


def _as_mass(pdfs):
    if isinstance(pdfs, np.ndarray):
        return np.atleast_2d(pdfs.astype(float))
    return np.array([p.mass for p in pdfs], dtype=float)


def _edges_of(pdfs, bin_edges):
    if bin_edges is not None:
        return np.asarray(bin_edges, dtype=float)
    return np.asarray(pdfs[0].bin_edges, dtype=float)


def cdf_matrix(mass, bin_edges, t):
    """F(t) for every row of ``mass``: full bins below t plus linear interpolation."""
    mass = np.atleast_2d(mass)
    edges = np.asarray(bin_edges, dtype=float)
    if t < 0:
        raise ValueError("t must be non-negative")
    if t >= edges[-1]:
        return np.ones(mass.shape[0])
    b = int(np.searchsorted(edges, t, side="right") - 1)
    b = max(b, 0)
    frac = (t - edges[b]) / (edges[b + 1] - edges[b])
    below = mass[:, :b].sum(axis=1)
    return np.minimum(below + frac * mass[:, b], 1.0)


def cdf_at(pdf, t):
    return float(cdf_matrix(pdf.mass[None, :], pdf.bin_edges, t)[0])


def _unpack(truths):
    # either a pair of numpy arrays (times, censored) or an iterable of (time, censored)
    if isinstance(truths, tuple) and len(truths) == 2 and isinstance(truths[0], np.ndarray):
        times, censored = truths
    else:
        pairs = list(truths)
        times = [t for t, _ in pairs]
        censored = [c for _, c in pairs]
    return np.asarray(times, dtype=float), np.asarray(censored, dtype=bool)


def concordance_counts(risk, times, censored, t, chunk=1024):
    """(2 * concordant + tied, comparable) over pairs i, j with
    i uncensored, T_i < T_j, T_i <= t; risk_i > risk_j is concordant."""
    events = np.flatnonzero(~censored & (times <= t))
    num, den = 0, 0
    for start in range(0, events.size, chunk):
        i = events[start:start + chunk]
        comparable = times[i][:, None] < times[None, :]
        ri = risk[i][:, None]
        num += 2 * int(np.sum(comparable & (ri > risk[None, :])))
        num += int(np.sum(comparable & (ri == risk[None, :])))
        den += int(np.sum(comparable))
    return num, den


def c_index_td(pdfs, truths, t, bin_edges=None):
    """Time-dependent concordance at ``t``; ``nan`` when no pair is comparable."""
    mass = _as_mass(pdfs)
    edges = _edges_of(pdfs, bin_edges)
    times, censored = _unpack(truths)
    risk = cdf_matrix(mass, edges, t)
    num, den = concordance_counts(risk, times, censored, t)
    if den == 0:
        return float("nan")
    return num / (2.0 * den)


def expected_times(mass, bin_edges):
    edges = np.asarray(bin_edges, dtype=float)
    return np.atleast_2d(mass) @ (0.5 * (edges[:-1] + edges[1:]))


def mae(pdfs, truths, bin_edges=None):
    """Mean |y - E[T]| over uncensored records; ``nan`` if there are none."""
    mass = _as_mass(pdfs)
    edges = _edges_of(pdfs, bin_edges)
    times, censored = _unpack(truths)
    unc = ~censored
    if not np.any(unc):
        return float("nan")
    pred = expected_times(mass[unc], edges)
    return float(np.mean(np.abs(times[unc] - pred)))


@dataclass(frozen=True)
class EvalRow:
    quantile: float
    time: float
    c_index: float
    mae: float
    comparable_pairs: int
    uncensored: int


@dataclass(frozen=True)
class EvalReport:
    rows: tuple
    intervals: dict = field(default=None)

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and np.isnan(v) else v

        out = {"rows": [{k: clean(v) for k, v in row.__dict__.items()} for row in self.rows]}
        if self.intervals is not None:
            out["intervals"] = self.intervals
        return out

    def c_index_at(self, q):
        return next(r.c_index for r in self.rows if r.quantile == q)


def evaluation_times(times, censored, quantiles=QUANTILES):
    unc = np.sort(np.asarray(times, dtype=float)[~np.asarray(censored, dtype=bool)])
    if unc.size == 0:
        raise ValueError("no uncensored records to define evaluation horizons")
    return np.quantile(unc, quantiles, method="weibull")


def evaluate(pdfs, truths, bin_edges=None, quantiles=QUANTILES):
    """C^td and MAE at the 25/50/75/100% quantiles of uncensored event times.

    The MAE cell at time t covers uncensored records with y <= t.
    """
    mass = _as_mass(pdfs)
    if mass.shape[0] == 0:
        raise ValueError("no records to evaluate")
    edges = _edges_of(pdfs, bin_edges)
    times, censored = _unpack(truths)
    horizons = evaluation_times(times, censored, quantiles)
    pred = expected_times(mass, edges)
    rows = []
    for q, t in zip(quantiles, horizons):
        risk = cdf_matrix(mass, edges, t)
        num, den = concordance_counts(risk, times, censored, t)
        sel = ~censored & (times <= t)
        rows.append(EvalRow(
            quantile=float(q),
            time=float(t),
            c_index=num / (2.0 * den) if den else float("nan"),
            mae=float(np.mean(np.abs(times[sel] - pred[sel]))) if sel.any() else float("nan"),
            comparable_pairs=den,
            uncensored=int(sel.sum()),
        ))
    return EvalReport(rows=tuple(rows))


def bootstrap_intervals(pdfs, truths, bin_edges=None, n_resamples=200, seed=0, level=0.95):
    """Percentile intervals for each report cell from seeded resamples."""
    mass = _as_mass(pdfs)
    edges = _edges_of(pdfs, bin_edges)
    times, censored = _unpack(truths)
    rng = np.random.default_rng(seed)
    n = mass.shape[0]
    c_vals, m_vals = [], []
    for _ in range(n_resamples):
        idx = rng.integers(n, size=n)
        if np.all(censored[idx]):
            continue
        rep = evaluate(mass[idx], (times[idx], censored[idx]), edges)
        c_vals.append([r.c_index for r in rep.rows])
        m_vals.append([r.mae for r in rep.rows])
    lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
    out = {}
    for name, vals in (("c_index", c_vals), ("mae", m_vals)):
        arr = np.array(vals, dtype=float)
        out[name] = [[float(np.nanquantile(arr[:, j], lo)), float(np.nanquantile(arr[:, j], hi))]
                     for j in range(arr.shape[1])]
    out["n_resamples"] = len(c_vals)
    out["level"] = level
    return out
