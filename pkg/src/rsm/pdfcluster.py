"""Summary statistics of survival PDFs, Jensen-Shannon distance, and k-means.

Patients are clustered on standardized :class:`PdfStats` vectors; the
Jensen-Shannon distance orders patients inside a cluster.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import FlatCurveWarning

STAT_NAMES = ("mean_time", "sd_time", "q25", "q50", "q75", "entropy", "mode_midpoint")
JSD_SMOOTHING = 1e-10


@dataclass(frozen=True)
class PdfStats:
    mean_time: float
    sd_time: float
    quantile_times: tuple
    entropy: float
    mode_bin_midpoint: float

    def as_vector(self):
        return np.array([self.mean_time, self.sd_time, *self.quantile_times,
                         self.entropy, self.mode_bin_midpoint])


def _interp_quantiles(mass, edges, probs):
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    out = []
    for q in probs:
        # first bin whose upper CDF reaches q, skipping empty bins
        b = int(np.searchsorted(cdf[1:], q - 1e-15, side="left"))
        b = min(b, len(mass) - 1)
        while mass[b] == 0 and b < len(mass) - 1:
            b += 1
        frac = (q - cdf[b]) / mass[b] if mass[b] > 0 else 0.0
        frac = min(max(frac, 0.0), 1.0)
        out.append(float(edges[b] + frac * (edges[b + 1] - edges[b])))
    return tuple(out)


def pdf_stats(pdf):
    mass, edges = pdf.mass, pdf.bin_edges
    mid = 0.5 * (edges[:-1] + edges[1:])
    mean = float(mass @ mid)
    sd = math.sqrt(max(float(mass @ (mid - mean) ** 2), 0.0))
    nz = mass > 0
    entropy = float(-(mass[nz] * np.log(mass[nz])).sum())
    entropy = min(max(entropy, 0.0), math.log(len(mass)))
    return PdfStats(
        mean_time=mean,
        sd_time=sd,
        quantile_times=_interp_quantiles(mass, edges, (0.25, 0.5, 0.75)),
        entropy=entropy,
        mode_bin_midpoint=float(mid[int(np.argmax(mass))]),
    )


def stats_matrix(pdfs):
    """Stack ``pdf_stats`` of many PDFs into an (n, 7) array."""
    return np.array([pdf_stats(p).as_vector() for p in pdfs]).reshape(-1, len(STAT_NAMES))


def stats_matrix_from_mass(mass, edges):
    from .survnet import SurvivalPDF

    return stats_matrix(SurvivalPDF(row, edges) for row in mass)


def _kl(p, q):
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / q[nz])).sum())


def js_distance(p, q, variant="mixture"):
    """Jensen-Shannon distance between two PDFs on identical bins.

    ``variant="mixture"``: sqrt(KL(p||m)/2 + KL(q||m)/2), m = (p + q)/2; a
    metric bounded by sqrt(ln 2). ``variant="symmetric-kl"``: sqrt of the
    averaged two-way KL divergence, on PDFs smoothed by 1e-10 and renormalized.
    """
    pm, qm = _mass(p), _mass(q)
    if hasattr(p, "bin_edges") and hasattr(q, "bin_edges"):
        if not np.array_equal(p.bin_edges, q.bin_edges):
            raise ValueError("PDFs must share bin edges")
    if pm.shape != qm.shape:
        raise ValueError("PDFs must have the same number of bins")
    if variant == "mixture":
        m = 0.5 * (pm + qm)
        val = 0.5 * _kl(pm, m) + 0.5 * _kl(qm, m)
    elif variant == "symmetric-kl":
        ps = (pm + JSD_SMOOTHING) / (pm + JSD_SMOOTHING).sum()
        qs = (qm + JSD_SMOOTHING) / (qm + JSD_SMOOTHING).sum()
        val = 0.5 * _kl(ps, qs) + 0.5 * _kl(qs, ps)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return math.sqrt(max(val, 0.0))


def js_distances_to(query_mass, mass, variant="mixture"):
    """Vectorised mixture JS distance from one PDF to each row of ``mass``."""
    if variant != "mixture":
        return np.array([js_distance(query_mass, row, variant) for row in mass])
    q = np.broadcast_to(query_mass, mass.shape)
    m = 0.5 * (q + mass)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(q > 0, q * np.log(q / m), 0.0).sum(axis=1)
        b = np.where(mass > 0, mass * np.log(mass / m), 0.0).sum(axis=1)
    return np.sqrt(np.maximum(0.5 * a + 0.5 * b, 0.0))


def _mass(p):
    return np.asarray(getattr(p, "mass", p), dtype=float)


# --------------------------------------------------------------------------
# k-means


@dataclass(frozen=True, eq=False)
class ClusterModel:
    k: int
    centroids: np.ndarray  # standardized stats space
    stats_mean: np.ndarray
    stats_scale: np.ndarray
    assignments: dict  # patient id -> cluster id
    inertia: float
    inertia_curve: tuple = ()

    def standardize(self, stats):
        return (np.atleast_2d(stats) - self.stats_mean) / self.stats_scale

    def assign(self, stats):
        """Nearest-centroid cluster for raw (unstandardized) stats rows."""
        z = self.standardize(_as_matrix(stats))
        d2 = ((z[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)

    def members(self, cluster):
        return sorted(pid for pid, c in self.assignments.items() if c == cluster)

    def to_dict(self):
        return {
            "k": self.k,
            "centroids": self.centroids.tolist(),
            "stats_names": list(STAT_NAMES),
            "stats_mean": self.stats_mean.tolist(),
            "stats_scale": self.stats_scale.tolist(),
            "assignments": {str(k): int(v) for k, v in sorted(self.assignments.items())},
            "inertia": self.inertia,
            "inertia_curve": [[int(k), float(v)] for k, v in self.inertia_curve],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            k=int(d["k"]),
            centroids=np.asarray(d["centroids"], dtype=float),
            stats_mean=np.asarray(d["stats_mean"], dtype=float),
            stats_scale=np.asarray(d["stats_scale"], dtype=float),
            assignments={int(k): int(v) for k, v in d["assignments"].items()},
            inertia=float(d["inertia"]),
            inertia_curve=tuple((int(k), float(v)) for k, v in d.get("inertia_curve", [])),
        )


def _as_matrix(stats):
    if isinstance(stats, np.ndarray):
        return np.atleast_2d(stats.astype(float))
    rows = [s.as_vector() if isinstance(s, PdfStats) else np.asarray(s, dtype=float)
            for s in stats]
    return np.array(rows, dtype=float).reshape(len(rows), -1)


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(x, centers, max_iter):
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(centers.shape[0]):
            members = x[labels == c]
            if members.size:
                centers[c] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-served point
                far = int(np.argmax(d2[np.arange(len(x)), labels]))
                centers[c] = x[far]
                labels[far] = c
    for c in range(centers.shape[0]):
        members = x[labels == c]
        if members.size:
            centers[c] = members.mean(axis=0)
    inertia = float(((x - centers[labels]) ** 2).sum(axis=1).mean())
    return labels, centers, inertia


def _standardize_stats(x):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[~(scale > 0)] = 1.0
    return mean, scale


def kmeans_fit(stats, k, seed=0, ids=None, n_restarts=10, max_iter=300):
    """Best-of-``n_restarts`` k-means (k-means++ seeding, Lloyd iterations).

    Points are processed in ascending-id order so the fit does not depend on
    input order. Inertia is the mean squared distance to the assigned centroid
    in standardized stats space.
    """
    x = _as_matrix(stats)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of patients ({n})")
    ids = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    xs = x[order]
    mean, scale = _standardize_stats(xs)
    z = (xs - mean) / scale
    return _fit_standardized(z, ids[order], k, mean, scale, seed, n_restarts, max_iter)


def _fit_standardized(z, ids, k, mean, scale, seed, n_restarts, max_iter):
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        labels, centers, inertia = _lloyd(z, _kmeanspp(z, k, rng), max_iter)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    labels, centers, inertia = best
    return ClusterModel(
        k=k,
        centroids=centers,
        stats_mean=mean,
        stats_scale=scale,
        assignments={int(i): int(c) for i, c in zip(ids, labels)},
        inertia=inertia,
    )


def elbow(curve):
    """Index k maximizing inertia(k-1) - 2 inertia(k) + inertia(k+1); None if flat."""
    ks = [k for k, _ in curve]
    vals = [v for _, v in curve]
    best_k, best = None, 0.0
    for i in range(1, len(vals) - 1):
        sd = vals[i - 1] - 2 * vals[i] + vals[i + 1]
        if sd > best:
            best_k, best = ks[i], sd
    return best_k


def select_k(stats, k_max=10, seed=0, ids=None):
    """Elbow choice of k over k = 1..k_max; returns (k_best, curve, models)."""
    if k_max < 3:
        raise ValueError("k_max must be at least 3")
    x = _as_matrix(stats)
    k_max = min(k_max, x.shape[0])
    models = {k: kmeans_fit(x, k, seed=seed, ids=ids) for k in range(1, k_max + 1)}
    curve = tuple((k, models[k].inertia) for k in range(1, k_max + 1))
    k_best = elbow(curve)
    if k_best is None:
        warnings.warn("inertia curve has no positive second difference; using k=2",
                      FlatCurveWarning, stacklevel=2)
        k_best = 2
    return k_best, curve, models


def fit_clusters(stats, k_max=10, seed=0, ids=None):
    """Elbow selection followed by the chosen model, with the curve attached."""
    k_best, curve, models = select_k(stats, k_max, seed, ids)
    m = models[k_best]
    return ClusterModel(k=m.k, centroids=m.centroids, stats_mean=m.stats_mean,
                        stats_scale=m.stats_scale, assignments=m.assignments,
                        inertia=m.inertia, inertia_curve=curve)


def rank_in_cluster(pdfs, model, query_id, variant="mixture"):
    """Other members of the query's cluster by ascending JS distance (ties by id)."""
    if query_id not in model.assignments:
        raise KeyError(f"patient {query_id} has no cluster assignment")
    cluster = model.assignments[query_id]
    query = pdfs[query_id]
    out = []
    for pid in model.members(cluster):
        if pid == query_id:
            continue
        out.append((pid, js_distance(query, pdfs[pid], variant)))
    out.sort(key=lambda t: (t[1], t[0]))
    return out
