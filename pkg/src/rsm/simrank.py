"""Patient retrieval over principal components of the significant features.

Each patient gets a scalar score, the eigenvalue-weighted sum of its
principal-component coordinates. Patients are sorted by score inside their
cluster, and a query is placed by binary search. Linear PCA uses a cyclic
Jacobi eigensolver. Kernel PCA uses an RBF kernel.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _binary
from .errors import QueryError, ShapeError, ShortClusterWarning
from .pdfcluster import ClusterModel, js_distances_to, stats_matrix_from_mass

INDEX_MAGIC = b"RSMI"
INDEX_VERSION = 1
METHODS = ("pca", "kpca", "euclidean")
MAX_ANCHORS = 2000


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Eigenvalues and eigenvectors (columns) of a symmetric matrix by cyclic Jacobi.

    Sweeps stop once the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||a||_F)``.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError("matrix must be square")
    v = np.eye(n)
    threshold = tol * max(1.0, float(np.linalg.norm(a)))
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        # summed directly: ||a||^2 - ||diag||^2 cancels catastrophically
        off = math.sqrt(float((a[offdiag] ** 2).sum()))
        if off < threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-18 * abs(diff):
                    t = apq / diff  # limit of 1 / (2 theta) for huge theta
                else:
                    theta = diff / (2.0 * apq)
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


@dataclass(frozen=True, eq=False)
class ProjectionBasis:
    kind: str  # "linear" | "rbf-kernel"
    components: np.ndarray  # (n_components, d) or (n_components, n_anchors)
    eigenvalues: np.ndarray  # retained, descending
    spectrum: np.ndarray  # full spectrum, descending
    cum_variance_cutoff: float
    feature_subset: tuple
    mean: np.ndarray  # linear: feature mean; rbf: anchor mean
    kernel_bandwidth: float = None
    anchor_points: np.ndarray = None
    kernel_col_mean: np.ndarray = None
    kernel_grand_mean: float = None

    @property
    def n_components(self):
        return self.eigenvalues.shape[0]

    @property
    def n_inputs(self):
        return self.mean.shape[0]


def n_retained(eigenvalues, cutoff):
    """Shortest prefix whose eigenvalue sum reaches ``cutoff`` of the total."""
    ev = np.asarray(eigenvalues, dtype=float)
    total = ev.sum()
    if total <= 0:
        return 1
    cum = np.cumsum(ev)
    return int(min(np.searchsorted(cum, cutoff * total * (1 - 1e-12), side="left") + 1, len(ev)))


def _fix_sign(vectors, reference=None):
    """Flip each row so its largest-magnitude entry (of ``reference`` if given) is positive."""
    ref = vectors if reference is None else reference
    out = vectors.copy()
    for j in range(out.shape[0]):
        i = int(np.argmax(np.abs(ref[j])))
        if ref[j, i] < 0:
            out[j] = -out[j]
    return out


def _sorted_spectrum(vals, vecs):
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vals = np.where(vals < 0, 0.0, vals)  # round-off negatives
    return vals, vecs[:, order]


def pca_fit(x, cutoff=0.95, feature_subset=None):
    """Linear PCA on the population covariance, truncated at ``cutoff`` variance."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("need at least one feature")
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least two patients")
    if not 0 < cutoff <= 1:
        raise ValueError("cutoff must lie in (0, 1]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    vals, vecs = _sorted_spectrum(*jacobi_eigh(cov))
    k = n_retained(vals, cutoff)
    comps = _fix_sign(vecs[:, :k].T)
    return ProjectionBasis(
        kind="linear",
        components=comps,
        eigenvalues=vals[:k].copy(),
        spectrum=vals,
        cum_variance_cutoff=cutoff,
        feature_subset=tuple(range(d)) if feature_subset is None else tuple(feature_subset),
        mean=mean,
    )


def _sqdist(a, b, chunk=256):
    # explicit differences: exact zeros for duplicates, and a row's result does
    # not depend on how many rows are evaluated together
    out = np.empty((a.shape[0], b.shape[0]))
    for s in range(0, a.shape[0], chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = (diff * diff).sum(axis=2)
    return out


def _kernel_minus_one(a, b, bandwidth):
    # k - 1 keeps precision when the bandwidth is huge; centering drops the constant
    return np.expm1(-_sqdist(a, b) / (2.0 * bandwidth ** 2))


def centered_kernel(x, bandwidth):
    k = _kernel_minus_one(x, x, bandwidth)
    return k - k.mean(axis=0)[None, :] - k.mean(axis=1)[:, None] + k.mean()


def median_bandwidth(x, n_pairs=1000, seed=0):
    """Median pairwise distance over ``n_pairs`` random pairs (median heuristic)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    i = rng.integers(n, size=n_pairs)
    j = rng.integers(n - 1, size=n_pairs)
    j = np.where(j >= i, j + 1, j)
    med = float(np.median(np.sqrt(((x[i] - x[j]) ** 2).sum(axis=1))))
    return med if med > 0 else 1.0


def kpca_fit(x, bandwidth=None, cutoff=0.95, feature_subset=None, max_anchors=MAX_ANCHORS,
             seed=0):
    """RBF kernel PCA; anchors are all points, or a seeded subsample of ``max_anchors``.

    Components are coefficient vectors over the anchors scaled by 1/sqrt(lambda).
    A component's sign is chosen so the largest entry of its input-space image
    sum_i alpha_i (a_i - mean) is positive. With a very wide kernel this
    matches the sign rule of :func:`pca_fit`.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two patients")
    if bandwidth is None:
        bandwidth = median_bandwidth(x, seed=seed)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if n > max_anchors:
        rng = np.random.default_rng(seed)
        anchors = x[np.sort(rng.choice(n, size=max_anchors, replace=False))]
    else:
        anchors = x.copy()
    m = anchors.shape[0]
    km1 = _kernel_minus_one(anchors, anchors, bandwidth)
    col_mean = km1.mean(axis=0)
    grand = float(km1.mean())
    kc = km1 - col_mean[None, :] - km1.mean(axis=1)[:, None] + grand
    kc = 0.5 * (kc + kc.T)
    vals, vecs = _sorted_spectrum(*np.linalg.eigh(kc))
    k = n_retained(vals, cutoff)
    scale = np.where(vals[:k] > 0, 1.0 / np.sqrt(np.where(vals[:k] > 0, vals[:k], 1.0)), 0.0)
    alphas = (vecs[:, :k] * scale).T
    mean = anchors.mean(axis=0)
    image = alphas @ (anchors - mean)
    alphas = _fix_sign(alphas, reference=image)
    return ProjectionBasis(
        kind="rbf-kernel",
        components=alphas,
        eigenvalues=vals[:k] / m,
        spectrum=vals / m,
        cum_variance_cutoff=cutoff,
        feature_subset=tuple(range(x.shape[1])) if feature_subset is None
        else tuple(feature_subset),
        mean=mean,
        kernel_bandwidth=float(bandwidth),
        anchor_points=anchors,
        kernel_col_mean=col_mean,
        kernel_grand_mean=grand,
    )


def project(basis, x):
    """Principal-component coordinates, shape (n, n_components)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != basis.n_inputs:
        raise ShapeError(f"expected {basis.n_inputs} features, got {x.shape[1]}")
    if basis.kind == "linear":
        return _rowwise_dot(x - basis.mean, basis.components)
    out = np.empty((x.shape[0], basis.n_components))
    for s in range(0, x.shape[0], 256):
        kx = _kernel_minus_one(x[s:s + 256], basis.anchor_points, basis.kernel_bandwidth)
        kx = (kx - basis.kernel_col_mean[None, :] - kx.mean(axis=1)[:, None]
              + basis.kernel_grand_mean)
        out[s:s + 256] = _rowwise_dot(kx, basis.components)
    return out


def _rowwise_dot(x, vectors):
    # per-row reductions instead of BLAS so one patient scores bit-identically
    # whether projected alone or inside a batch
    out = np.empty((x.shape[0], vectors.shape[0]))
    for j, v in enumerate(vectors):
        out[:, j] = (x * v).sum(axis=1)
    return out


def scores(basis, x):
    return (project(basis, x) * basis.eigenvalues).sum(axis=1)


def score(basis, features):
    """Eigenvalue-weighted sum of the component coordinates of one patient."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 1:
        raise ShapeError("score expects a single feature vector")
    return float(scores(basis, features)[0])


# --------------------------------------------------------------------------
# index


@dataclass(frozen=True, eq=False)
class Neighbor:
    patient_id: int
    score_difference: float
    js_distance: float
    feature_values: dict


@dataclass(frozen=True, eq=False)
class ExplanationResult:
    query_id: object  # int or "external"
    cluster: int
    neighbors: list
    method: str
    basis_kind: str
    significant_features: list
    query_score: float = None
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "query_id": self.query_id,
            "cluster": int(self.cluster),
            "method": self.method,
            "basis_kind": self.basis_kind,
            "query_score": self.query_score,
            "significant_features": list(self.significant_features),
            "neighbors": [
                {
                    "patient_id": int(nb.patient_id),
                    "score_difference": float(nb.score_difference),
                    "js_distance": float(nb.js_distance),
                    "feature_values": nb.feature_values,
                }
                for nb in self.neighbors
            ],
            "warnings": list(self.warnings),
        }

    def table(self):
        names = list(self.significant_features)
        head = ["rank", "patient", "|d score|", "JSD", *names]
        rows = [head]
        for r, nb in enumerate(self.neighbors, start=1):
            vals = ["NA" if nb.feature_values[n] is None else f"{nb.feature_values[n]:.3g}"
                    for n in names]
            rows.append([str(r), str(nb.patient_id), f"{nb.score_difference:.4g}",
                         f"{nb.js_distance:.4f}", *vals])
        widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
        lines = [f"query {self.query_id}  cluster {self.cluster}  method {self.method}"]
        for row in rows:
            lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        return "\n".join(lines)


@dataclass(eq=False)
class SimilarityIndex:
    method: str
    basis: ProjectionBasis  # None for the euclidean method
    cluster_model: ClusterModel
    feature_subset: tuple  # columns of the model's feature space
    feature_names: tuple  # names of the subset columns
    ids: np.ndarray
    clusters: np.ndarray
    scores: np.ndarray
    features: np.ndarray  # standardized subset features
    raw_features: np.ndarray  # original units, NaN where missing
    pdf_mass: np.ndarray
    bin_edges: np.ndarray
    _sorted: dict = field(default=None, repr=False)

    def __post_init__(self):
        self._sorted = {}
        for c in np.unique(self.clusters):
            pos = np.flatnonzero(self.clusters == c)
            order = np.lexsort((self.ids[pos], self.scores[pos]))
            self._sorted[int(c)] = pos[order]

    def __len__(self):
        return self.ids.shape[0]

    def cluster_positions(self, cluster):
        """Record positions of a cluster, sorted by (score, id)."""
        return self._sorted.get(int(cluster), np.array([], dtype=int))

    def sorted_list(self, cluster):
        pos = self.cluster_positions(cluster)
        return list(zip(self.scores[pos].tolist(), self.ids[pos].tolist()))


def fit_basis(x, method, cutoff=0.95, bandwidth=None, feature_subset=None, seed=0):
    if method == "pca":
        return pca_fit(x, cutoff, feature_subset)
    if method == "kpca":
        return kpca_fit(x, bandwidth, cutoff, feature_subset, seed=seed)
    if method == "euclidean":
        return None
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def build_index(cohort, cluster_model, basis, pdf_mass, bin_edges, feature_subset=None,
                method=None):
    """Score every patient and sort each cluster by (score, id).

    ``cohort`` must be standardized with the model's transform; ``pdf_mass``
    holds the predicted PDFs, row-aligned with the cohort.
    """
    if feature_subset is None:
        feature_subset = basis.feature_subset if basis is not None else \
            tuple(range(cohort.n_features))
    feature_subset = tuple(int(i) for i in feature_subset)
    if method is None:
        method = "euclidean" if basis is None else ("pca" if basis.kind == "linear" else "kpca")
    missing = [int(i) for i in cohort.ids if int(i) not in cluster_model.assignments]
    if missing:
        raise QueryError(f"{len(missing)} patient(s) lack a cluster assignment, e.g. {missing[0]}")
    x = cohort.features[:, feature_subset]
    sc = scores(basis, x) if basis is not None else np.zeros(len(cohort))
    raw = x.copy()
    st = cohort.standardization
    if st is not None:
        m = st.mean.shape[0]
        for j, col in enumerate(feature_subset):
            if col < m:
                raw[:, j] = x[:, j] * st.scale[col] + st.mean[col]
    raw = np.where(cohort.observed[:, feature_subset], raw, np.nan)
    return SimilarityIndex(
        method=method,
        basis=basis,
        cluster_model=cluster_model,
        feature_subset=feature_subset,
        feature_names=tuple(cohort.feature_names[i] for i in feature_subset),
        ids=cohort.ids.copy(),
        clusters=np.array([cluster_model.assignments[int(i)] for i in cohort.ids], dtype=int),
        scores=sc,
        features=x,
        raw_features=raw,
        pdf_mass=np.asarray(pdf_mass, dtype=float),
        bin_edges=np.asarray(bin_edges, dtype=float),
    )


def _nearest_window(sorted_scores, q, k):
    """Positions (into ``sorted_scores``) of the k nearest scores, plus exact ties."""
    n = sorted_scores.shape[0]
    pos = int(np.searchsorted(sorted_scores, q, side="left"))
    lo, hi = pos - 1, pos
    last = None
    for _ in range(min(k, n)):
        dl = abs(sorted_scores[lo] - q) if lo >= 0 else math.inf
        dh = abs(sorted_scores[hi] - q) if hi < n else math.inf
        if dl <= dh:
            last, lo = dl, lo - 1
        else:
            last, hi = dh, hi + 1
    # pull in entries tied with the k-th distance so ids can break the tie
    while lo >= 0 and abs(sorted_scores[lo] - q) == last:
        lo -= 1
    while hi < n and abs(sorted_scores[hi] - q) == last:
        hi += 1
    return np.arange(lo + 1, hi)


def _split_window(n, pos, k):
    below, above = math.ceil(k / 2), k // 2
    lo, hi = pos - below, pos + above
    if lo < 0:
        hi, lo = min(n, hi - lo), 0
    if hi > n:
        lo, hi = max(0, lo - (hi - n)), n
    return np.arange(lo, hi)


def query_similar(index, query_features, query_pdf, k=10, query_id="external",
                  window="nearest"):
    """Retrieve the ``k`` patients most similar to a query inside its cluster.

    ``query_features`` is the full standardized feature vector of the query.
    ``window="nearest"`` returns exactly the k closest scores. ``"split"``
    takes ceil(k/2) sorted neighbours below the insertion point and floor(k/2)
    above it.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(index) == 0:
        raise QueryError("index is empty")
    q_mass = np.asarray(getattr(query_pdf, "mass", query_pdf), dtype=float)
    qf = np.asarray(query_features, dtype=float).reshape(-1)
    if qf.shape[0] <= max(index.feature_subset):
        raise ShapeError("query feature vector is shorter than the index feature subset")
    qx = qf[list(index.feature_subset)]
    cluster = int(index.cluster_model.assign(stats_matrix_from_mass(q_mass[None, :],
                                                                    index.bin_edges))[0])
    positions = index.cluster_positions(cluster)
    if positions.size == 0:
        raise QueryError(f"cluster {cluster} has no indexed patients")
    notes = []
    if positions.size < k:
        msg = f"cluster {cluster} has {positions.size} members, fewer than k={k}"
        warnings.warn(msg, ShortClusterWarning, stacklevel=2)
        notes.append(msg)

    q_score = None
    if index.method == "euclidean":
        diff = np.sqrt(((index.features[positions] - qx) ** 2).sum(axis=1))
        cand = positions
    else:
        q_score = float(scores(index.basis, qx)[0])
        sorted_scores = index.scores[positions]
        if window == "nearest":
            local = _nearest_window(sorted_scores, q_score, k)
        elif window == "split":
            pos = int(np.searchsorted(sorted_scores, q_score, side="left"))
            local = _split_window(positions.size, pos, k)
        else:
            raise ValueError(f"unknown window {window!r}")
        cand = positions[local]
        diff = np.abs(index.scores[cand] - q_score)
    order = np.lexsort((index.ids[cand], diff))[:k]
    chosen, chosen_diff = cand[order], diff[order]
    jsd = js_distances_to(q_mass, index.pdf_mass[chosen])
    neighbors = []
    for p, dv, js in zip(chosen, chosen_diff, jsd):
        vals = {name: (None if np.isnan(v) else float(v))
                for name, v in zip(index.feature_names, index.raw_features[p])}
        neighbors.append(Neighbor(int(index.ids[p]), float(dv), float(js), vals))
    return ExplanationResult(
        query_id=query_id,
        cluster=cluster,
        neighbors=neighbors,
        method=index.method,
        basis_kind=index.basis.kind if index.basis is not None else "none",
        significant_features=list(index.feature_names),
        query_score=q_score,
        warnings=notes,
    )


# --------------------------------------------------------------------------
# persistence


def encode_index(index):
    w = _binary.Writer(INDEX_MAGIC, INDEX_VERSION)
    w.text(index.method)
    b = index.basis
    w.u8(b is not None)
    if b is not None:
        w.text(b.kind)
        w.f64(b.cum_variance_cutoff)
        w.array(b.components)
        w.array(b.eigenvalues)
        w.array(b.spectrum)
        w.array(np.asarray(b.feature_subset), "<i8")
        w.array(b.mean)
        if b.kind == "rbf-kernel":
            w.f64(b.kernel_bandwidth)
            w.array(b.anchor_points)
            w.array(b.kernel_col_mean)
            w.f64(b.kernel_grand_mean)
    cm = index.cluster_model
    w.u32(cm.k)
    w.array(cm.centroids)
    w.array(cm.stats_mean)
    w.array(cm.stats_scale)
    w.f64(cm.inertia)
    w.array(np.array(cm.inertia_curve, dtype=float).reshape(-1, 2))
    ids_sorted = sorted(cm.assignments)
    w.array(np.array(ids_sorted, dtype=np.int64), "<i8")
    w.array(np.array([cm.assignments[i] for i in ids_sorted], dtype=np.int64), "<i8")
    w.array(np.asarray(index.feature_subset), "<i8")
    w.texts(list(index.feature_names))
    w.array(index.ids, "<i8")
    w.array(index.clusters, "<i8")
    w.array(index.scores)
    w.array(index.features)
    w.array(index.raw_features)
    w.array(index.pdf_mass)
    w.array(index.bin_edges)
    return w.getvalue()


def decode_index(data):
    r = _binary.Reader(data, INDEX_MAGIC, (INDEX_VERSION,), what="index")
    method = r.text()
    basis = None
    if r.u8():
        kind = r.text()
        cutoff = r.f64()
        comps, evals, spectrum = r.array(), r.array(), r.array()
        subset = tuple(int(i) for i in r.array("<i8"))
        mean = r.array()
        extra = {}
        if kind == "rbf-kernel":
            extra = dict(kernel_bandwidth=r.f64(), anchor_points=r.array(),
                         kernel_col_mean=r.array(), kernel_grand_mean=r.f64())
        basis = ProjectionBasis(kind=kind, components=comps, eigenvalues=evals,
                                spectrum=spectrum, cum_variance_cutoff=cutoff,
                                feature_subset=subset, mean=mean, **extra)
    k = r.u32()
    centroids, smean, sscale = r.array(), r.array(), r.array()
    inertia = r.f64()
    curve = tuple((int(a), float(b)) for a, b in r.array())
    a_ids, a_cl = r.array("<i8"), r.array("<i8")
    cm = ClusterModel(k=k, centroids=centroids, stats_mean=smean, stats_scale=sscale,
                      assignments={int(i): int(c) for i, c in zip(a_ids, a_cl)},
                      inertia=inertia, inertia_curve=curve)
    subset = tuple(int(i) for i in r.array("<i8"))
    names = tuple(r.texts())
    return SimilarityIndex(method=method, basis=basis, cluster_model=cm, feature_subset=subset,
                           feature_names=names, ids=r.array("<i8"), clusters=r.array("<i8"),
                           scores=r.array(), features=r.array(), raw_features=r.array(),
                           pdf_mass=r.array(), bin_edges=r.array())


def save_index(index, path):
    with open(path, "wb") as fh:
        fh.write(encode_index(index))


def load_index(path):
    with open(path, "rb") as fh:
        return decode_index(fh.read())
