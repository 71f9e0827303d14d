"""Train and test paths over an artifact directory.

Each stage reads its inputs from disk and writes its outputs atomically. A
``manifest.json`` records the SHA-256 of every artifact, and rewriting a
stage invalidates the entries of the stages downstream of it. The test path
refuses to run unless all four core artifacts match the manifest.
"""

import hashlib
import json
import logging
import os
import tempfile
import warnings
from contextlib import contextmanager

import numpy as np
from filelock import FileLock, Timeout

from . import cohort as cohort_mod
from . import datagen, metrics, pdfcluster, significance, simrank, survnet
from .errors import ArtifactError, RSMError, StageError, StaleArtifactError

log = logging.getLogger("rsm")

MANIFEST = "manifest.json"
LOCK = ".rsm.lock"
FILES = {
    "model": "model.rsmn",
    "significance": "report.json",
    "clusters": "clusters.json",
    "index": "index.rsmi",
    "train_cohort": "train.rsmc",
    "test_cohort": "test.csv",
    "pdfs": "pdfs.bin",
    "cohort": "cohort.csv",
    "truth": "truth.json",
}
CORE = ("model", "significance", "clusters", "index")
STAGES = ("train", "significance", "cluster", "index")
STAGE_OUTPUTS = {
    "train": ("model", "train_cohort", "test_cohort", "pdfs"),
    "significance": ("significance",),
    "cluster": ("clusters",),
    "index": ("index",),
}
DOWNSTREAM = {
    "train": ("significance", "cluster", "index"),
    "significance": ("index",),
    "cluster": ("index",),
    "index": (),
}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path, data):
    if isinstance(data, str):
        data = data.encode()
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ArtifactError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{what} is not valid JSON: {exc}") from None


class ArtifactDir:
    """An output directory holding artifacts and their manifest."""

    def __init__(self, root):
        self.root = os.fspath(root)

    def path(self, name):
        return os.path.join(self.root, FILES.get(name, name))

    def manifest(self):
        p = os.path.join(self.root, MANIFEST)
        if not os.path.exists(p):
            return {"artifacts": {}}
        return _read_json(p, "manifest")

    def _write_manifest(self, manifest):
        _atomic_write(os.path.join(self.root, MANIFEST), dump_json(manifest))

    def record(self, names, invalidate=()):
        m = self.manifest()
        arts = m.setdefault("artifacts", {})
        for stage in invalidate:
            for name in STAGE_OUTPUTS[stage]:
                arts.pop(name, None)
        for name in names:
            arts[name] = {"file": FILES[name], "sha256": sha256_file(self.path(name))}
        self._write_manifest(m)

    def forget(self, names):
        p = os.path.join(self.root, MANIFEST)
        if not os.path.exists(p):
            return
        m = self.manifest()
        for name in names:
            m.get("artifacts", {}).pop(name, None)
        self._write_manifest(m)

    def verify(self, names=CORE):
        """Raise :class:`StaleArtifactError` unless every named artifact matches the manifest."""
        arts = self.manifest().get("artifacts", {})
        for name in names:
            entry = arts.get(name)
            path = self.path(name)
            if entry is None:
                raise StaleArtifactError(f"{FILES[name]} is not recorded in the manifest; "
                                         "rerun the train path")
            if not os.path.exists(path):
                raise StaleArtifactError(f"{FILES[name]} is missing from {self.root}")
            if sha256_file(path) != entry["sha256"]:
                raise StaleArtifactError(f"{FILES[name]} does not match its manifest hash")

    @contextmanager
    def lock(self):
        os.makedirs(self.root, exist_ok=True)
        lock = FileLock(os.path.join(self.root, LOCK), timeout=0)
        try:
            lock.acquire()
        except Timeout:
            raise ArtifactError(f"{self.root} is locked by another rsm process") from None
        try:
            yield self
        finally:
            lock.release()


# --------------------------------------------------------------------------
# stages (file in, file out)


def generate_cohort(config, path, truth_path=None):
    draw = datagen.simulate(config)
    cohort_mod.save_cohort(draw.cohort, path)
    if truth_path is not None:
        _atomic_write(truth_path, dump_json(draw.truth()))
    return draw


def train_stage(cohort_path, out, config):
    """Split, standardize on the training part, train, and predict training PDFs."""
    raw = cohort_mod.load_cohort(cohort_path)
    tr, te = cohort_mod.split(raw, (config.split.train_fraction, 1 - config.split.train_fraction),
                              seed=config.seed_for("split"))
    z = cohort_mod.standardize_and_impute(
        tr, append_missing_indicators=config.split.append_missing_indicators)
    log.info("training on %d records (%d features), holding out %d", len(tr),
             z.n_features, len(te))
    net = survnet.train(z, config.train)
    mass = survnet.predict_mass(net, z.features)
    _atomic_write(out.path("train_cohort"), cohort_mod.encode_cohort(tr))
    _atomic_write(out.path("test_cohort"), cohort_mod.cohort_to_csv(te))
    _atomic_write(out.path("pdfs"), survnet.encode_pdfs(tr.ids, mass, net.bin_edges))
    _atomic_write(out.path("model"), survnet.encode_model(net))
    log.info("best epoch %d of %d", net.history.best_epoch + 1, config.train.epochs)
    return net


def significance_stage(model_path, report_path, sig_config):
    net = survnet.load_model(model_path)
    report = significance.select_significant(net.gate, alpha=sig_config.alpha,
                                             step=sig_config.step,
                                             top_fraction=sig_config.top_fraction)
    _atomic_write(report_path, dump_json(report.to_dict(net.feature_names)))
    return report


def load_report(path):
    return significance.SignificanceReport.from_dict(_read_json(path, "significance report"))


def cluster_stage(pdfs_path, clusters_path, k_max=10, seed=0):
    ids, mass, edges = survnet.load_pdfs(pdfs_path)
    stats = pdfcluster.stats_matrix_from_mass(mass, edges)
    model = pdfcluster.fit_clusters(stats, k_max=k_max, seed=seed, ids=ids)
    _atomic_write(clusters_path, dump_json(model.to_dict()))
    log.info("elbow picked k=%d", model.k)
    return model


def load_clusters(path):
    return pdfcluster.ClusterModel.from_dict(_read_json(path, "cluster model"))


def index_stage(model_path, train_path, report_path, clusters_path, pdfs_path, index_path,
                rank_config, seed=0):
    """Fit the projection basis on the most significant features and index the training set."""
    net = survnet.load_model(model_path)
    report = load_report(report_path)
    clusters = load_clusters(clusters_path)
    ids, mass, edges = survnet.load_pdfs(pdfs_path)
    train = survnet.prepare(net, cohort_mod.load_cohort(train_path))
    if not np.array_equal(ids, train.ids):
        raise ArtifactError("PDF file and training cohort list different patients")
    if not np.array_equal(edges, net.bin_edges):
        raise ArtifactError("PDF file was produced by a different model")
    subset = tuple(sorted(report.most_significant))
    basis = simrank.fit_basis(train.features[:, subset], rank_config.method,
                              cutoff=rank_config.cutoff, bandwidth=rank_config.bandwidth,
                              feature_subset=subset, seed=seed)
    index = simrank.build_index(train, clusters, basis, mass, edges, feature_subset=subset,
                                method=rank_config.method)
    _atomic_write(index_path, simrank.encode_index(index))
    return index


def rebuild_index(index, method, cutoff=0.95, bandwidth=None, seed=0):
    """Same patients and clusters, different projection method."""
    if method == index.method:
        return index
    basis = simrank.fit_basis(index.features, method, cutoff=cutoff, bandwidth=bandwidth,
                              feature_subset=index.feature_subset, seed=seed)
    sc = simrank.scores(basis, index.features) if basis is not None else np.zeros(len(index))
    return simrank.SimilarityIndex(
        method=method, basis=basis, cluster_model=index.cluster_model,
        feature_subset=index.feature_subset, feature_names=index.feature_names,
        ids=index.ids, clusters=index.clusters, scores=sc, features=index.features,
        raw_features=index.raw_features, pdf_mass=index.pdf_mass, bin_edges=index.bin_edges)


# --------------------------------------------------------------------------
# paths


def _run_stage(out, stage, config):
    if stage == "train":
        train_stage(_cohort_source(out, config), out, config)
    elif stage == "significance":
        significance_stage(out.path("model"), out.path("significance"), config.significance)
    elif stage == "cluster":
        cluster_stage(out.path("pdfs"), out.path("clusters"), config.cluster.k_max,
                      config.seed_for("cluster"))
    elif stage == "index":
        index_stage(out.path("model"), out.path("train_cohort"), out.path("significance"),
                    out.path("clusters"), out.path("pdfs"), out.path("index"), config.rank,
                    seed=config.seed_for("rank"))
    else:
        raise ValueError(f"unknown stage {stage!r}")


def _cohort_source(out, config):
    if config.paths.cohort is not None:
        return config.paths.cohort
    path = out.path("cohort")
    if not os.path.exists(path):
        generate_cohort(config.datagen, path, out.path("truth"))
    return path


def run_stage(out_dir, stage, config):
    """Run one stage under the directory lock and update the manifest."""
    out = ArtifactDir(out_dir)
    with out.lock():
        _run_guarded(out, stage, config)
    return out


def _run_guarded(out, stage, config):
    outputs = STAGE_OUTPUTS[stage]
    try:
        _run_stage(out, stage, config)
    except Exception as exc:
        _remove(out, outputs)
        out.forget(outputs)
        if isinstance(exc, StageError):
            raise
        if isinstance(exc, (RSMError, ValueError, OSError, KeyError)):
            raise StageError(stage, exc) from exc
        raise
    invalidate = DOWNSTREAM[stage]
    out.record(outputs, invalidate=invalidate)


def _remove(out, names):
    for name in names:
        p = out.path(name)
        if os.path.exists(p):
            os.remove(p)


def run_train_path(config, out_dir=None, stages=STAGES):
    """Run the train path; returns the manifest. A failing stage raises
    :class:`StageError` naming it, after removing everything this run wrote."""
    out = ArtifactDir(out_dir or config.paths.out_dir)
    written = []
    with out.lock():
        for stage in stages:
            try:
                _run_guarded(out, stage, config)
            except StageError:
                for prev in written:
                    _remove(out, STAGE_OUTPUTS[prev])
                out.forget([n for prev in written for n in STAGE_OUTPUTS[prev]])
                raise
            written.append(stage)
        return out.manifest()


def load_query(path):
    """Query patients from CSV; the outcome columns are optional."""
    return cohort_mod.load_cohort(path, cohort_mod.CohortSchema(require_outcome=False))


def run_test_path(config, query, out_dir=None, k=None, method=None, write=True):
    """Explain each query patient (a raw :class:`Cohort`) against the training index.

    Returns a list of :class:`~rsm.simrank.ExplanationResult`; with ``write``
    also stores ``explanation.json`` and ``explanation.txt`` in the directory.
    """
    out = ArtifactDir(out_dir or config.paths.out_dir)
    out.verify(CORE)
    net = survnet.load_model(out.path("model"))
    index = simrank.load_index(out.path("index"))
    index = rebuild_index(index, method or config.rank.method, config.rank.cutoff,
                          config.rank.bandwidth, config.seed_for("rank"))
    if isinstance(query, cohort_mod.PatientRecord):
        query = cohort_mod.Cohort.from_records([query], net.feature_names[:query.features.shape[0]])
    z = survnet.prepare(net, query)
    mass = survnet.predict_mass(net, z.features)
    k = k or config.rank.k
    results = []
    for i in range(len(z)):
        results.append(simrank.query_similar(index, z.features[i], mass[i], k=k,
                                             query_id=int(z.ids[i]),
                                             window=config.rank.window))
    if write:
        with out.lock():
            _atomic_write(out.path("explanation.json"),
                          dump_json([r.to_dict() for r in results]))
            _atomic_write(out.path("explanation.txt"),
                          "\n\n".join(r.table() for r in results) + "\n")
    return results


def evaluate_model(model_path, cohort_path, n_bootstrap=0, seed=0):
    net = survnet.load_model(model_path)
    c = survnet.prepare(net, cohort_mod.load_cohort(cohort_path))
    mass = survnet.predict_mass(net, c.features)
    report = metrics.evaluate(mass, (c.event_time, c.censored), net.bin_edges)
    if n_bootstrap:
        iv = metrics.bootstrap_intervals(mass, (c.event_time, c.censored), net.bin_edges,
                                         n_resamples=n_bootstrap, seed=seed)
        report = metrics.EvalReport(rows=report.rows, intervals=iv)
    return report


# --------------------------------------------------------------------------
# plot data


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else (repr(float(v)) if isinstance(v, float)
                                                    else str(v)) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def emit_plot_data(out_dir, config=None, n_queries=200, n_scatter=5, bins=50):
    """Write plotting series (CSV) under ``<out_dir>/plots``; returns the file paths."""
    from .config import PipelineConfig

    config = config or PipelineConfig()
    out = ArtifactDir(out_dir)
    plots = os.path.join(out.root, "plots")
    os.makedirs(plots, exist_ok=True)
    written = {}

    tr = cohort_mod.load_cohort(out.path("train_cohort"))
    te = cohort_mod.load_cohort(out.path("test_cohort"))
    times = np.concatenate([tr.event_time, te.event_time])
    counts, edges = np.histogram(times, bins=bins)
    p = os.path.join(plots, "event_time_histogram.csv")
    _write_csv(p, ["bin_left", "bin_right", "count"],
               [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)])
    written["event_time_histogram"] = p

    clusters = load_clusters(out.path("clusters"))
    p = os.path.join(plots, "inertia_curve.csv")
    _write_csv(p, ["k", "inertia", "selected"],
               [(k, float(v), int(k == clusters.k)) for k, v in clusters.inertia_curve])
    written["inertia_curve"] = p

    report = load_report(out.path("significance"))
    net = survnet.load_model(out.path("model"))
    names = net.feature_names or tuple(f"f{i}" for i in range(net.n_features))
    most, least = set(report.most_significant), set(report.least_significant)
    rows = []
    for r, j in enumerate(report.ranking, start=1):
        group = "most" if j in most else ("least" if j in least else "other")
        rows.append((r, int(j), names[j], float(abs(report.weights[j])),
                     float(report.weights[j]), group))
    p = os.path.join(plots, "gate_magnitudes.csv")
    _write_csv(p, ["rank", "feature_index", "feature", "abs_weight", "weight", "group"], rows)
    written["gate_magnitudes"] = p

    index = simrank.load_index(out.path("index"))
    zt = survnet.prepare(net, te)
    sel = np.arange(min(n_queries, len(zt)))
    mass = survnet.predict_mass(net, zt.features[sel])
    scatter, errors = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i, pos in enumerate(sel):
            res = simrank.query_similar(index, zt.features[pos], mass[i], k=config.rank.k,
                                        query_id=int(zt.ids[pos]), window=config.rank.window)
            qx = zt.features[pos, list(index.feature_subset)]
            members = index.cluster_positions(res.cluster)
            d = ((index.features[members] - qx) ** 2).sum(axis=1)
            true_nn = members[np.lexsort((index.ids[members], d))[0]]
            top = res.neighbors[0] if res.neighbors else None
            if index.basis is not None:
                qs = res.query_score
                errors.append((int(zt.ids[pos]), res.cluster,
                               top.score_difference if top else None,
                               float(abs(index.scores[true_nn] - qs)),
                               int(top.patient_id == index.ids[true_nn]) if top else 0))
                if i < n_scatter:
                    qc = simrank.project(index.basis, qx[None, :])[0]
                    nb_pos = [int(np.flatnonzero(index.ids == nb.patient_id)[0])
                              for nb in res.neighbors]
                    nc = simrank.project(index.basis, index.features[nb_pos]) if nb_pos \
                        else np.zeros((0, qc.shape[0]))
                    scatter.append((int(zt.ids[pos]), "query", int(zt.ids[pos]),
                                    float(qc[0]), float(qc[1]) if qc.shape[0] > 1 else None))
                    for nb, c in zip(res.neighbors, nc):
                        scatter.append((int(zt.ids[pos]), "neighbor", nb.patient_id,
                                        float(c[0]), float(c[1]) if c.shape[0] > 1 else None))
    p = os.path.join(plots, "component_scatter.csv")
    _write_csv(p, ["query_id", "role", "patient_id", "pc1", "pc2"], scatter)
    written["component_scatter"] = p
    p = os.path.join(plots, "score_errors.csv")
    _write_csv(p, ["query_id", "cluster", "top_score_error", "euclidean_nn_score_error",
                   "top_is_euclidean_nn"], errors)
    written["score_errors"] = p
    vals = np.array([e[3] for e in errors], dtype=float)
    counts, edges = np.histogram(vals, bins=min(bins, 30)) if vals.size else ([], [0.0])
    p = os.path.join(plots, "score_error_histogram.csv")
    _write_csv(p, ["bin_left", "bin_right", "count"],
               [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)])
    written["score_error_histogram"] = p
    _atomic_write(os.path.join(plots, "index.json"),
                  dump_json({k: os.path.basename(v) for k, v in written.items()}))
    return written
