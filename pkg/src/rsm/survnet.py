"""Discrete-time survival network with a trainable per-feature significance gate.

The input passes through a one-to-one layer ``E = gate * x`` (one weight per
feature, no bias, no activation), then dense ReLU layers and a softmax over
``T`` time bins. Training minimises the mean discrete-time negative
log-likelihood plus ``(lam / M) * sum(|gate|)``.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _binary
from .cohort import Standardization
from .errors import (
    BinningError,
    DataQualityWarning,
    DivergenceError,
    ShapeError,
)

MODEL_MAGIC = b"RSMN"
MODEL_VERSION = 1
PDFS_MAGIC = b"RSMP"
PDFS_VERSION = 1
LOG_FLOOR = math.log(1e-12)


@dataclass(frozen=True, eq=False)
class SurvivalPDF:
    mass: np.ndarray
    bin_edges: np.ndarray

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=float)
        edges = np.asarray(self.bin_edges, dtype=float)
        if edges.shape != (mass.shape[0] + 1,):
            raise ShapeError("bin_edges must have one more entry than mass")
        if np.any(mass < 0) or abs(mass.sum() - 1.0) > 1e-9:
            raise ValueError("mass must be non-negative and sum to 1")
        if np.any(np.diff(edges) <= 0) or edges[0] < 0:
            raise ValueError("bin_edges must be non-negative and strictly increasing")
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "bin_edges", edges)

    @property
    def midpoints(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def n_bins(self):
        return self.mass.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.01
    time_bins: int = 64
    hidden_sizes: tuple = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.time_bins < 2:
            raise ValueError("time_bins must be at least 2")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    empty_tail_records: int = 0


class GatedNetwork:
    """Gate weights plus dense layers; ``weights[i]`` has shape (fan_in, fan_out)."""

    def __init__(self, gate, weights, biases, bin_edges, standardization=None,
                 feature_names=None):
        self.gate = np.asarray(gate, dtype=float)
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.bin_edges = np.asarray(bin_edges, dtype=float)
        self.standardization = standardization
        self.feature_names = tuple(feature_names) if feature_names is not None else None
        self.history = None
        m = self.gate.shape[0]
        if self.weights[0].shape[0] != m:
            raise ShapeError("first layer fan-in must equal the gate size")
        if self.weights[-1].shape[1] != self.bin_edges.shape[0] - 1:
            raise ShapeError("output layer width must equal the number of time bins")

    @property
    def n_features(self):
        return self.gate.shape[0]

    @property
    def n_bins(self):
        return self.bin_edges.shape[0] - 1

    @property
    def hidden_sizes(self):
        return tuple(w.shape[1] for w in self.weights[:-1])

    def params(self):
        """All trainable arrays (theta): gate, then (W, b) per layer."""
        out = [self.gate]
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_names(self):
        names = ["gate"]
        for i in range(len(self.weights)):
            names += [f"W{i}", f"b{i}"]
        return names

    def set_params(self, params):
        self.gate = params[0]
        self.weights = list(params[1::2])
        self.biases = list(params[2::2])

    def copy(self):
        net = GatedNetwork(self.gate.copy(), [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.bin_edges.copy(),
                           self.standardization, self.feature_names)
        net.history = self.history
        return net


def init_network(n_features, bin_edges, hidden_sizes=(64, 64), seed=0,
                 standardization=None, feature_names=None):
    """Identity gate, Glorot-uniform dense weights, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [n_features, *hidden_sizes, len(bin_edges) - 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return GatedNetwork(np.ones(n_features), weights, biases, bin_edges,
                        standardization, feature_names)


# --------------------------------------------------------------------------
# time bins


def build_bins(times, T):
    """Equal-frequency bin edges over ``times``: first edge 0, last ``1.01 * max``."""
    times = np.asarray(times, dtype=float)
    if T < 2:
        raise BinningError("need at least 2 time bins")
    if np.unique(times).size < T:
        raise BinningError(f"need at least {T} distinct times, got {np.unique(times).size}")
    inner = np.quantile(times, np.arange(1, T) / T)
    edges = np.concatenate([[0.0], inner, [times.max() * 1.01]])
    if np.any(np.diff(edges) <= 0):
        raise BinningError("quantile edges are not strictly increasing (too many tied times)")
    return edges


def bin_index(bin_edges, times):
    T = len(bin_edges) - 1
    idx = np.searchsorted(bin_edges, times, side="right") - 1
    return np.clip(idx, 0, T - 1)


# --------------------------------------------------------------------------
# forward / loss / gradients


def _check_features(net, x):
    if x.shape[-1] != net.n_features:
        raise ShapeError(f"expected {net.n_features} features, got {x.shape[-1]}")


def _forward(net, x):
    acts = [x * net.gate]
    pre = []
    h = acts[0]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if i < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            logits = z
    return logits, acts, pre


def _log_softmax(logits):
    mx = logits.max(axis=1, keepdims=True)
    return logits - (mx + np.log(np.exp(logits - mx).sum(axis=1, keepdims=True)))


def predict_mass(net, x):
    """Row-wise survival mass for a standardized (n, M) feature matrix."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _check_features(net, x)
    logits, _, _ = _forward(net, x)
    p = np.exp(_log_softmax(logits))
    return p / p.sum(axis=1, keepdims=True)


def forward(net, features):
    features = np.asarray(features, dtype=float)
    if features.ndim != 1:
        raise ShapeError("forward expects a single feature vector")
    return SurvivalPDF(predict_mass(net, features)[0], net.bin_edges)


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    bins: np.ndarray
    censored: np.ndarray

    def __len__(self):
        return self.features.shape[0]


def make_batch(features, times, censored, bin_edges):
    return Batch(np.asarray(features, dtype=float), bin_index(bin_edges, times),
                 np.asarray(censored, dtype=bool))


def _record_terms(net, batch):
    """Per-record log-likelihood terms and their gradient w.r.t. the logits."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    T = net.n_bins
    if np.any(batch.bins < 0) or np.any(batch.bins >= T):
        raise ValueError("bin index out of range")
    _check_features(net, batch.features)
    logits, acts, pre = _forward(net, batch.features)
    logp = _log_softmax(logits)
    p = np.exp(logp)
    rows = np.arange(len(batch))

    tail = np.arange(T)[None, :] > batch.bins[:, None]
    masked = np.where(tail, logp, -np.inf)
    tmax = masked.max(axis=1, keepdims=True)
    empty = ~tail.any(axis=1)
    safe_max = np.where(empty[:, None], 0.0, tmax)
    with np.errstate(divide="ignore"):
        log_tail = (safe_max + np.log(np.exp(masked - safe_max).sum(axis=1, keepdims=True)))[:, 0]
    log_tail[empty] = -np.inf

    ll = np.where(batch.censored, log_tail, logp[rows, batch.bins])
    floored = ll < LOG_FLOOR
    ll = np.maximum(ll, LOG_FLOOR)

    dlogits = p.copy()
    unc = ~batch.censored
    dlogits[rows[unc], batch.bins[unc]] -= 1.0
    cen = batch.censored & ~empty
    if np.any(cen):
        tail_soft = np.where(tail[cen], np.exp(logp[cen] - log_tail[cen, None]), 0.0)
        dlogits[cen] -= tail_soft
    dlogits[floored] = 0.0
    n_empty = int(np.sum(batch.censored & empty))
    return -ll, dlogits, acts, pre, n_empty


def _penalty(net, lam):
    return lam / net.n_features * float(np.abs(net.gate).sum())


def base_loss(net, batch):
    nll, *_ = _record_terms(net, batch)
    return float(nll.mean())


def loss(net, batch, lam):
    """Mean discrete-time NLL over the batch plus the L1 gate penalty."""
    nll, _, _, _, n_empty = _record_terms(net, batch)
    if n_empty:
        warnings.warn(f"{n_empty} censored record(s) fall in the last bin; their survival "
                      "tail is empty", DataQualityWarning, stacklevel=2)
    return float(nll.mean()) + _penalty(net, lam)


def gradients(net, batch, lam):
    """Exact gradients of :func:`loss`, in the order of ``net.params()``.

    The L1 subgradient uses ``sign(0) = 0``.
    """
    grads, _, _ = _loss_and_grads(net, batch, lam)
    return grads


def _loss_and_grads(net, batch, lam):
    nll, dlogits, acts, pre, n_empty = _record_terms(net, batch)
    B = len(batch)
    delta = dlogits / B
    gw, gb = [None] * len(net.weights), [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
        if i > 0:
            delta = delta * (pre[i - 1] > 0)
    ggate = (delta * batch.features).sum(axis=0) + lam / net.n_features * np.sign(net.gate)
    grads = [ggate]
    for w, b in zip(gw, gb):
        grads += [w, b]
    value = float(nll.mean()) + _penalty(net, lam)
    return grads, value, n_empty


# --------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


def _require_imputed(cohort):
    if np.any(np.isnan(cohort.features)):
        raise ValueError("cohort contains missing values; standardize and impute first")


def train(cohort, config=None):
    """Fit a gated network on a standardized, imputed cohort.

    A seeded 10% validation split picks the epoch whose parameters are
    returned. ``net.history`` records per-epoch training and validation loss.
    """
    config = config or TrainConfig()
    _require_imputed(cohort)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    if threadpool_limits is None:  # pragma: no cover
        return _train(cohort, config)
    with threadpool_limits(limits=1):
        return _train(cohort, config)


def _train(cohort, config):
    rng = np.random.default_rng(config.seed)
    n = len(cohort)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    if n - n_val < 1:
        raise ValueError("cohort too small for a validation split")
    val_idx, fit_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])

    edges = build_bins(cohort.event_time[fit_idx], config.time_bins)
    net = init_network(cohort.n_features, edges, config.hidden_sizes,
                       seed=int(rng.integers(2**63)),
                       standardization=cohort.standardization,
                       feature_names=cohort.feature_names)
    x = cohort.features
    fit = make_batch(x[fit_idx], cohort.event_time[fit_idx], cohort.censored[fit_idx], edges)
    val = make_batch(x[val_idx], cohort.event_time[val_idx], cohort.censored[val_idx], edges)

    history = TrainHistory()
    opt = Adam(net.params(), config.learning_rate)
    best, best_val = None, math.inf
    n_fit = len(fit)
    # overflow surfaces as a non-finite loss and a DivergenceError below
    with warnings.catch_warnings(), np.errstate(over="ignore", invalid="ignore"):
        warnings.simplefilter("ignore", DataQualityWarning)
        history.empty_tail_records = _record_terms(net, fit)[4]
        for epoch in range(config.epochs):
            order = rng.permutation(n_fit)
            for start in range(0, n_fit, config.batch_size):
                idx = order[start:start + config.batch_size]
                mb = Batch(fit.features[idx], fit.bins[idx], fit.censored[idx])
                grads, value, _ = _loss_and_grads(net, mb, config.lam)
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch} "
                                          f"(learning rate {config.learning_rate})")
                net.set_params(opt.step(net.params(), grads))
            tr = loss(net, fit, config.lam)
            va = loss(net, val, config.lam)
            if not (math.isfinite(tr) and math.isfinite(va)):
                raise DivergenceError(f"non-finite loss at epoch {epoch} "
                                      f"(learning rate {config.learning_rate})")
            history.train_loss.append(tr)
            history.val_loss.append(va)
            if va < best_val:
                best_val, best = va, [p.copy() for p in net.params()]
                history.best_epoch = epoch
    net.set_params(best)
    net.history = history
    return net


def predict(net, cohort):
    """One :class:`SurvivalPDF` per record, in cohort order."""
    _require_imputed(cohort)
    if cohort.n_features != net.n_features:
        raise ShapeError(f"cohort has {cohort.n_features} features, model expects "
                         f"{net.n_features}")
    return [SurvivalPDF(row, net.bin_edges) for row in predict_mass(net, cohort.features)]


def prepare(net, cohort):
    """Standardize a raw cohort with the model's stored training transform."""
    from .cohort import apply_standardization

    if cohort.is_standardized:
        return cohort
    if net.standardization is None:
        raise ValueError("model has no stored standardization")
    return apply_standardization(cohort, net.standardization)


# --------------------------------------------------------------------------
# persistence


def encode_model(net):
    w = _binary.Writer(MODEL_MAGIC, MODEL_VERSION)
    w.u32(net.n_features)
    w.u32(net.n_bins)
    w.array(net.bin_edges)
    st = net.standardization
    w.u8(st is not None)
    if st is not None:
        w.u8(st.append_missing_indicators)
        w.array(st.mean)
        w.array(st.scale)
    w.texts(list(net.feature_names or ()))
    w.u32(len(net.weights))
    for wt, b in zip(net.weights, net.biases):
        w.array(wt)
        w.array(b)
    w.array(net.gate)
    return w.getvalue()


def decode_model(data):
    r = _binary.Reader(data, MODEL_MAGIC, (MODEL_VERSION,), what="model")
    m = r.u32()
    T = r.u32()
    edges = r.array()
    st = None
    if r.u8():
        append = bool(r.u8())
        st = Standardization(mean=r.array(), scale=r.array(), append_missing_indicators=append)
    names = r.texts() or None
    n_layers = r.u32()
    weights, biases = [], []
    for _ in range(n_layers):
        weights.append(r.array())
        biases.append(r.array())
    gate = r.array()
    if gate.shape != (m,) or edges.shape != (T + 1,):
        raise ShapeError("model file dimensions are inconsistent")
    return GatedNetwork(gate, weights, biases, edges, st, names)


def save_model(net, path):
    with open(path, "wb") as fh:
        fh.write(encode_model(net))


def load_model(path):
    with open(path, "rb") as fh:
        return decode_model(fh.read())


def encode_pdfs(ids, mass, bin_edges):
    w = _binary.Writer(PDFS_MAGIC, PDFS_VERSION)
    w.array(np.asarray(ids), "<i8")
    w.array(bin_edges)
    w.array(mass)
    return w.getvalue()


def decode_pdfs(data):
    r = _binary.Reader(data, PDFS_MAGIC, (PDFS_VERSION,), what="pdfs")
    ids = r.array("<i8")
    edges = r.array()
    mass = r.array()
    if mass.shape != (ids.shape[0], edges.shape[0] - 1):
        raise ShapeError("pdf file dimensions are inconsistent")
    return ids, mass, edges


def save_pdfs(path, ids, mass, bin_edges):
    with open(path, "wb") as fh:
        fh.write(encode_pdfs(ids, mass, bin_edges))


def load_pdfs(path):
    with open(path, "rb") as fh:
        return decode_pdfs(fh.read())
