"""Survival cohorts: records, CSV/binary ingestion, standardization, splitting.

A cohort is stored column-wise as numpy arrays. Missing cells hold ``NaN`` in
``features`` until :func:`standardize_and_impute` replaces them; ``observed``
keeps the original mask (True = observed) for downstream use.
"""

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _binary
from .errors import (
    ParseError,
    SchemaError,
    SplitError,
    UnimputableFeatureError,
    ValidationError,
)

COHORT_MAGIC = b"RSMC"
COHORT_VERSION = 1
NA_TOKENS = ("", "NA")


@dataclass(frozen=True, eq=False)
class PatientRecord:
    id: int
    features: np.ndarray
    missing_mask: np.ndarray  # True = observed
    event_time: float
    censored: bool


@dataclass(frozen=True, eq=False)
class Standardization:
    """Per-feature affine transform learned from a training subset."""

    mean: np.ndarray
    scale: np.ndarray
    append_missing_indicators: bool = False

    def __post_init__(self):
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.scale))):
            raise ValueError("standardization statistics must be finite")
        if np.any(self.scale <= 0):
            raise ValueError("standardization scale must be positive")

    def transform(self, features, observed):
        """Standardize observed values and fill missing ones with 0."""
        z = (features - self.mean) / self.scale
        z = np.where(observed, z, 0.0)
        if self.append_missing_indicators:
            z = np.hstack([z, observed.astype(float)])
        return z

    def inverse(self, z):
        m = self.mean.shape[0]
        return z[..., :m] * self.scale + self.mean


@dataclass(frozen=True)
class CohortSchema:
    id_column: str = "id"
    time_column: str = "event_time"
    censor_column: str = "censored"
    feature_columns: tuple = None  # None = every non-reserved column
    na_tokens: tuple = NA_TOKENS
    require_outcome: bool = True  # False: query files may omit time/censor columns


@dataclass(frozen=True, eq=False)
class Cohort:
    ids: np.ndarray
    features: np.ndarray
    observed: np.ndarray
    event_time: np.ndarray
    censored: np.ndarray
    feature_names: tuple
    standardization: Standardization = field(default=None)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        n = ids.shape[0]
        m = len(self.feature_names)
        feats = np.asarray(self.features, dtype=float).reshape(n, m)
        obs = np.asarray(self.observed, dtype=bool).reshape(n, m)
        times = np.asarray(self.event_time, dtype=float).reshape(n)
        cens = np.asarray(self.censored, dtype=bool).reshape(n)
        if len(np.unique(ids)) != n:
            raise ValidationError("patient ids must be unique")
        if not np.all(np.isfinite(times)) or np.any(times < 0):
            bad = int(np.flatnonzero(~np.isfinite(times) | (times < 0))[0])
            raise ValidationError(f"invalid event time for id {ids[bad]}", row=bad)
        for name, arr in (("ids", ids), ("features", feats), ("observed", obs),
                          ("event_time", times), ("censored", cens)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self):
        return self.ids.shape[0]

    @property
    def n_features(self):
        return len(self.feature_names)

    @property
    def is_standardized(self):
        return self.standardization is not None

    def record(self, i):
        return PatientRecord(
            id=int(self.ids[i]),
            features=self.features[i].copy(),
            missing_mask=self.observed[i].copy(),
            event_time=float(self.event_time[i]),
            censored=bool(self.censored[i]),
        )

    @property
    def records(self):
        return [self.record(i) for i in range(len(self))]

    def position(self, patient_id):
        hits = np.flatnonzero(self.ids == patient_id)
        if hits.size == 0:
            raise KeyError(f"unknown patient id {patient_id}")
        return int(hits[0])

    def subset(self, positions):
        positions = np.asarray(positions)
        return Cohort(
            ids=self.ids[positions],
            features=self.features[positions],
            observed=self.observed[positions],
            event_time=self.event_time[positions],
            censored=self.censored[positions],
            feature_names=self.feature_names,
            standardization=self.standardization,
        )

    def select_features(self, columns):
        columns = list(columns)
        return Cohort(
            ids=self.ids,
            features=self.features[:, columns],
            observed=self.observed[:, columns],
            event_time=self.event_time,
            censored=self.censored,
            feature_names=tuple(self.feature_names[c] for c in columns),
        )

    def equals(self, other):
        return (
            self.feature_names == other.feature_names
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.features, other.features, equal_nan=True)
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.event_time, other.event_time)
            and np.array_equal(self.censored, other.censored)
        )

    @classmethod
    def from_records(cls, records, feature_names):
        m = len(feature_names)
        n = len(records)
        feats = np.full((n, m), np.nan)
        obs = np.zeros((n, m), dtype=bool)
        for i, r in enumerate(records):
            if len(r.features) != m or len(r.missing_mask) != m:
                raise ValidationError(f"record {r.id} has wrong feature count", row=i)
            obs[i] = r.missing_mask
            feats[i] = np.where(r.missing_mask, r.features, np.nan)
        return cls(
            ids=[r.id for r in records],
            features=feats,
            observed=obs,
            event_time=[r.event_time for r in records],
            censored=[r.censored for r in records],
            feature_names=tuple(feature_names),
        )


# --------------------------------------------------------------------------
# ingestion


def load_cohort(path, schema=None):
    """Read a cohort from CSV or from the binary ``RSMC`` format.

    The format is detected from the file's leading bytes. In CSV, empty cells
    and ``NA`` mark missing values. Repeated ids are treated as longitudinal
    rows and reduced to the last observed value per feature.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if _binary.read_magic(path) == COHORT_MAGIC:
        with open(path, "rb") as fh:
            return decode_cohort(fh.read())
    return _load_csv(path, schema or CohortSchema())


def _load_csv(path, schema):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if schema.require_outcome:
            for required in (schema.time_column, schema.censor_column):
                if required not in header:
                    raise SchemaError(f"{path}: missing mandatory column '{required}'")
        reserved = {schema.id_column, schema.time_column, schema.censor_column}
        if schema.feature_columns is None:
            feature_cols = [h for h in header if h not in reserved]
        else:
            feature_cols = list(schema.feature_columns)
            absent = [c for c in feature_cols if c not in header]
            if absent:
                raise SchemaError(f"{path}: missing feature columns {absent}")
        if not feature_cols:
            raise SchemaError(f"{path}: no feature columns")
        col = {h: i for i, h in enumerate(header)}
        has_id = schema.id_column in col

        ids, times, cens, rows, masks = [], [], [], [], []
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"row {rownum}: expected {len(header)} cells, got {len(row)}",
                                 row=rownum)
            pid = _parse_int(row[col[schema.id_column]], rownum, schema.id_column) if has_id \
                else rownum - 1
            if schema.time_column in col:
                t = _parse_float(row[col[schema.time_column]], rownum, schema.time_column)
            else:
                t = 0.0
            if t < 0:
                raise ValidationError(f"row {rownum}: negative event time {t}", row=rownum)
            c = row[col[schema.censor_column]].strip() if schema.censor_column in col else "1"
            if c not in ("0", "1"):
                raise ParseError(f"row {rownum}, column '{schema.censor_column}': "
                                 f"expected 0 or 1, got {c!r}", row=rownum,
                                 column=schema.censor_column)
            values, mask = [], []
            for name in feature_cols:
                cell = row[col[name]].strip()
                if cell in schema.na_tokens:
                    values.append(math.nan)
                    mask.append(False)
                else:
                    values.append(_parse_float(cell, rownum, name))
                    mask.append(True)
            ids.append(pid)
            times.append(t)
            cens.append(c == "1")
            rows.append(values)
            masks.append(mask)

    feats = np.array(rows, dtype=float).reshape(len(rows), len(feature_cols))
    obs = np.array(masks, dtype=bool).reshape(len(rows), len(feature_cols))
    ids = np.array(ids, dtype=np.int64)
    times = np.array(times, dtype=float)
    cens = np.array(cens, dtype=bool)
    if len(np.unique(ids)) != len(ids):
        ids, feats, obs, times, cens = _reduce_longitudinal(ids, feats, obs, times, cens)
    return Cohort(ids=ids, features=feats, observed=obs, event_time=times,
                  censored=cens, feature_names=tuple(feature_cols))


def _parse_float(cell, row, column):
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"row {row}, column '{column}': not a number: {cell!r}",
                         row=row, column=column) from None
    if not math.isfinite(v):
        raise ParseError(f"row {row}, column '{column}': non-finite value {cell!r}",
                         row=row, column=column)
    return v


def _parse_int(cell, row, column):
    try:
        return int(cell)
    except ValueError:
        raise ParseError(f"row {row}, column '{column}': not an integer: {cell!r}",
                         row=row, column=column) from None


def _reduce_longitudinal(ids, feats, obs, times, cens):
    # rows are assumed chronological within an id
    order, seen = [], {}
    for i, pid in enumerate(ids):
        if pid not in seen:
            seen[pid] = len(order)
            order.append(pid)
    n, m = len(order), feats.shape[1]
    out_f = np.full((n, m), np.nan)
    out_o = np.zeros((n, m), dtype=bool)
    out_t = np.zeros(n)
    out_c = np.zeros(n, dtype=bool)
    for i, pid in enumerate(ids):
        k = seen[pid]
        out_f[k] = np.where(obs[i], feats[i], out_f[k])
        out_o[k] |= obs[i]
        out_t[k] = times[i]
        out_c[k] = cens[i]
    return np.array(order, dtype=np.int64), out_f, out_o, out_t, out_c


def save_cohort(cohort, path):
    """Write ``cohort`` as CSV (``.csv`` suffix) or binary ``RSMC`` otherwise."""
    if str(path).endswith(".csv"):
        with open(path, "w", newline="") as fh:
            fh.write(cohort_to_csv(cohort))
    else:
        with open(path, "wb") as fh:
            fh.write(encode_cohort(cohort))


def cohort_to_csv(cohort):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "event_time", "censored", *cohort.feature_names])
    for i in range(len(cohort)):
        cells = [repr(float(v)) if o else "NA"
                 for v, o in zip(cohort.features[i], cohort.observed[i])]
        w.writerow([int(cohort.ids[i]), repr(float(cohort.event_time[i])),
                    int(cohort.censored[i]), *cells])
    return buf.getvalue()


def encode_cohort(cohort):
    w = _binary.Writer(COHORT_MAGIC, COHORT_VERSION)
    w.u64(len(cohort))
    w.u32(cohort.n_features)
    w.texts(cohort.feature_names)
    w.array(cohort.ids, "<i8")
    w.array(cohort.event_time)
    w.array(cohort.censored, "u1")
    w.array(cohort.observed, "u1")
    w.array(cohort.features)
    st = cohort.standardization
    w.u8(st is not None)
    if st is not None:
        w.u8(st.append_missing_indicators)
        w.array(st.mean)
        w.array(st.scale)
    return w.getvalue()


def decode_cohort(data):
    r = _binary.Reader(data, COHORT_MAGIC, (COHORT_VERSION,), what="cohort")
    n = r.u64()
    m = r.u32()
    names = r.texts()
    ids = r.array("<i8")
    times = r.array()
    cens = r.array("u1").astype(bool)
    obs = r.array("u1").astype(bool)
    feats = r.array()
    st = None
    if r.u8():
        append = bool(r.u8())
        st = Standardization(mean=r.array(), scale=r.array(), append_missing_indicators=append)
    if len(names) != m or ids.shape != (n,) or feats.shape != (n, m):
        raise ValidationError("cohort file dimensions are inconsistent")
    return Cohort(ids=ids, features=feats, observed=obs, event_time=times,
                  censored=cens, feature_names=tuple(names), standardization=st)


# --------------------------------------------------------------------------
# preprocessing


def _positions(cohort, selector):
    if selector is None:
        return np.arange(len(cohort))
    sel = np.asarray(selector)
    if sel.dtype == bool:
        return np.flatnonzero(sel)
    return sel.astype(int)


def fit_standardization(cohort, fit_on=None, append_missing_indicators=False):
    pos = _positions(cohort, fit_on)
    if pos.size == 0:
        raise ValueError("fit_on selects no records")
    x = cohort.features[pos]
    o = cohort.observed[pos]
    counts = o.sum(axis=0)
    if np.any(counts == 0):
        names = [cohort.feature_names[j] for j in np.flatnonzero(counts == 0)]
        raise UnimputableFeatureError(f"features never observed in fit subset: {names}")
    filled = np.where(o, x, 0.0)
    mean = filled.sum(axis=0) / counts
    var = (np.where(o, x - mean, 0.0) ** 2).sum(axis=0) / counts
    sd = np.sqrt(var)
    sd[sd == 0] = 1.0
    return Standardization(mean=mean, scale=sd, append_missing_indicators=append_missing_indicators)


def apply_standardization(cohort, standardization):
    """Apply an already-fitted transform. Refuses cohorts that are already standardized."""
    if cohort.is_standardized:
        raise ValueError("cohort is already standardized; apply the transform to raw data only")
    m = standardization.mean.shape[0]
    if cohort.n_features != m:
        raise ValueError(f"cohort has {cohort.n_features} features, transform expects {m}")
    z = standardization.transform(cohort.features, cohort.observed)
    names = cohort.feature_names
    observed = cohort.observed
    if standardization.append_missing_indicators:
        names = names + tuple(f"{n}__observed" for n in names)
        observed = np.hstack([observed, np.ones_like(observed)])
    return Cohort(ids=cohort.ids, features=z, observed=observed,
                  event_time=cohort.event_time, censored=cohort.censored,
                  feature_names=names, standardization=standardization)


def standardize_and_impute(cohort, fit_on=None, append_missing_indicators=False):
    """Z-score every feature using statistics of the ``fit_on`` records.

    Population standard deviation is used; zero-variance features get scale 1.
    Missing cells become 0, i.e. the training mean.
    """
    st = fit_standardization(cohort, fit_on, append_missing_indicators)
    return apply_standardization(cohort, st)


def split(cohort, fractions=(0.8, 0.2), seed=0):
    """Stratified (by censoring) train/test partition, deterministic in ``seed``."""
    f_train, f_test = fractions
    if f_train <= 0 or f_test <= 0 or abs(f_train + f_test - 1.0) > 1e-9:
        raise SplitError(f"fractions must be positive and sum to 1, got {fractions}")
    n = len(cohort)
    strata = [np.flatnonzero(~cohort.censored), np.flatnonzero(cohort.censored)]
    target = round(f_train * n)
    ideal = [f_train * len(s) for s in strata]
    alloc = [math.floor(v) for v in ideal]
    # largest remainder keeps the overall train size exact
    for k in sorted(range(len(strata)), key=lambda k: ideal[k] - alloc[k], reverse=True):
        if sum(alloc) >= target:
            break
        alloc[k] += 1
    rng = np.random.default_rng(seed)
    train_pos, test_pos = [], []
    for s, k in zip(strata, alloc):
        if s.size == 0:
            continue
        if k < 1 or s.size - k < 1:
            raise SplitError(f"stratum of {s.size} records cannot put one record on each side")
        perm = rng.permutation(s)
        train_pos.append(perm[:k])
        test_pos.append(perm[k:])
    train_pos = np.sort(np.concatenate(train_pos)) if train_pos else np.array([], dtype=int)
    test_pos = np.sort(np.concatenate(test_pos)) if test_pos else np.array([], dtype=int)
    return cohort.subset(train_pos), cohort.subset(test_pos)
