import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from rsm.cohort import (Cohort, CohortSchema, PatientRecord, apply_standardization,
                        cohort_to_csv, load_cohort, save_cohort, split,
                        standardize_and_impute)
from rsm.errors import (ArtifactError, ParseError, SchemaError, SplitError,
                        UnimputableFeatureError, ValidationError)


def write(tmp_path, text, name="c.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def make_cohort(features, times=None, censored=None, ids=None):
    x = np.asarray(features, dtype=float)
    n = x.shape[0]
    return Cohort(
        ids=np.arange(n) if ids is None else np.asarray(ids),
        features=x,
        observed=~np.isnan(x),
        event_time=np.ones(n) if times is None else np.asarray(times, dtype=float),
        censored=np.zeros(n, bool) if censored is None else np.asarray(censored, bool),
        feature_names=tuple(f"f{j}" for j in range(x.shape[1])),
    )


class TestLoad:
    def test_one_empty_cell(self, tmp_path):
        p = write(tmp_path, "id,event_time,censored,a,b\n1,2.0,0,1.5,\n2,3.0,1,2,4\n3,1,0,NA,5\n")
        c = load_cohort(p)
        assert len(c) == 3
        assert c.feature_names == ("a", "b")
        assert (~c.observed).sum() == 2  # one empty cell plus one NA token
        p = write(tmp_path, "id,event_time,censored,a,b\n1,2.0,0,1.5,\n2,3.0,1,2,4\n3,1,0,7,5\n")
        c = load_cohort(p)
        assert (~c.observed).sum() == 1
        assert not c.observed[0, 1]
        assert_array_equal(c.ids, [1, 2, 3])  # row order preserved
        assert_array_equal(c.censored, [False, True, False])

    def test_negative_time_names_row(self, tmp_path):
        p = write(tmp_path, "id,event_time,censored,a\n1,2.0,0,1\n2,-1,0,1\n")
        with pytest.raises(ValidationError) as err:
            load_cohort(p)
        assert err.value.row == 2
        assert "row 2" in str(err.value)

    def test_missing_mandatory_column(self, tmp_path):
        p = write(tmp_path, "id,censored,a\n1,0,1\n")
        with pytest.raises(SchemaError, match="event_time"):
            load_cohort(p)

    def test_non_numeric_cell(self, tmp_path):
        p = write(tmp_path, "id,event_time,censored,a,b\n1,2.0,0,1,x\n")
        with pytest.raises(ParseError) as err:
            load_cohort(p)
        assert (err.value.row, err.value.column) == (1, "b")

    def test_bad_censor_flag(self, tmp_path):
        p = write(tmp_path, "id,event_time,censored,a\n1,2.0,yes,1\n")
        with pytest.raises(ParseError):
            load_cohort(p)

    def test_no_feature_columns(self, tmp_path):
        p = write(tmp_path, "id,event_time,censored\n1,2.0,0\n")
        with pytest.raises(SchemaError):
            load_cohort(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cohort(tmp_path / "nope.csv")

    def test_ids_default_to_row_index(self, tmp_path):
        p = write(tmp_path, "event_time,censored,a\n2.0,0,1\n3.0,1,2\n")
        assert_array_equal(load_cohort(p).ids, [0, 1])

    def test_repeated_ids_keep_last_observed(self, tmp_path):
        p = write(tmp_path, "id,event_time,censored,a,b\n"
                            "7,1.0,0,1,10\n8,5,1,3,\n7,2.0,1,,20\n")
        c = load_cohort(p)
        assert_array_equal(c.ids, [7, 8])
        i = c.position(7)
        assert_allclose(c.features[i], [1, 20])
        assert c.event_time[i] == 2.0 and c.censored[i]

    def test_outcome_optional_for_queries(self, tmp_path):
        p = write(tmp_path, "id,a,b\n4,1,2\n")
        with pytest.raises(SchemaError):
            load_cohort(p)
        c = load_cohort(p, CohortSchema(require_outcome=False))
        assert_array_equal(c.features, [[1, 2]])


class TestCohortType:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            make_cohort([[1.0], [2.0]], ids=[1, 1])

    def test_negative_or_infinite_time_rejected(self):
        with pytest.raises(ValueError):
            make_cohort([[1.0]], times=[-0.5])
        with pytest.raises(ValueError):
            make_cohort([[1.0]], times=[np.inf])

    def test_immutable(self):
        c = make_cohort([[1.0, 2.0]])
        with pytest.raises(ValueError):
            c.features[0, 0] = 3.0

    def test_records_roundtrip(self):
        c = make_cohort([[1.0, np.nan], [3.0, 4.0]], times=[1, 2], censored=[0, 1])
        recs = c.records
        assert isinstance(recs[0], PatientRecord)
        assert recs[0].missing_mask.tolist() == [True, False]
        assert Cohort.from_records(recs, c.feature_names).equals(c)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False)


@st.composite
def cohorts(draw):
    n = draw(st.integers(1, 12))
    m = draw(st.integers(1, 4))
    vals = draw(st.lists(st.one_of(finite, st.just(np.nan)), min_size=n * m, max_size=n * m))
    times = draw(st.lists(st.floats(0, 1e6, allow_subnormal=False), min_size=n, max_size=n))
    cens = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    ids = draw(st.lists(st.integers(-10**9, 10**9), min_size=n, max_size=n, unique=True))
    return make_cohort(np.array(vals).reshape(n, m), times, cens, ids)


@settings(max_examples=40, deadline=None)
@given(cohorts())
def test_save_load_roundtrip(tmp_path_factory, c):
    d = tmp_path_factory.mktemp("rt")
    for name in ("c.csv", "c.rsmc"):
        save_cohort(c, d / name)
        assert load_cohort(d / name).equals(c)


def test_binary_corruption_detected(tmp_path):
    c = make_cohort([[1.0, 2.0], [3.0, np.nan]])
    p = tmp_path / "c.rsmc"
    save_cohort(c, p)
    data = bytearray(p.read_bytes())
    data[-12] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(ArtifactError):
        load_cohort(p)
    p.write_bytes(bytes(data[:10]))
    with pytest.raises(ArtifactError):
        load_cohort(p)


def test_csv_text_uses_na_for_missing():
    text = cohort_to_csv(make_cohort([[1.0, np.nan]]))
    assert text.splitlines()[1].endswith(",NA")


class TestStandardize:
    def test_population_sd(self):
        c = make_cohort([[2.0], [4.0], [np.nan]])
        z = standardize_and_impute(c)
        assert_allclose(z.features[:, 0], [-1.0, 1.0, 0.0])
        assert_array_equal(z.observed[:, 0], [True, True, False])
        assert z.standardization.scale[0] == 1.0 and z.standardization.mean[0] == 3.0

    def test_all_observed_mask_untouched(self, rng):
        c = make_cohort(rng.normal(size=(20, 3)))
        z = standardize_and_impute(c)
        assert z.observed.all()
        assert_allclose(z.features.mean(axis=0), 0, atol=1e-12)
        assert_allclose(z.features.std(axis=0), 1, atol=1e-12)

    def test_constant_feature(self):
        z = standardize_and_impute(make_cohort([[5.0, 1], [5.0, 2], [5.0, 3]]))
        assert_array_equal(z.features[:, 0], 0.0)
        assert z.standardization.scale[0] == 1.0

    def test_fit_subset_only(self):
        c = make_cohort([[0.0], [2.0], [100.0]])
        z = standardize_and_impute(c, fit_on=[0, 1])
        assert_allclose(z.features[:, 0], [-1, 1, 99])

    def test_unimputable(self):
        c = make_cohort([[np.nan, 1.0], [np.nan, 2.0], [3.0, 1.0]])
        with pytest.raises(UnimputableFeatureError, match="f0"):
            standardize_and_impute(c, fit_on=[0, 1])

    def test_applied_once_only(self):
        z = standardize_and_impute(make_cohort([[1.0], [2.0]]))
        with pytest.raises(ValueError, match="already standardized"):
            apply_standardization(z, z.standardization)

    def test_missing_indicators(self):
        c = make_cohort([[1.0, np.nan], [3.0, 2.0]])
        z = standardize_and_impute(c, append_missing_indicators=True)
        assert z.n_features == 4
        assert_array_equal(z.features[:, 2:], [[1, 0], [1, 1]])
        assert z.feature_names[2:] == ("f0__observed", "f1__observed")

    def test_inverse(self, rng):
        x = rng.normal(3, 2, size=(10, 2))
        z = standardize_and_impute(make_cohort(x))
        assert_allclose(z.standardization.inverse(z.features), x)


class TestSplit:
    def cohort(self, n=100, n_cens=50):
        cens = np.zeros(n, bool)
        cens[:n_cens] = True
        return make_cohort(np.arange(n, dtype=float)[:, None], censored=cens)

    def test_sizes_and_repeatability(self):
        c = self.cohort()
        a, b = split(c, (0.8, 0.2), seed=7)
        assert (len(a), len(b)) == (80, 20)
        a2, _ = split(c, (0.8, 0.2), seed=7)
        assert_array_equal(a.ids, a2.ids)
        a3, b3 = split(c, (0.8, 0.2), seed=8)
        assert (len(a3), len(b3)) == (80, 20)
        assert not np.array_equal(a.ids, a3.ids)

    def test_stratified_half(self):
        a, b = split(self.cohort(), (0.5, 0.5), seed=3)
        assert abs(a.censored.sum() - 25) <= 2 and abs(b.censored.sum() - 25) <= 2

    @settings(max_examples=50, deadline=None)
    @given(st.integers(4, 200), st.floats(0.1, 0.9), st.integers(0, 2**32 - 1),
           st.floats(0.2, 0.8))
    def test_partition(self, n, frac, seed, cens_share):
        n_cens = min(max(2, int(cens_share * n)), n - 2)
        c = self.cohort(n, n_cens)
        try:
            a, b = split(c, (frac, 1 - frac), seed=seed)
        except SplitError:
            return
        assert set(a.ids) | set(b.ids) == set(c.ids)
        assert not set(a.ids) & set(b.ids)
        assert len(a) == round(frac * n)
        assert abs(a.censored.sum() - frac * n_cens) <= 2

    def test_bad_fractions(self):
        with pytest.raises(SplitError):
            split(self.cohort(), (0.5, 0.4))
        with pytest.raises(SplitError):
            split(self.cohort(), (1.0, 0.0))

    def test_tiny_stratum(self):
        with pytest.raises(SplitError):
            split(self.cohort(10, 1), (0.5, 0.5), seed=0)
