import math
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from _helpers import finite_difference_check
from rsm import survnet
from rsm.cohort import Cohort
from rsm.errors import (ArtifactError, BinningError, DataQualityWarning, DivergenceError,
                        ShapeError)
from rsm.survnet import (Batch, GatedNetwork, SurvivalPDF, TrainConfig, build_bins, forward,
                         gradients, init_network, loss, make_batch, predict, predict_mass)


def tiny_net(m=3, hidden=(5, 4), t=4, seed=0):
    return init_network(m, np.arange(t + 1, dtype=float), hidden, seed=seed)


def random_batch(rng, m, t, n=8, cens_share=0.5):
    return Batch(rng.normal(size=(n, m)), rng.integers(0, t - 1, n), rng.random(n) < cens_share)


class TestBins:
    def test_quantile_edges(self):
        edges = build_bins(np.arange(1, 101), 4)
        assert_allclose(edges, [0, 25, 50, 75, 101], atol=1)
        assert edges[0] == 0 and edges[-1] == pytest.approx(101.0)

    def test_two_point_split(self):
        assert_allclose(build_bins([1.0, 2.0], 2), [0, 1.5, 2.02])

    def test_identical_times(self):
        with pytest.raises(BinningError):
            build_bins(np.full(10, 3.0), 2)

    def test_too_few_bins(self):
        with pytest.raises(BinningError):
            build_bins([1.0, 2.0], 1)

    def test_bin_index_covers_all(self, rng):
        t = rng.exponential(size=200)
        edges = build_bins(t, 8)
        idx = survnet.bin_index(edges, t)
        assert idx.min() == 0 and idx.max() == 7
        assert np.all(edges[idx] <= t) and np.all(t < edges[idx + 1])


class TestForward:
    def test_constant_network(self):
        net = tiny_net()
        net.gate[:] = 0.0
        b = np.array([0.5, -1.0, 2.0, 0.0])
        net.biases[-1] = b
        expected = np.exp(b) / np.exp(b).sum()
        for x in ([0, 0, 0], [5.0, -3.0, 1e3]):
            assert_allclose(forward(net, np.array(x, float)).mass, expected, rtol=1e-12)

    def test_normalization_over_random_parameters(self, rng):
        for _ in range(1000):
            net = tiny_net(seed=int(rng.integers(1 << 30)))
            scale = 10 ** rng.uniform(-2, 2)
            net.set_params([p + scale * rng.normal(size=p.shape) for p in net.params()])
            mass = predict_mass(net, rng.normal(size=(3, 3)) * scale)
            assert np.all(mass >= 0)
            assert_allclose(mass.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_gate_blocks_feature(self, rng):
        net = tiny_net(seed=4)
        net.gate[1] = 0.0
        x = rng.normal(size=3)
        y = x.copy()
        y[1] += 123.456
        assert_array_equal(forward(net, x).mass, forward(net, y).mass)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            forward(tiny_net(), np.zeros(4))

    def test_pdf_invariants(self):
        with pytest.raises(ValueError):
            SurvivalPDF(np.array([0.5, 0.6]), np.array([0.0, 1, 2]))
        with pytest.raises(ValueError):
            SurvivalPDF(np.array([0.5, 0.5]), np.array([0.0, 2, 1]))
        with pytest.raises(ShapeError):
            SurvivalPDF(np.array([1.0]), np.array([0.0, 1, 2]))


class TestLoss:
    def test_zero_lambda_is_base_nll(self, rng):
        net = tiny_net()
        batch = random_batch(rng, 3, 4)
        assert loss(net, batch, 0.0) == survnet.base_loss(net, batch)

    def test_uniform_pdf(self):
        net = tiny_net()
        net.weights[-1][:] = 0.0
        batch = Batch(np.ones((1, 3)), np.array([2]), np.array([False]))
        assert loss(net, batch, 0.0) == pytest.approx(math.log(4))

    def test_censored_uses_strict_tail(self):
        net = tiny_net()
        net.weights[-1][:] = 0.0
        batch = Batch(np.ones((1, 3)), np.array([1]), np.array([True]))
        assert loss(net, batch, 0.0) == pytest.approx(-math.log(0.5))

    def test_penalty_example(self):
        net = init_network(2, np.arange(5, dtype=float), (3,), seed=0)
        net.gate[:] = [3.0, -4.0]
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = [1000.0, 0, 0, 0]  # all mass on bin 0
        batch = Batch(np.ones((1, 2)), np.array([0]), np.array([False]))
        assert survnet.base_loss(net, batch) == 0.0
        assert loss(net, batch, 1.0) == 3.5

    def test_empty_tail_warns_and_floors(self):
        net = tiny_net()
        batch = Batch(np.ones((2, 3)), np.array([3, 0]), np.array([True, False]))
        with pytest.warns(DataQualityWarning):
            value = loss(net, batch, 0.0)
        nll0 = -math.log(predict_mass(net, np.ones(3))[0, 0])
        assert value == pytest.approx((-math.log(1e-12) + nll0) / 2)

    def test_linearity_in_lambda(self, rng):
        net = tiny_net()
        net.gate[:] = [0.3, -2.0, 1.1]
        batch = random_batch(rng, 3, 4)
        d = 0.37
        assert loss(net, batch, 0.2 + d) - loss(net, batch, 0.2) == pytest.approx(
            d * np.abs(net.gate).sum() / 3, rel=1e-12)

    def test_bad_bins(self):
        with pytest.raises(ValueError):
            loss(tiny_net(), Batch(np.ones((1, 3)), np.array([4]), np.array([False])), 0.0)


class TestGradients:
    def test_finite_differences(self, rng):
        net = tiny_net(m=4, hidden=(6, 5), t=5, seed=1)
        net.set_params([p + 0.3 * rng.normal(size=p.shape) for p in net.params()])
        batch = random_batch(rng, 4, 5)
        worst = finite_difference_check(net, batch, lam=0.3)
        assert set(worst) == set(net.param_names())
        assert max(worst.values()) < 1e-4, worst

    def test_zero_lambda_gate_is_likelihood_gradient(self, rng):
        net = tiny_net()
        batch = random_batch(rng, 3, 4)
        g0 = gradients(net, batch, 0.0)[0]
        g1 = gradients(net, batch, 0.9)[0]
        assert_allclose(g1 - g0, 0.9 / 3 * np.sign(net.gate))

    def test_sign_of_zero_is_zero(self, rng):
        net = tiny_net()
        net.gate[:] = [0.0, 2.0, -1.0]
        batch = random_batch(rng, 3, 4)
        diff = gradients(net, batch, 1.0)[0] - gradients(net, batch, 0.0)[0]
        assert_allclose(diff, [0.0, 1 / 3, -1 / 3], atol=1e-15)

    def test_floored_records_have_no_gradient(self):
        net = tiny_net()
        batch = Batch(np.ones((1, 3)), np.array([3]), np.array([True]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DataQualityWarning)
            grads = gradients(net, batch, 0.0)
        assert all(np.all(g == 0) for g in grads)


class TestTrain:
    def test_seeded_determinism(self, small_split):
        _, _, z = small_split
        cfg = TrainConfig(time_bins=8, hidden_sizes=(8,), epochs=2, batch_size=64, seed=5)
        a, b = survnet.train(z, cfg), survnet.train(z, cfg)
        assert_array_equal(a.gate, b.gate)
        for wa, wb in zip(a.params(), b.params()):
            assert_array_equal(wa, wb)

    def test_heavy_l1_shrinks_gate(self, small_split):
        _, _, z = small_split
        base = dict(time_bins=8, hidden_sizes=(16,), epochs=15, batch_size=64, seed=2,
                    learning_rate=1e-2)
        free = survnet.train(z, TrainConfig(lam=0.0, **base))
        heavy = survnet.train(z, TrainConfig(lam=10.0, **base))
        assert np.abs(heavy.gate).mean() < np.abs(free.gate).mean()

    def test_history(self, small_model):
        h = small_model.history
        assert len(h.train_loss) == len(h.val_loss) == 8
        assert h.val_loss[h.best_epoch] == min(h.val_loss)

    def test_requires_imputed(self, small_split):
        tr, _, _ = small_split
        with pytest.raises(ValueError, match="impute"):
            survnet.train(tr, TrainConfig(epochs=1))

    def test_divergence(self, small_split):
        _, _, z = small_split
        cfg = TrainConfig(time_bins=8, hidden_sizes=(8,), epochs=3, learning_rate=1e300)
        with pytest.raises(DivergenceError, match="learning rate"):
            survnet.train(z, cfg)


class TestPredict:
    def test_alignment_and_invariants(self, small_model, small_split):
        _, _, z = small_split
        pdfs = predict(small_model, z)
        assert len(pdfs) == len(z)
        for p in pdfs[:50]:
            assert abs(p.mass.sum() - 1) < 1e-9 and np.all(p.mass >= 0)
            assert p.bin_edges[-1] >= z.event_time.max()

    def test_duplicates_identical(self, small_model, small_split):
        _, _, z = small_split
        x = np.vstack([z.features[:1], z.features[:1]])
        m = predict_mass(small_model, x)
        assert_array_equal(m[0], m[1])

    def test_feature_count_mismatch(self, small_model):
        c = Cohort(ids=np.arange(2), features=np.zeros((2, 4)), observed=np.ones((2, 4), bool),
                   event_time=np.ones(2), censored=np.zeros(2, bool),
                   feature_names=("a", "b", "c", "d"))
        with pytest.raises(ShapeError):
            predict(small_model, c)

    def test_gate_zeroing_after_training(self, small_model, small_split, rng):
        _, _, z = small_split
        net = small_model.copy()
        net.gate[4] = 0.0
        x = z.features[:20].copy()
        y = x.copy()
        y[:, 4] = rng.normal(size=20) * 10
        assert_array_equal(predict_mass(net, x), predict_mass(net, y))

    def test_prepare_uses_training_transform(self, small_model, small_split):
        tr, _, z = small_split
        assert_array_equal(survnet.prepare(small_model, tr).features, z.features)


class TestPersistence:
    def test_model_roundtrip(self, small_model, tmp_path):
        p = tmp_path / "m.rsmn"
        survnet.save_model(small_model, p)
        back = survnet.load_model(p)
        for a, b in zip(small_model.params(), back.params()):
            assert_array_equal(a, b)
        assert_array_equal(back.bin_edges, small_model.bin_edges)
        assert_array_equal(back.standardization.mean, small_model.standardization.mean)
        assert back.feature_names == small_model.feature_names
        assert p.read_bytes()[:4] == b"RSMN"

    def test_corrupt_model(self, small_model, tmp_path):
        p = tmp_path / "m.rsmn"
        survnet.save_model(small_model, p)
        data = bytearray(p.read_bytes())
        data[200] ^= 1
        p.write_bytes(bytes(data))
        with pytest.raises(ArtifactError):
            survnet.load_model(p)

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "m.rsmn"
        p.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(ArtifactError):
            survnet.load_model(p)

    def test_pdfs_roundtrip(self, tmp_path, rng):
        mass = rng.dirichlet(np.ones(5), size=7)
        edges = np.linspace(0, 5, 6)
        survnet.save_pdfs(tmp_path / "p.bin", np.arange(7), mass, edges)
        ids, m2, e2 = survnet.load_pdfs(tmp_path / "p.bin")
        assert_array_equal(ids, np.arange(7))
        assert_array_equal(m2, mass)
        assert_array_equal(e2, edges)


def test_make_batch_bins(rng):
    edges = np.array([0.0, 1, 2, 3])
    b = make_batch(np.zeros((3, 2)), [0.5, 2.0, 10.0], [False, True, False], edges)
    assert_array_equal(b.bins, [0, 2, 2])


def test_network_shape_checks():
    with pytest.raises(ShapeError):
        GatedNetwork(np.ones(3), [np.ones((2, 4))], [np.zeros(4)], np.arange(5.0))
    with pytest.raises(ShapeError):
        GatedNetwork(np.ones(2), [np.ones((2, 3))], [np.zeros(3)], np.arange(5.0))
