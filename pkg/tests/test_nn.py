from __future__ import annotations

import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_difference_check, separable_set
from ecgmon import nn
from ecgmon.errors import DegenerateBatch, FormatError, InvalidInput, ShapeError, VersionError


def small_model(seed=0, dropout=0.0, d=5, widths=(6, 5, 4)):
    return nn.init_model(d, widths=widths, dropout=dropout, seed=seed)


def warm_up(model, X, steps=3):
    """Move BN parameters and biases off their initial values so every gradient path is exercised."""
    rng = np.random.default_rng(99)
    for p in model.parameters():
        p += 0.1 * rng.standard_normal(p.shape)
    for blk in model.blocks:
        blk.running_mean = rng.standard_normal(blk.running_mean.shape) * 0.1
        blk.running_var = 1.0 + rng.random(blk.running_var.shape)
    return model


class TestInit:
    def test_default_architecture(self):
        m = nn.init_model(12)
        assert [b.W.shape[0] for b in m.blocks] == [256, 128, 64, 32, 16, 8, 4]
        assert m.output.W.shape == (1, 4)
        assert all(b.dropout == 0.3 and b.momentum == 0.9 for b in m.blocks)

    def test_uniform_limits(self):
        m = nn.init_model(20, seed=3)
        first = m.blocks[0].W
        assert np.max(np.abs(first)) <= math.sqrt(6 / 20)
        assert np.max(np.abs(m.output.W)) <= math.sqrt(6 / 5)
        assert not np.any(m.blocks[0].b)

    def test_seeded(self):
        a, b = nn.init_model(7, seed=5), nn.init_model(7, seed=5)
        assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    def test_bad_dropout(self):
        with pytest.raises(InvalidInput):
            nn.init_model(3, widths=(4,), dropout=1.0)

    def test_dimension_chain_checked(self):
        m = small_model()
        m.blocks[1].W = np.zeros((5, 3))
        with pytest.raises(ShapeError):
            nn.MlpModel(m.blocks, m.output)


class TestForward:
    def test_zero_weights_give_half(self, rng):
        m = small_model()
        for p in m.parameters():
            p[...] = 0.0
        X = rng.standard_normal((6, 5))
        for mode in ("train", "infer"):
            p, _ = nn.forward(m, X, mode)
            assert np.all(p == 0.5)

    def test_infer_is_pure(self, rng):
        m = warm_up(small_model(dropout=0.3), None)
        X = rng.standard_normal((9, 5))
        snapshot = [b.running_mean.copy() for b in m.blocks]
        a, _ = nn.forward(m, X, "infer")
        b, _ = nn.forward(m, X, "infer")
        assert np.array_equal(a, b)
        nn.forward(m, X, "train", np.random.default_rng(0))
        assert all(np.array_equal(s, b.running_mean) for s, b in zip(snapshot, m.blocks))

    def test_single_sample_train_batch(self):
        with pytest.raises(DegenerateBatch):
            nn.forward(small_model(), np.ones((1, 5)), "train")

    def test_single_sample_infer_ok(self):
        p, _ = nn.forward(small_model(), np.ones((1, 5)), "infer")
        assert p.shape == (1,)

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            nn.forward(small_model(), np.ones((3, 4)))

    def test_batchnorm_standardizes(self, rng):
        m = small_model(widths=(16, 8))
        X = rng.normal(3.0, 5.0, size=(64, 5))
        _, cache = nn.forward(m, X, "train")
        for xhat in cache.xhat:
            assert np.max(np.abs(xhat.mean(axis=0))) < 1e-6
            assert np.max(np.abs(xhat.var(axis=0) - 1.0)) < 1e-4

    def test_inverted_dropout_keeps_expectation(self):
        m = nn.init_model(4, widths=(8,), dropout=0.3, seed=2)
        X = np.random.default_rng(0).standard_normal((4, 4))
        _, ref = nn.forward(m, X, "train")
        base = ref.last_hidden
        rng = np.random.default_rng(1)
        total = np.zeros_like(base)
        trials = 10_000
        for _ in range(trials):
            _, c = nn.forward(m, X, "train", rng)
            total += c.last_hidden
        mean = total / trials
        assert abs(mean.sum() / base.sum() - 1.0) < 0.02
        active = base > 0
        # per element: within four standard errors of the mean of a scaled Bernoulli
        se = base[active] * math.sqrt((1 / 0.7 - 1) / trials)
        assert np.all(np.abs(mean[active] - base[active]) < 4 * se)
        assert np.all(mean[~active] == 0)

    def test_numerically_stable_sigmoid(self):
        z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
        s = nn.sigmoid(z)
        assert np.all(np.isfinite(s)) and s[2] == 0.5
        assert s[0] == 0.0 and s[-1] == 1.0


class TestLoss:
    def test_half(self):
        assert nn.bce_loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-12)

    def test_near_one(self):
        assert nn.bce_loss([1 - 1e-12], [1]) == pytest.approx(0.0, abs=1e-11)

    def test_batch(self):
        assert nn.bce_loss([0.9, 0.1], [1, 0]) == pytest.approx(-(math.log(0.9) * 2) / 2, abs=1e-12)
        assert nn.bce_loss([0.9, 0.1], [1, 0]) == pytest.approx(0.10536, abs=1e-5)

    def test_clamped(self):
        assert math.isfinite(nn.bce_loss([0.0, 1.0], [1, 0]))
        assert nn.bce_loss([0.0], [1]) == pytest.approx(-math.log(1e-12))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            nn.bce_loss([0.5, 0.5], [1])


class TestBackward:
    def test_matches_finite_differences(self, rng):
        m = warm_up(small_model(seed=4), None)
        X = rng.standard_normal((8, 5))
        y = np.array([0, 1, 1, 0, 1, 0, 0, 1], dtype=float)
        worst, where = finite_difference_check(m, X, y)
        assert worst < 1e-6, where

    def test_matches_finite_differences_with_fixed_mask(self, rng):
        """Dropout enters backprop only through its mask; freeze one and check again."""
        m = warm_up(small_model(seed=6, dropout=0.3), None)
        X = rng.standard_normal((6, 5))
        y = np.array([1, 0, 1, 0, 0, 1], dtype=float)
        _, cache = nn.forward(m, X, "train", np.random.default_rng(3))
        masks = cache.masks
        grads = nn.backward(m, cache, y)

        def loss():
            h = X
            for blk, mask in zip(m.blocks, masks):
                z = h @ blk.W.T + blk.b
                xhat = (z - z.mean(0)) / np.sqrt(z.var(0) + blk.eps)
                h = np.maximum(blk.gamma * xhat + blk.beta, 0) * mask
            return nn.bce_loss(nn.sigmoid((h @ m.output.W.T + m.output.b).ravel()), y)

        for param, g in zip(m.parameters(), grads):
            flat, gf = param.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                keep = flat[k]
                flat[k] = keep + 1e-5
                up = loss()
                flat[k] = keep - 1e-5
                down = loss()
                flat[k] = keep
                num = (up - down) / 2e-5
                assert abs(gf[k] - num) / max(abs(gf[k]), abs(num), 1e-4) < 1e-6

    def test_pre_norm_bias_gradient_vanishes(self, rng):
        m = warm_up(small_model(seed=1), None)
        X = rng.standard_normal((10, 5))
        y = (rng.random(10) > 0.5).astype(float)
        _, cache = nn.forward(m, X, "train")
        grads = dict(zip(m.parameter_names(), nn.backward(m, cache, y)))
        for i in range(len(m.blocks)):
            assert np.max(np.abs(grads[f"block{i}.b"])) < 1e-12

    def test_stationary_output_bias(self, rng):
        m = small_model(seed=2)
        m.output.W[...] = 0.0
        half = rng.standard_normal((4, 5))
        X = np.vstack([half, -half])
        y = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=float)
        _, cache = nn.forward(m, X, "train")
        grads = nn.backward(m, cache, y)
        assert np.all(cache.probabilities == 0.5)
        assert grads[-1][0] == pytest.approx(0.0, abs=1e-15)

    def test_loss_scale_is_linear(self, rng):
        m = warm_up(small_model(seed=3), None)
        X = rng.standard_normal((7, 5))
        y = (rng.random(7) > 0.5).astype(float)
        _, cache = nn.forward(m, X, "train")
        g1 = nn.backward(m, cache, y)
        g2 = nn.backward(m, cache, y, loss_scale=2.0)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(b, 2 * a, rtol=1e-14, atol=0)

    def test_infer_mode_backward_matches_fd(self, rng):
        m = warm_up(small_model(seed=8), None)
        X = rng.standard_normal((5, 5))
        y = np.array([1, 0, 0, 1, 1], dtype=float)
        _, cache = nn.forward(m, X, "infer")
        grads = nn.backward(m, cache, y)
        W = m.blocks[0].W
        for k in range(W.size):
            keep = W.flat[k]
            W.flat[k] = keep + 1e-5
            up = nn.bce_loss(nn.forward(m, X, "infer")[0], y)
            W.flat[k] = keep - 1e-5
            down = nn.bce_loss(nn.forward(m, X, "infer")[0], y)
            W.flat[k] = keep
            num = (up - down) / 2e-5
            assert abs(grads[0].flat[k] - num) / max(abs(num), 1e-4) < 1e-6


@pytest.fixture(scope="module")
def trained():
    X, y, Xv, yv = separable_set(0)
    cfg = nn.TrainConfig(max_epochs=60, seed=3)
    model = nn.init_model(8, seed=1)
    fitted, log = nn.fit(model, X, y, Xv, yv, cfg)
    return model, fitted, log, (X, y, Xv, yv), cfg


class TestTraining:
    def test_full_batch_loss_decreases(self, rng):
        X = rng.standard_normal((16, 6))
        y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
        m = nn.init_model(6, widths=(16, 8, 4), dropout=0.0, seed=11)
        opt = nn.Adam(m.parameters())
        losses = []
        for _ in range(11):
            p, cache = nn.forward(m, X, "train")
            losses.append(nn.bce_loss(p, y))
            opt.step(m.parameters(), nn.backward(m, cache, y), 1e-3)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_lr_schedule_contract(self, trained):
        _, _, log, _, cfg = trained
        lrs = log.column("lr")
        assert lrs[0] == cfg.initial_lr
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert min(lrs) >= cfg.min_lr

    def test_restores_minimum_validation_loss(self, trained):
        _, fitted, log, (_, _, Xv, yv), _ = trained
        best = min(log.column("val_loss"))
        assert log.epochs[log.best_epoch].val_loss == best
        assert nn.bce_loss(nn.predict_proba(fitted, Xv), yv) == best

    def test_input_model_untouched(self, trained):
        model, fitted, *_ = trained
        fresh = nn.init_model(8, seed=1)
        assert all(np.array_equal(p, q) for p, q in zip(model.parameters(), fresh.parameters()))
        assert not np.array_equal(fitted.blocks[0].W, fresh.blocks[0].W)

    def test_deterministic_weights(self, trained, tmp_path):
        model, fitted, _, (X, y, Xv, yv), cfg = trained
        again, _ = nn.fit(model, X, y, Xv, yv, cfg)
        nn.save_weights(fitted, tmp_path / "a.mlpw")
        nn.save_weights(again, tmp_path / "b.mlpw")
        assert (tmp_path / "a.mlpw").read_bytes() == (tmp_path / "b.mlpw").read_bytes()

    def test_early_stopping_on_flat_loss(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((40, 3))
        y = (rng.random(40) > 0.5).astype(float)
        cfg = nn.TrainConfig(max_epochs=300, early_stop_patience=4, plateau_patience=2, seed=0)
        _, log = nn.fit(nn.init_model(3, widths=(4, 4), seed=0), X, y, X[:10], 1 - y[:10], cfg)
        assert log.stopped_early and len(log.epochs) < 300

    def test_without_validation_monitors_training(self):
        X, y, _, _ = separable_set(2, n=20)
        _, log = nn.fit(nn.init_model(8, widths=(8, 4), seed=0), X, y, config=nn.TrainConfig(max_epochs=5))
        assert all(e.val_loss is None for e in log.epochs)
        assert log.best_epoch == int(np.argmin(log.column("train_loss")))

    def test_batches_never_singleton(self):
        perm = np.arange(65)
        chunks = nn._batches(65, 32, perm)
        assert [c.size for c in chunks] == [32, 33]
        assert np.array_equal(np.concatenate(chunks), perm)

    def test_rejects_bad_config(self):
        with pytest.raises(InvalidInput):
            nn.TrainConfig(initial_lr=0)
        with pytest.raises(InvalidInput):
            nn.fit(nn.init_model(2), np.zeros((1, 2)), np.zeros(1))


class TestPredict:
    def test_threshold_boundary_maps_to_one(self):
        m = small_model()
        for p in m.parameters():
            p[...] = 0.0
        assert list(nn.predict(m, np.ones((3, 5)))) == [1, 1, 1]
        assert list(nn.predict(m, np.ones((3, 5)), threshold=0.6)) == [0, 0, 0]


class TestWeightsFile:
    def test_round_trip(self, tmp_path, rng):
        m = warm_up(small_model(dropout=0.2), None)
        path = tmp_path / "m.mlpw"
        nn.save_weights(m, path)
        back = nn.load_weights(path)
        X = rng.standard_normal((4, 5))
        assert np.array_equal(nn.predict_proba(m, X), nn.predict_proba(back, X))
        nn.save_weights(back, tmp_path / "again.mlpw")
        assert (tmp_path / "again.mlpw").read_bytes() == path.read_bytes()
        assert back.blocks[0].dropout == 0.2

    def test_layout(self, tmp_path):
        m = nn.init_model(3, widths=(2,), seed=0)
        path = tmp_path / "m.mlpw"
        nn.save_weights(m, path)
        data = path.read_bytes()
        assert data[:4] == b"MLPW"
        assert struct.unpack_from("<HH", data, 4) == (1, 2)
        assert struct.unpack_from("<IIB", data, 8) == (2, 3, 1)
        assert struct.unpack_from("<ddd", data, 17) == (0.3, 0.9, 1e-5)
        w = np.frombuffer(data, "<f8", count=6, offset=41).reshape(2, 3)
        assert np.array_equal(w, m.blocks[0].W)
        hidden = 9 + 24 + 8 * (6 + 5 * 2)
        assert struct.unpack_from("<IIB", data, 8 + hidden) == (1, 2, 0)
        assert len(data) == 8 + hidden + 9 + 8 * 3 + 4
        assert struct.unpack_from("<I", data, len(data) - 4)[0] == zlib.crc32(data[:-4])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            nn.load_weights(tmp_path / "x")

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.mlpw"
        nn.save_weights(small_model(), path)
        data = bytearray(path.read_bytes())
        data[4:6] = struct.pack("<H", 2)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionError):
            nn.load_weights(path)

    def test_bit_flip_detected(self, tmp_path):
        path = tmp_path / "m.mlpw"
        nn.save_weights(small_model(), path)
        data = bytearray(path.read_bytes())
        data[100] ^= 0x10
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            nn.load_weights(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.mlpw"
        nn.save_weights(small_model(), path)
        body = path.read_bytes()[:-40]
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(FormatError):
            nn.load_weights(path)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 12))
def test_train_mode_gradient_property(seed, n):
    rng = np.random.default_rng(seed)
    m = nn.init_model(3, widths=(4, 3), dropout=0.0, seed=seed)
    X = rng.standard_normal((n, 3)) * 2
    y = (rng.random(n) > 0.5).astype(float)
    # backprop of BN goes wrong mostly when a column collapses; skip those draws
    _, cache = nn.forward(m, X, "train")
    if min(float(v.min()) for v in cache.batch_var) < 1e-3:
        return
    worst, where = finite_difference_check(m, X, y)
    assert worst < 1e-5, where
