"""Latent-map GP: encoding, kernel anchors, joint fit, fusion behavior."""

import numpy as np
import pytest

from porocal import gp_core, lmgp
from porocal.errors import ConfigError
from porocal.gp_core import GpConfig, fit_gp, predict
from porocal.lmgp import (CategoricalSpec, LmgpConfig, fit_lmgp, latent_map,
                          latent_positions, lmgp_corr, load_lmgp,
                          predict_lmgp, save_lmgp, spec_from_levels)

PAPER_SPEC = CategoricalSpec((("t1", 4), ("t2", 2)))


def _two_source_data(n, seed, bias=0.0, d=1):
    """Level-1 samples of a smooth function plus level-2 samples of the
    same function shifted by `bias`."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 2.0, size=(n, d))
    y = np.sin(2.5 * x[:, 0]) + 0.3 * x[:, 0]
    t = np.ones((n, 1), dtype=int)
    half = n // 2
    t[half:, 0] = 2
    y[half:] += bias
    return x, y, t


class TestEncoding:
    def test_one_hot_layout(self):
        tau = PAPER_SPEC.encode([[2, 1], [4, 2]])
        assert tau.shape == (2, 6)
        np.testing.assert_array_equal(tau[0], [0, 1, 0, 0, 1, 0])
        np.testing.assert_array_equal(tau[1], [0, 0, 0, 1, 0, 1])

    def test_unknown_level_rejected(self):
        with pytest.raises(ConfigError):
            PAPER_SPEC.encode([[5, 1]])
        with pytest.raises(ConfigError):
            PAPER_SPEC.encode([[0, 1]])

    def test_non_integer_level_rejected(self):
        with pytest.raises(ConfigError):
            PAPER_SPEC.encode([[1.5, 1]])

    def test_spec_from_levels(self):
        t = np.array([[1, 2], [3, 1], [2, 2]])
        spec = spec_from_levels(t)
        assert spec.counts == (3, 2)


class TestLatentMap:
    def _model_with_a(self, a_mat, spec=PAPER_SPEC):
        # minimal hand-built model: only spec and a_mat matter here
        return lmgp.LmgpModel(
            w=np.zeros(1), a_mat=np.asarray(a_mat, dtype=float),
            beta=np.zeros(1), sigma2=1.0, nugget=0.0, mean="constant",
            spec=spec, d_z=np.asarray(a_mat).shape[1],
            x=np.zeros((1, 1)), t=np.array([[1, 1]]), y=np.zeros(1),
            x_lo=np.zeros(1), x_span=np.ones(1), group_var=None,
            group_levels=np.array([0]), y_lo=np.zeros(1),
            y_span=np.ones(1), combos=np.array([[1, 1]]))

    def test_zero_map_gives_zero(self):
        model = self._model_with_a(np.zeros((6, 2)))
        np.testing.assert_array_equal(latent_map((3, 2), model), np.zeros(2))

    def test_one_hot_selects_rows(self):
        a = np.arange(12.0).reshape(6, 2)
        model = self._model_with_a(a)
        z = latent_map((2, 1), model)
        np.testing.assert_allclose(z, a[1] + a[4])

    def test_same_combination_same_z(self):
        a = np.random.default_rng(0).normal(size=(6, 2))
        model = self._model_with_a(a)
        np.testing.assert_array_equal(latent_map((3, 1), model),
                                      latent_map((3, 1), model))

    def test_out_of_range_combination(self):
        model = self._model_with_a(np.zeros((6, 2)))
        with pytest.raises(ConfigError):
            latent_map((6, 1), model)


class TestKernel:
    def _model_with_distance(self, dz):
        spec = CategoricalSpec((("src", 2),))
        a = np.array([[0.0, 0.0], [dz, 0.0]])
        return lmgp.LmgpModel(
            w=np.zeros(1), a_mat=a, beta=np.zeros(1), sigma2=1.0,
            nugget=0.0, mean="constant", spec=spec, d_z=2,
            x=np.zeros((1, 1)), t=np.array([[1]]), y=np.zeros(1),
            x_lo=np.zeros(1), x_span=np.ones(1), group_var=None,
            group_levels=np.array([0]), y_lo=np.zeros(1),
            y_span=np.ones(1), combos=np.array([[1], [2]]))

    def test_printed_anchor_values(self):
        s = np.array([0.3])
        m1 = self._model_with_distance(0.06)
        assert round(lmgp_corr(s, (1,), s, (2,), m1), 4) == 0.9964
        m2 = self._model_with_distance(0.6)
        assert round(lmgp_corr(s, (1,), s, (2,), m2), 4) == 0.6977

    def test_same_combination_reduces_to_gauss(self):
        model = self._model_with_distance(0.4)
        model.w = np.array([0.7])
        s, s2 = np.array([0.2]), np.array([1.1])
        assert lmgp_corr(s, (2,), s2, (2,), model) == pytest.approx(
            float(gp_core.gauss_corr(s, s2, model.w)), abs=1e-15)

    def test_kernel_psd_random_maps(self):
        rng = np.random.default_rng(4)
        spec = CategoricalSpec((("a", 3), ("b", 2)))
        for _ in range(20):
            n = 25
            x = rng.uniform(size=(n, 2))
            t = np.column_stack([rng.integers(1, 4, n),
                                 rng.integers(1, 3, n)])
            a = rng.normal(scale=0.8, size=(5, 2))
            w = rng.uniform(-1.5, 1.5, size=2)
            tau = spec.encode(t)
            z = tau @ a
            r = lmgp._corr_mixed(gp_core._sq_dists(x),
                                 lmgp._z_sq_dists(z), w)
            eig = np.linalg.eigvalsh(r)
            assert eig.min() >= -1e-10


class TestGradient:
    def test_joint_gradient_matches_fd(self):
        rng = np.random.default_rng(7)
        n, d, d_z = 18, 2, 2
        spec = CategoricalSpec((("src", 3),))
        x = rng.uniform(size=(n, d))
        t = rng.integers(1, 4, size=(n, 1))
        y = rng.normal(size=n)
        tau = spec.encode(t)
        dists = gp_core._sq_dists(x)
        f_mat = gp_core._basis(x, "constant")
        n_par = d + 3 * d_z
        for trial in range(4):
            theta = np.concatenate([
                rng.uniform(-1.0, 1.0, d),
                rng.normal(scale=0.5, size=3 * d_z)])
            _, grad = lmgp._nll_and_grad_mixed(
                theta, dists, tau, f_mat, y, 1e-8, d, d_z)
            fd = np.empty(n_par)
            h = 1e-6
            for i in range(n_par):
                tp, tm = theta.copy(), theta.copy()
                tp[i] += h
                tm[i] -= h
                fp, _ = lmgp._nll_and_grad_mixed(
                    tp, dists, tau, f_mat, y, 1e-8, d, d_z)
                fm, _ = lmgp._nll_and_grad_mixed(
                    tm, dists, tau, f_mat, y, 1e-8, d, d_z)
                fd[i] = (fp - fm) / (2 * h)
            denom = max(np.linalg.norm(fd), 1e-10)
            assert np.linalg.norm(grad - fd) / denom < 1e-5


class TestFit:
    CFG = LmgpConfig(n_starts=3, seed=0)

    def test_determinism(self):
        x, y, t = _two_source_data(30, seed=1, bias=0.5)
        m1 = fit_lmgp(x, y, t, config=self.CFG)
        m2 = fit_lmgp(x, y, t, config=self.CFG)
        np.testing.assert_array_equal(m1.a_mat, m2.a_mat)
        np.testing.assert_array_equal(m1.w, m2.w)

    def test_identical_sources_collapse(self):
        x, y, t = _two_source_data(40, seed=2, bias=0.0)
        model = fit_lmgp(x, y, t, config=self.CFG)
        _, z = latent_positions(model)
        assert np.linalg.norm(z[0] - z[1]) < 0.05

    def test_latent_frame_canonical(self):
        x, y, t = _two_source_data(40, seed=3, bias=1.0)
        model = fit_lmgp(x, y, t, config=self.CFG)
        _, z = latent_positions(model)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        cross = z.T @ z
        assert abs(cross[0, 1]) < 1e-10

    def test_single_source_matches_plain_gp(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0.0, 2.0, size=(25, 1))
        y = np.cos(2.0 * x[:, 0]) + 0.1 * x[:, 0]
        t = np.ones((25, 1), dtype=int)
        model = fit_lmgp(x, y, t, config=LmgpConfig(n_starts=4, seed=0))
        gp = fit_gp(x, y, GpConfig(n_starts=4, seed=0))
        xs = np.linspace(0.1, 1.9, 7)[:, None]
        mean_l, _ = predict_lmgp(model, xs, np.ones((7, 1), dtype=int))
        mean_g, _ = predict(gp, xs)
        span = y.max() - y.min()
        assert np.max(np.abs(mean_l - mean_g)) < 1e-6 * span

    def test_bias_sweep_monotone_separation(self):
        biases = [0.2, 0.8, 2.0]
        cfg = LmgpConfig(n_starts=3, seed=0)
        medians = []
        for bias in biases:
            dists = []
            for seed in range(5):
                x, y, t = _two_source_data(36, seed=seed, bias=bias)
                model = fit_lmgp(x, y, t, config=cfg)
                _, z = latent_positions(model)
                dists.append(np.linalg.norm(z[0] - z[1]))
            medians.append(np.median(dists))
        assert medians[0] < medians[1] < medians[2]

    def test_constant_column_rejected(self):
        x = np.column_stack([np.linspace(0, 1, 10), np.full(10, 3.0)])
        y = np.linspace(0, 1, 10)
        t = np.ones((10, 1), dtype=int)
        with pytest.raises(ConfigError):
            fit_lmgp(x, y, t, config=self.CFG)

    def test_mismatched_lengths(self):
        with pytest.raises(ConfigError):
            fit_lmgp(np.zeros((5, 1)), np.zeros(4), np.ones((5, 1)),
                     config=self.CFG)


class TestCollapseProperty:
    def test_zero_map_equals_pooled_gp(self):
        x, y, t = _two_source_data(30, seed=6, bias=0.4)
        gp = fit_gp(x, y, GpConfig(n_starts=3, seed=0))
        spec = spec_from_levels(t)
        cfg = LmgpConfig(n_starts=1, seed=0, scale_var=None)
        model = lmgp._assemble(x, t, y, spec, gp.w,
                               np.zeros((2, 2)), cfg)
        xs = np.linspace(0.05, 1.95, 9)[:, None]
        for lev in (1, 2):
            ts = np.full((9, 1), lev, dtype=int)
            mean_l, var_l = predict_lmgp(model, xs, ts)
            mean_g, var_g = predict(gp, xs)
            np.testing.assert_allclose(mean_l, mean_g, atol=1e-8)
            np.testing.assert_allclose(var_l, var_g, atol=1e-8)


class TestPredict:
    def test_training_point_replay_zero_nugget(self):
        x, y, t = _two_source_data(24, seed=8, bias=0.7)
        model = fit_lmgp(x, y, t,
                         config=LmgpConfig(n_starts=3, seed=0, nugget=0.0))
        mean, var = predict_lmgp(model, x[:6], t[:6])
        span = y.max() - y.min()
        np.testing.assert_allclose(mean, y[:6], atol=1e-6 * span)
        assert np.all(var >= 0)

    def test_unseen_combination_rejected(self):
        x, y, t = _two_source_data(20, seed=9)
        spec = CategoricalSpec((("src", 3),))
        model = fit_lmgp(x, y, t, spec=spec,
                         config=LmgpConfig(n_starts=2, seed=0))
        with pytest.raises(ConfigError):
            predict_lmgp(model, x[0], np.array([3]))

    def test_information_pooling_variance(self):
        rng = np.random.default_rng(10)
        x_hi = np.array([[0.1], [1.0], [1.9]])
        y_hi = np.sin(2.5 * x_hi[:, 0])
        x_lo = rng.uniform(0.0, 2.0, size=(40, 1))
        y_lo = np.sin(2.5 * x_lo[:, 0])
        x = np.vstack([x_hi, x_lo])
        y = np.concatenate([y_hi, y_lo])
        t = np.vstack([np.full((3, 1), 2), np.full((40, 1), 1)])
        model = fit_lmgp(x, y, t, config=LmgpConfig(n_starts=3, seed=0))
        gp = fit_gp(x_hi, y_hi, GpConfig(n_starts=3, seed=0))
        xq = np.array([[0.55]])
        _, var_l = predict_lmgp(model, xq, np.array([[2]]))
        _, var_g = predict(gp, xq)
        assert var_l[0] < var_g[0]

    def test_paper_setting_eight_latent_points_and_replay(self):
        rng = np.random.default_rng(11)
        rows = []
        for t1 in (1, 2, 3, 4):
            for t2 in (1, 2):
                n = 4
                xs = rng.uniform(size=(n, 6))
                scale = 1.12e8 if t2 == 1 else 3.7e6
                ys = scale * (0.8 + 0.2 * np.sin(3 * xs[:, 0])
                              + 0.02 * t1)
                for i in range(n):
                    rows.append((xs[i], t1, t2, ys[i]))
        anchor_x = np.array([0.021, 13.0, 1.14, 28.1, 54.7, 0.015])
        anchor_x_n = anchor_x / np.array([0.03, 30, 3, 50, 100, 0.03])
        rows.append((anchor_x_n, 4, 1, 1.12e8))
        x = np.array([r[0] for r in rows])
        t = np.array([[r[1], r[2]] for r in rows])
        y = np.array([r[3] for r in rows])
        model = fit_lmgp(x, y, t,
                         config=LmgpConfig(n_starts=3, seed=0, nugget=0.0))
        combos, z = latent_positions(model)
        assert combos.shape == (8, 2)
        assert z.shape == (8, 2)
        mean, _ = predict_lmgp(model, anchor_x_n, np.array([4, 1]))
        span = y[t[:, 1] == 1].max() - y[t[:, 1] == 1].min()
        assert abs(mean - 1.12e8) <= 1e-6 * span


class TestSerialization:
    def test_round_trip(self, tmp_path):
        x, y, t = _two_source_data(26, seed=12, bias=0.3)
        model = fit_lmgp(x, y, t, config=LmgpConfig(n_starts=2, seed=0))
        path = tmp_path / "model.json"
        save_lmgp(model, path)
        loaded = load_lmgp(path)
        xs = np.linspace(0.1, 1.8, 6)[:, None]
        ts = np.vstack([np.ones((3, 1)), np.full((3, 1), 2)]).astype(int)
        m1, v1 = predict_lmgp(model, xs, ts)
        m2, v2 = predict_lmgp(loaded, xs, ts)
        np.testing.assert_allclose(m1, m2, rtol=0, atol=1e-12 * np.abs(m1).max())
        np.testing.assert_allclose(v1, v2, rtol=0, atol=1e-12 * max(v1.max(), 1e-30))

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other", "version": 1}\n')
        with pytest.raises(ConfigError):
            load_lmgp(path)


class TestOutputScaling:
    def test_per_response_groups(self):
        rng = np.random.default_rng(13)
        n = 20
        x = rng.uniform(size=(n, 2))
        t1 = rng.integers(1, 3, size=n)
        t2 = np.tile([1, 2], n // 2)
        y = np.where(t2 == 1, 1e8 * (1 + 0.1 * x[:, 0]),
                     3e6 * (1 + 0.1 * x[:, 1]))
        t = np.column_stack([t1, t2])
        model = fit_lmgp(x, y, t, config=LmgpConfig(n_starts=2, seed=0))
        assert model.group_var == 1
        assert model.y_lo.shape == (2,)
        lo1 = y[t2 == 1].min()
        assert model.y_lo[0] == pytest.approx(lo1)
        mean, _ = predict_lmgp(model, x[:4], t[:4])
        assert np.all(mean > 1e5)
