import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlbm import nn
from vlbm.autodiff import ShapeError, Tape, backward, finite_diff, relative_error, tsum

from _oracles import SOFTPLUS_INV_ONE, gaussian_kl_monte_carlo, lstm_reference


def consts(tape, d):
    return {k: tape.constant(v) for k, v in d.items()}


def gaussian(tape, mean, var):
    return nn.DiagGaussian(tape.constant(np.atleast_2d(mean)), tape.constant(np.atleast_2d(var)))


class TestMLP:
    def test_zero_weights_linear_head(self):
        tape = Tape()
        p = nn.init_mlp(np.random.default_rng(0), "f", [3, 4, 2])
        p = {k: np.zeros_like(v) for k, v in p.items()}
        out = nn.mlp_forward(consts(tape, p), "f", tape.constant(np.ones((5, 3))))
        np.testing.assert_array_equal(out.value, np.zeros((5, 2)))

    def test_zero_weights_softplus_head(self):
        tape = Tape()
        p = {k: np.zeros_like(v) for k, v in nn.init_mlp(np.random.default_rng(0), "f", [3, 4, 2]).items()}
        out = nn.mlp_forward(consts(tape, p), "f", tape.constant(np.ones((1, 3))), head="softplus")
        np.testing.assert_allclose(out.value, math.log(2.0), atol=1e-15)

    def test_matches_hand_rolled_chain(self):
        rng = np.random.default_rng(1)
        p = nn.init_mlp(rng, "f", [3, 6, 5, 2])
        p = {k: v + rng.normal(size=v.shape) * 0.1 for k, v in p.items()}
        x = rng.normal(size=(4, 3))
        ref = np.tanh(np.tanh(x @ p["f.W0"] + p["f.b0"]) @ p["f.W1"] + p["f.b1"]) @ p["f.W2"] + p["f.b2"]
        tape = Tape()
        out = nn.mlp_forward(consts(tape, p), "f", tape.constant(x))
        np.testing.assert_allclose(out.value, ref, rtol=1e-13)

    def test_width_mismatch_rejected(self):
        tape = Tape()
        p = nn.init_mlp(np.random.default_rng(0), "f", [3, 2])
        with pytest.raises(ShapeError):
            nn.mlp_forward(consts(tape, p), "f", tape.constant(np.ones((1, 4))))

    def test_stacked_parameters_broadcast(self):
        rng = np.random.default_rng(2)
        p = nn.init_mlp(rng, "f", [3, 4, 2], stack=(5,))
        x = rng.normal(size=(7, 3))
        tape = Tape()
        out = nn.mlp_forward(consts(tape, p), "f", tape.constant(x))
        assert out.shape == (5, 7, 2)
        single = {k: v[2] for k, v in p.items()}
        out2 = nn.mlp_forward(consts(tape, single), "f", tape.constant(x))
        np.testing.assert_allclose(out.value[2], out2.value, rtol=1e-14)


class TestLSTM:
    def test_all_zero_from_rest(self):
        tape = Tape()
        p = {k: np.zeros_like(v) for k, v in nn.init_lstm(np.random.default_rng(0), "c", 3, 4).items()}
        h, c = nn.lstm_step(consts(tape, p), "c", tape.constant(np.zeros((1, 4))), tape.constant(np.zeros((1, 4))),
                            tape.constant(np.ones((1, 3))))
        np.testing.assert_array_equal(h.value, 0.0)
        np.testing.assert_array_equal(c.value, 0.0)

    def test_all_zero_halves_cell(self):
        tape = Tape()
        p = {k: np.zeros_like(v) for k, v in nn.init_lstm(np.random.default_rng(0), "c", 3, 4).items()}
        c0 = np.array([[0.4, -1.0, 2.0, 3.0]])
        h, c = nn.lstm_step(consts(tape, p), "c", tape.constant(np.zeros((1, 4))), tape.constant(c0),
                            tape.constant(np.ones((1, 3))))
        np.testing.assert_allclose(c.value, 0.5 * c0, rtol=1e-15)
        np.testing.assert_allclose(h.value, 0.5 * np.tanh(0.5 * c0), rtol=1e-15)

    def test_matches_independent_cell(self):
        rng = np.random.default_rng(4)
        p = nn.init_lstm(rng, "c", 3, 5)
        x, h0, c0 = rng.normal(size=(6, 3)), rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        tape = Tape()
        h, c = nn.lstm_step(consts(tape, p), "c", tape.constant(h0), tape.constant(c0), tape.constant(x))
        rh, rc = lstm_reference(x, h0, c0, p["c.Wx"], p["c.Wh"], p["c.b"])
        np.testing.assert_allclose(h.value, rh, atol=1e-12)
        np.testing.assert_allclose(c.value, rc, atol=1e-12)

    def test_split_input_equals_concatenated(self):
        rng = np.random.default_rng(5)
        p = nn.init_lstm(rng, "c", 5, 4)
        a, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 3))
        z = np.zeros((2, 4))
        tape = Tape()
        pc = consts(tape, p)
        h1, _ = nn.lstm_step(pc, "c", tape.constant(z), tape.constant(z), [tape.constant(a), tape.constant(b)])
        h2, _ = nn.lstm_step(pc, "c", tape.constant(z), tape.constant(z), tape.constant(np.hstack([a, b])))
        np.testing.assert_allclose(h1.value, h2.value, rtol=1e-14)

    def test_dimension_mismatch(self):
        tape = Tape()
        p = consts(tape, nn.init_lstm(np.random.default_rng(0), "c", 3, 4))
        with pytest.raises(ShapeError):
            nn.lstm_step(p, "c", tape.constant(np.zeros((1, 3))), tape.constant(np.zeros((1, 3))),
                         tape.constant(np.ones((1, 3))))
        with pytest.raises(ShapeError):
            nn.lstm_step(p, "c", tape.constant(np.zeros((1, 4))), tape.constant(np.zeros((1, 4))),
                         tape.constant(np.ones((1, 2))))


class TestGaussianHead:
    def _zero_head(self, tape, var_bias=0.0):
        rng = np.random.default_rng(0)
        p = {**nn.init_mlp(rng, "g.mu", [3, 4, 2]), **nn.init_mlp(rng, "g.var", [3, 4, 2])}
        p = {k: np.zeros_like(v) for k, v in p.items()}
        p["g.var.b1"][...] = var_bias
        return nn.gaussian_head(consts(tape, p), "g", tape.constant(np.ones((1, 3))))

    def test_zero_weights(self):
        d = self._zero_head(Tape())
        np.testing.assert_array_equal(d.mean.value, 0.0)
        np.testing.assert_allclose(d.var.value, math.log(2.0), atol=1e-15)

    def test_unit_variance_bias(self):
        d = self._zero_head(Tape(), SOFTPLUS_INV_ONE)
        np.testing.assert_allclose(d.var.value, 1.0, rtol=1e-14)

    def test_variances_positive_for_any_input(self):
        rng = np.random.default_rng(1)
        p = {**nn.init_mlp(rng, "g.mu", [3, 8, 2]), **nn.init_mlp(rng, "g.var", [3, 8, 2])}
        tape = Tape()
        d = nn.gaussian_head(consts(tape, p), "g", tape.constant(100 * rng.normal(size=(50, 3))))
        assert np.all(d.var.value > 0)


class TestReparam:
    def test_zero_noise_gives_mean(self):
        tape = Tape()
        d = gaussian(tape, [1.5, -2.0], [3.0, 0.1])
        np.testing.assert_array_equal(nn.reparam_sample(d, np.zeros((1, 2))).value, [[1.5, -2.0]])

    def test_scale(self):
        tape = Tape()
        d = gaussian(tape, [0.0], [4.0])
        np.testing.assert_allclose(nn.reparam_sample(d, np.ones((1, 1))).value, [[2.0]], rtol=1e-8)

    def test_gradient_wrt_mean_is_identity(self):
        noise = np.array([[0.3, -1.2]])

        def f(t):
            tp = Tape(record=False)
            return float(np.sum(nn.reparam_sample(nn.DiagGaussian(tp.constant(t["mu"]), tp.constant(t["var"])),
                                                  noise).value))

        vals = {"mu": np.array([[0.2, 0.4]]), "var": np.array([[1.5, 0.7]])}
        tape = Tape()
        p = tape.leaves(vals)
        g = backward(tape, tsum(nn.reparam_sample(nn.DiagGaussian(p["mu"], p["var"]), noise)))
        np.testing.assert_allclose(g["mu"], [[1.0, 1.0]])
        fd = finite_diff(f, vals)
        assert relative_error(g["mu"], fd["mu"]) < 1e-8
        assert relative_error(g["var"], fd["var"]) < 1e-7

    def test_length_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            nn.reparam_sample(gaussian(tape, [0.0, 1.0], [1.0, 1.0]), np.zeros((1, 3)))

    def test_sample_moments(self):
        rng = np.random.default_rng(7)
        mu, var = np.array([0.5, -1.0, 2.0]), np.array([0.3, 2.0, 1.0])
        n = 100_000
        tape = Tape(record=False)
        d = nn.DiagGaussian(tape.constant(np.tile(mu, (n, 1))), tape.constant(np.tile(var, (n, 1))))
        x = nn.reparam_sample(d, rng.standard_normal((n, 3))).value
        se_mean = np.sqrt(var / n)
        se_var = var * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(x.mean(0) - mu) < 3 * se_mean)
        assert np.all(np.abs(x.var(0, ddof=1) - var) < 3 * se_var)


class TestLogProbAndKL:
    def test_standard_normal_at_zero(self):
        tape = Tape()
        lp = nn.gaussian_log_prob(gaussian(tape, [0.0], [1.0]), np.zeros((1, 1)))
        np.testing.assert_allclose(float(lp.value), -0.5 * math.log(2 * math.pi), rtol=1e-8)
        assert float(lp.value) == pytest.approx(-0.91894, abs=1e-5)

    def test_at_mean(self):
        tape = Tape()
        v = np.array([0.5, 3.0])
        lp = nn.gaussian_log_prob(gaussian(tape, [1.0, 2.0], v), np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(float(lp.value), -0.5 * np.sum(np.log(2 * math.pi * v)), rtol=1e-8)

    def test_two_dim_factorises(self):
        tape = Tape()
        x = np.array([[0.3, -0.8]])
        both = float(nn.gaussian_log_prob(gaussian(tape, [0.1, 0.2], [0.5, 2.0]), x).value)
        one = float(nn.gaussian_log_prob(gaussian(tape, [0.1], [0.5]), x[:, :1]).value)
        two = float(nn.gaussian_log_prob(gaussian(tape, [0.2], [2.0]), x[:, 1:]).value)
        assert both == pytest.approx(one + two, abs=1e-14)

    def test_dimension_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            nn.gaussian_log_prob(gaussian(tape, [0.0], [1.0]), np.zeros((1, 2)))
        with pytest.raises(ShapeError):
            nn.gaussian_kl(gaussian(tape, [0.0], [1.0]), gaussian(tape, [0.0, 0.0], [1.0, 1.0]))

    def test_kl_known_values(self):
        tape = Tape()
        assert float(nn.gaussian_kl(gaussian(tape, [0.0], [1.0]), gaussian(tape, [0.0], [1.0])).value) == 0.0
        kl = nn.gaussian_kl(gaussian(tape, [1.0], [1.0]), gaussian(tape, [0.0], [1.0]))
        # the 1e-8 variance floor shifts the value by ~5e-9
        assert float(kl.value) == pytest.approx(0.5, abs=1e-7)

    def test_kl_against_monte_carlo(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            mq, mp = 0.5 * rng.normal(size=2), 0.5 * rng.normal(size=2)
            vq, vp = rng.uniform(0.5, 1.5, 2), rng.uniform(0.5, 1.5, 2)
            tape = Tape()
            kl = float(nn.gaussian_kl(gaussian(tape, mq, vq), gaussian(tape, mp, vp)).value)
            assert abs(kl - gaussian_kl_monte_carlo(mq, vq, mp, vp, rng)) < 0.01

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(0.01, 10), min_size=4, max_size=4))
    def test_kl_non_negative_and_zero_on_self(self, means, variances):
        tape = Tape()
        q = gaussian(tape, means[:2], variances[:2])
        p = gaussian(tape, means[2:], variances[2:])
        assert float(nn.gaussian_kl(q, p).value) >= -1e-12
        assert abs(float(nn.gaussian_kl(q, q).value)) < 1e-12


class TestBernoulli:
    def test_zero_head_is_half(self):
        tape = Tape()
        p = {k: np.zeros_like(v) for k, v in nn.init_mlp(np.random.default_rng(0), "d", [3, 4, 1]).items()}
        mean = nn.bernoulli_head(consts(tape, p), "d", tape.constant(np.ones((2, 3)))).mean
        np.testing.assert_array_equal(mean.value, 0.5)
        for y in (0.0, 1.0):
            lp = nn.bernoulli_log_prob(mean, np.full((2, 1), y))
            assert float(lp.value) == pytest.approx(2 * math.log(0.5), abs=1e-12)

    @pytest.mark.parametrize("y, expected", [(1.0, -0.1054), (0.0, -2.3026)])
    def test_direct_formula(self, y, expected):
        tape = Tape()
        lp = nn.bernoulli_log_prob(tape.constant([[0.9]]), np.array([[y]]))
        assert float(lp.value) == pytest.approx(expected, abs=1e-4)

    def test_confident_head_stays_finite(self):
        tape = Tape()
        lp = nn.bernoulli_log_prob(tape.constant([[1.0]]), np.array([[0.0]]))
        assert float(lp.value) == pytest.approx(math.log(nn.BERNOULLI_CLIP), rel=1e-6)

    def test_rejects_non_binary_outcome(self):
        tape = Tape()
        with pytest.raises(ValueError):
            nn.bernoulli_log_prob(tape.constant([[0.5]]), np.array([[0.5]]))


class TestInit:
    def test_same_seed_identical(self):
        blocks = [("mlp", "a", [4, 3, 2]), ("lstm", "b", 3, 5)]
        p1, p2 = nn.init_weights(3, blocks), nn.init_weights(3, blocks)
        for k in p1:
            np.testing.assert_array_equal(p1[k], p2[k])

    def test_different_seeds_differ(self):
        blocks = [("mlp", "a", [4, 3, 2])]
        assert not np.array_equal(nn.init_weights(1, blocks)["a.W0"], nn.init_weights(2, blocks)["a.W0"])

    def test_fan_in_bound_and_biases(self):
        p = nn.init_weights(0, [("mlp", "a", [100, 7]), ("lstm", "c", 60, 40)])
        assert np.all(np.abs(p["a.W0"]) <= 0.1)
        np.testing.assert_array_equal(p["a.b0"], 0.0)
        b = p["c.b"][0]
        np.testing.assert_array_equal(b[40:80], 1.0)
        np.testing.assert_array_equal(np.r_[b[:40], b[80:]], 0.0)

    def test_unknown_block(self):
        with pytest.raises(ValueError):
            nn.init_weights(0, [("conv", "x", 3)])


class TestRNGStream:
    def test_same_seed_same_draws(self):
        a, b = nn.RNGStream(5), nn.RNGStream(5)
        np.testing.assert_array_equal(a.normal((3, 2)), b.normal((3, 2)))
        assert a.uniform() == b.uniform()

    def test_spawned_streams_are_independent_but_reproducible(self):
        s1 = [s.normal(4) for s in nn.RNGStream(1).spawn(3)]
        s2 = [s.normal(4) for s in nn.RNGStream(1).spawn(3)]
        for x, y in zip(s1, s2):
            np.testing.assert_array_equal(x, y)
        assert not np.array_equal(s1[0], s1[1])
