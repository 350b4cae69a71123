import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlbm import envs, model as m, nn
from vlbm.autodiff import ShapeError, Tape

from _oracles import (SOFTPLUS_INV_ONE, model_grad_error, perturbed_params, random_trajectories,
                      rigged_constant_head, rsa_reference, small_config)


def consts(tape, d):
    return {k: tape.constant(v) for k, v in d.items()}


def gate(v, eps=1e-8):
    tape = Tape()
    return m.branch_weights(tape.constant(np.asarray(v, float).reshape(-1, 1, 1)), eps).value.reshape(-1)


class TestBranchWeights:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(gate([1, 1]), [0.5, 0.5], atol=1e-8)

    def test_one_hot(self):
        np.testing.assert_allclose(gate([1, 0, 0]), [1, 0, 0], atol=1e-8)

    def test_large_eps(self):
        np.testing.assert_allclose(gate([2, 1], eps=1.0), [4 / 6, 1 / 6], rtol=1e-14)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            gate([1, 1], eps=0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.floats(0.1, 10))
    def test_gate_invariants(self, v, scale):
        v = np.asarray(v)
        w = gate(v)
        s2 = np.sum(v ** 2)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(s2 / (1e-8 + s2), abs=1e-12)
        if s2 > 1e-3:
            assert np.argmax(w) == np.argmax(v ** 2)
            # scale invariance holds up to the relative size of eps
            tol = 2e-8 / min(s2, s2 * scale ** 2)
            np.testing.assert_allclose(gate(scale * v), w, atol=tol)


class TestMixtures:
    def _heads(self, tape, means, variances):
        mu = np.asarray(means, float).reshape(len(means), 1, -1)
        var = np.asarray(variances, float).reshape(len(variances), 1, -1)
        return nn.DiagGaussian(tape.constant(mu), tape.constant(var))

    def test_single_branch_identity(self):
        tape = Tape()
        d = m.mix_gaussian(self._heads(tape, [[0.3, -1]], [[2.0, 0.5]]), tape.constant(np.ones((1, 1, 1))))
        np.testing.assert_array_equal(d.mean.value, [[0.3, -1]])
        np.testing.assert_array_equal(d.var.value, [[2.0, 0.5]])

    def test_two_equal_branches(self):
        tape = Tape()
        d = m.mix_gaussian(self._heads(tape, [[0], [2]], [[1], [1]]), tape.constant(np.full((2, 1, 1), 0.5)))
        np.testing.assert_allclose(d.mean.value, [[1.0]])
        np.testing.assert_allclose(d.var.value, [[0.5]])

    def test_one_hot_selects_branch_exactly(self):
        tape = Tape()
        heads = self._heads(tape, [[1.5, 2], [7, 8], [9, 9]], [[0.2, 0.3], [5, 5], [6, 6]])
        d = m.mix_gaussian(heads, tape.constant(np.array([1.0, 0, 0]).reshape(3, 1, 1)))
        np.testing.assert_array_equal(d.mean.value, [[1.5, 2]])
        np.testing.assert_array_equal(d.var.value, [[0.2, 0.3]])

    def test_weight_count_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            m.mix_gaussian(self._heads(tape, [[0], [1]], [[1], [1]]), tape.constant(np.ones((3, 1, 1))))

    @pytest.mark.parametrize("w, means, expected", [([1.0], [0.3], 0.3), ([0.5, 0.5], [0.2, 0.6], 0.4),
                                                     ([1.0, 0.0], [0.9, 0.1], 0.9)])
    def test_bernoulli_mixture(self, w, means, expected):
        tape = Tape()
        out = m.mix_bernoulli(tape.constant(np.reshape(means, (-1, 1, 1))), tape.constant(np.reshape(w, (-1, 1, 1))))
        assert out.value.item() == pytest.approx(expected, abs=1e-6)


class TestRSA:
    def _rsa(self, a, b):
        tape = Tape()
        return float(m.rsa(tape.constant(np.atleast_2d(a)), tape.constant(np.atleast_2d(b))).value)

    def test_identical_is_zero(self):
        x = np.random.default_rng(0).normal(size=(5, 6))
        assert abs(self._rsa(x, x)) < 1e-12

    def test_common_shift_is_zero(self):
        x = np.random.default_rng(1).normal(size=(5, 6))
        assert abs(self._rsa(x + 3.7, x)) < 1e-12
        assert abs(self._rsa(x, x - 1.25)) < 1e-12

    def test_two_coordinate_hand_case(self):
        assert self._rsa([0.0, 1.0], [0.0, 0.0]) == 1.0

    def test_matches_pair_enumeration(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
        assert self._rsa(a, b) == pytest.approx(rsa_reference(a, b), rel=1e-12)

    def test_positive_when_patterns_differ_and_permutation_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        perm = rng.permutation(5)
        assert self._rsa(a, b) > 0
        assert self._rsa(a[:, perm], b[:, perm]) == pytest.approx(self._rsa(a, b), rel=1e-12)

    def test_width_one_rejected(self):
        with pytest.raises(ValueError):
            self._rsa([[1.0]], [[2.0]])

    def test_mse_variant(self):
        tape = Tape()
        a, b = np.array([[1.0, 3.0]]), np.array([[0.0, 0.0]])
        assert float(m.mse_alignment(tape.constant(a), tape.constant(b)).value) == 5.0

    def test_row_weights_average_per_trajectory(self):
        trajs = random_trajectories(np.random.default_rng(0), lengths=(4, 2), terminated=(False, False))
        batch = m.make_batch(trajs, m.Normalizer.identity(2), 1)
        w = m.alignment_row_weights(batch).reshape(batch.T, batch.N)
        np.testing.assert_allclose(w[:, 0], 1 / 8)
        np.testing.assert_allclose(w[:, 1], [1 / 4, 1 / 4, 0, 0])


class TestEncoderDecoder:
    def test_zero_length_trajectory(self):
        cfg = small_config()
        p = m.init_params(cfg, 0)
        tr = envs.Trajectory(np.zeros((1, 2)), np.zeros((0, 1)), np.zeros(0))
        batch = m.make_batch([tr], m.Normalizer.identity(2), 1)
        tape = Tape()
        enc = m.encode(consts(tape, p.tensors), cfg, batch, m.Noise.zeros(cfg, 1, 0))
        assert enc.z.shape == (1, 3) and enc.h is None and enc.post is None

    def test_zero_noise_gives_posterior_means(self):
        cfg = small_config()
        p = perturbed_params(cfg)
        batch = m.make_batch(random_trajectories(np.random.default_rng(0)), m.Normalizer.identity(2), 1)
        tape = Tape()
        enc = m.encode(consts(tape, p.tensors), cfg, batch, m.Noise.zeros(cfg, batch.N, batch.T))
        np.testing.assert_array_equal(enc.z_steps[0].value, enc.q0.mean.value)
        np.testing.assert_array_equal(enc.z.value[batch.N:], enc.post.mean.value)

    def test_encoding_is_deterministic(self):
        cfg = small_config()
        p = perturbed_params(cfg)
        batch = m.make_batch(random_trajectories(np.random.default_rng(0)), m.Normalizer.identity(2), 1)
        outs = []
        for _ in range(2):
            noise = m.Noise.draw(np.random.default_rng(9), cfg, batch.N, batch.T)
            tape = Tape()
            outs.append(m.encode(consts(tape, p.tensors), cfg, batch, noise).z.value)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_width_mismatch_rejected(self):
        cfg = small_config()
        p = m.init_params(cfg, 0)
        tr = envs.Trajectory(np.zeros((2, 3)), np.zeros((1, 1)), np.zeros(1))
        batch = m.make_batch([tr], m.Normalizer.identity(3), 1)
        with pytest.raises(ShapeError):
            m.encode(consts(Tape(), p.tensors), cfg, batch, m.Noise.zeros(cfg, 1, 1))

    def _step(self, tensors, cfg, noise):
        tape = Tape()
        p = consts(tape, {k: v for k, v in tensors.items() if k.startswith("dec.")})
        B, M, l = cfg.branches, cfg.hidden, cfg.latent_dim
        zero = lambda w: tape.constant(np.zeros((B, 1, w)))
        return m.decode_step(p, cfg, zero(M), zero(M), zero(l), np.ones((1, 1)), noise)

    def test_zero_weight_branch_heads(self):
        cfg = small_config()
        t = {k: np.zeros_like(v) for k, v in m.init_params(cfg, 0).tensors.items()}
        step = self._step(t, cfg, np.zeros((2, 1, 3)))
        np.testing.assert_array_equal(step.state.mean.value, 0.0)
        np.testing.assert_allclose(step.state.var.value, math.log(2.0), atol=1e-15)

    def test_zero_noise_latent_is_prior_mean_and_widths(self):
        cfg = small_config()
        step = self._step(perturbed_params(cfg).tensors, cfg, np.zeros((2, 1, 3)))
        np.testing.assert_array_equal(step.z.value, step.prior.mean.value)
        assert step.h_tilde.shape[-1] == step.h.shape[-1] == cfg.hidden
        assert step.state.mean.shape == (2, 1, 2) and step.term_mean.shape == (2, 1, 1)


class TestObjectives:
    def _terms(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        p = perturbed_params(cfg, seed)
        batch = m.make_batch(random_trajectories(rng), m.Normalizer.identity(2), 1)
        noise = m.Noise.draw(rng, cfg, batch.N, batch.T)
        tape = Tape(record=False)
        return m.objective_terms(consts(tape, p.tensors), cfg, batch, noise)

    def test_elbo_closed_form_single_state(self):
        cfg1 = m.ModelConfig(1, 1, kind="vlm", branches=1, latent_dim=1, hidden=4, mlp_hidden=(5, 4), post_hidden=4,
                             termination=False)
        p1 = m.init_params(cfg1, 0)
        t1 = {k: v.copy() for k, v in p1.tensors.items()}
        for prefix, value in [("enc.init.mu", 0.0), ("enc.init.var", SOFTPLUS_INV_ONE),
                              ("dec.state.mu", 0.0), ("dec.state.var", SOFTPLUS_INV_ONE)]:
            rigged_constant_head(t1, prefix, value)
        tr = envs.Trajectory(np.zeros((1, 1)), np.zeros((0, 1)), np.zeros(0))
        batch = m.make_batch([tr], m.Normalizer.identity(1), 1)
        tape = Tape()
        val = m.elbo(consts(tape, t1), cfg1, batch, m.Noise.zeros(cfg1, 1, 0))
        assert float(val.value[0]) == pytest.approx(-0.91894, abs=1e-5)
        assert float(val.value[0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-7)

    @pytest.mark.parametrize("kind", ["vlm", "vlbm"])
    def test_kl_terms_non_negative_and_elbo_bounded(self, kind):
        terms = self._terms(small_config(kind=kind))
        assert np.all(terms["kl0"].value >= 0) and np.all(terms["kl"].value >= 0)
        recon = terms["log_p_state"].value + terms["log_p_reward"].value + terms["log_p_term"].value
        assert np.all(terms["elbo"].value <= recon + 1e-12)

    def test_vlm_is_elbo_minus_weighted_alignment(self):
        cfg = small_config(kind="vlm")
        t = self._terms(cfg)
        assert float(t["objective"].value) == pytest.approx(float(t["elbo"].value[0] - cfg.C * t["rsa"].value[0]),
                                                            rel=1e-13)

    def test_vlm_without_alignment_is_elbo(self):
        t = self._terms(small_config(kind="vlm", rsa="none"))
        assert "rsa" not in t
        assert float(t["objective"].value) == float(t["elbo"].value[0])

    def test_vlbm_combination(self):
        cfg = small_config(kind="vlbm")
        t = self._terms(cfg)
        mixed = t["mixed_state"].value + t["mixed_reward"].value + t["mixed_term"].value
        expected = mixed + cfg.C2 * t["elbo"].value.sum() - cfg.C1 * t["rsa"].value.sum()
        assert float(t["objective"].value) == pytest.approx(float(expected), rel=1e-13)

    def test_objective_kind_guards(self):
        with pytest.raises(ValueError):
            m.vlm_objective({}, small_config(kind="vlbm"), None, None)
        with pytest.raises(ValueError):
            m.vlbm_objective({}, small_config(kind="vlm"), None, None)

    @pytest.mark.parametrize("kind, rsa, key", [("vlm", "none", "elbo"), ("vlm", "pairwise", "rsa"),
                                                ("vlm", "mse", "rsa"), ("vlm", "pairwise", "objective"),
                                                ("vlm", "mse", "objective"), ("vlbm", "pairwise", "objective")])
    def test_gradients_match_finite_differences(self, kind, rsa, key):
        assert model_grad_error(small_config(kind=kind, rsa=rsa), key) < 1e-4


class TestConfig:
    def test_single_branch_model_rejects_branches(self):
        with pytest.raises(ValueError):
            m.ModelConfig(2, 1, kind="vlm", branches=3)

    @pytest.mark.parametrize("kw", [{"kind": "gru"}, {"rsa": "cosine"}, {"C1": -1.0}, {"eps": 0.0},
                                    {"branch_init": "zeros"}, {"branches": 0}])
    def test_invalid_values(self, kw):
        with pytest.raises(ValueError):
            m.ModelConfig(2, 1, **kw)

    def test_dict_round_trip(self):
        cfg = small_config()
        assert m.ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_normalizer_fit(self):
        trajs = random_trajectories(np.random.default_rng(0))
        norm = m.Normalizer.fit(trajs)
        S = np.concatenate([t.states for t in trajs])
        np.testing.assert_allclose(norm.state_mean, S.mean(0))
        assert m.Normalizer.from_dict(norm.to_dict()).reward_std == norm.reward_std


class TestTraining:
    def _data(self, n=6):
        spec = envs.make_env("LineMass", horizon=5)
        return envs.collect_dataset(spec, envs.behavior_policy(spec), n, 0)

    def test_zero_iterations_leaves_parameters(self):
        cfg = small_config()
        p0 = m.init_params(cfg, 0)
        p1, log_ = m.train(p0, self._data(), m.TrainConfig(max_iter=0), np.random.default_rng(0))
        assert log_.objective == []
        for k in p0.tensors:
            np.testing.assert_array_equal(p0.tensors[k], p1.tensors[k])

    def test_deterministic(self):
        cfg = small_config(termination=False)
        tc = m.TrainConfig(max_iter=4, batch_size=3, lr=1e-2)
        a, la = m.train(m.init_params(cfg, 1), self._data(), tc, np.random.default_rng(5))
        b, lb = m.train(m.init_params(cfg, 1), self._data(), tc, np.random.default_rng(5))
        assert la.objective == lb.objective and len(la.objective) == 4
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])
        assert la.lr == [1e-2 * 0.997 ** i for i in range(4)]
        assert a.meta["branch_weights"] == pytest.approx(list(m.branch_weights_array(a)))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            m.train(m.init_params(small_config(), 0), [], m.TrainConfig(max_iter=1), np.random.default_rng(0))

    def test_divergence_reports_iteration(self):
        cfg = small_config(termination=False)
        p = m.init_params(cfg, 0)
        rigged_constant_head(p.tensors, "dec.state.mu", 1e200)  # squared error overflows
        with pytest.raises(m.TrainingDivergedError) as err:
            m.train(p, self._data(), m.TrainConfig(max_iter=3), np.random.default_rng(0))
        assert err.value.iteration == 0

    def test_l2_skips_biases_and_gate(self):
        assert m._l2_applies("dec.state.mu.W0") and m._l2_applies("enc.lstm.Wx")
        assert not m._l2_applies("dec.state.mu.b0") and not m._l2_applies("gate.v")


class TestRollout:
    def _rigged(self, termination=False, reward=1.0):
        cfg = small_config(termination=termination)
        p = m.init_params(cfg, 0)
        rigged_constant_head(p.tensors, "dec.reward.mu", reward)
        rigged_constant_head(p.tensors, "dec.reward.var", -40.0)
        if termination:
            rigged_constant_head(p.tensors, "dec.term", 40.0)
        return p

    def _policy(self):
        return envs.LinearGaussianPolicy(np.zeros((1, 2)), np.zeros(1), 0.0, "zero")

    def test_geometric_sum(self):
        res = m.rollout(self._rigged(), self._policy(), 3, 0.5, 4, np.random.default_rng(0))
        np.testing.assert_allclose(res.returns, 1.75, atol=1e-7)
        assert res.estimate == pytest.approx(1.75, abs=1e-7)
        np.testing.assert_array_equal(res.lengths, 3)

    def test_zero_discount_is_first_reward(self):
        res = m.rollout(self._rigged(reward=-0.3), self._policy(), 10, 0.0, 3, np.random.default_rng(0))
        np.testing.assert_allclose(res.returns, -0.3, atol=1e-7)

    def test_immediate_termination(self):
        res = m.rollout(self._rigged(termination=True), self._policy(), 10, 0.9, 5, np.random.default_rng(0))
        np.testing.assert_allclose(res.returns, 1.0, atol=1e-7)
        np.testing.assert_array_equal(res.lengths, 1)

    def test_deterministic_and_mean_of_episodes(self):
        p = perturbed_params(small_config())
        pol = envs.pd_policy(envs.make_env("LineMass"), 1.0, sigma=0.2)
        a = m.rollout(p, pol, 6, 0.99, 7, np.random.default_rng(3))
        b = m.rollout(p, pol, 6, 0.99, 7, np.random.default_rng(3))
        np.testing.assert_array_equal(a.returns, b.returns)
        assert len(a.returns) == 7 and a.estimate == pytest.approx(a.returns.mean(), rel=1e-15)

    def test_one_hot_weights_ignore_other_branches(self):
        p = perturbed_params(small_config())
        q = p.copy()
        for k, v in q.tensors.items():
            if k.startswith("dec.") and k != "dec.init.h":
                v[1] += 5.0
        pol = envs.pd_policy(envs.make_env("LineMass"), 1.0, sigma=0.2)
        w = np.array([1.0, 0.0])
        a = m.rollout(p, pol, 4, 0.9, 3, np.random.default_rng(1), weights=w)
        b = m.rollout(q, pol, 4, 0.9, 3, np.random.default_rng(1), weights=w)
        np.testing.assert_allclose(a.returns, b.returns, rtol=1e-12)

    def test_guards(self):
        p = perturbed_params(small_config())
        with pytest.raises(ShapeError):
            m.rollout(p, envs.LinearGaussianPolicy(np.zeros((1, 3)), np.zeros(1)), 3, 0.9, 2,
                      np.random.default_rng(0))
        with pytest.raises(ValueError):
            m.rollout(p, self._policy(), 3, 1.0, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            m.rollout(p, self._policy(), 3, 0.9, 0, np.random.default_rng(0))


class TestLatentsAndCheckpoints:
    def test_empty_export_writes_header_only(self, tmp_path):
        p = m.init_params(small_config(), 0)
        rows = m.export_latents(p, [])
        m.write_latents_csv(rows, 3, tmp_path / "z.csv")
        assert (tmp_path / "z.csv").read_text().strip() == "policy_id,t,z_0,z_1,z_2"

    def test_one_row_per_visited_state_and_reproducible(self, tmp_path):
        p = perturbed_params(small_config())
        trajs = random_trajectories(np.random.default_rng(0), lengths=(4,), terminated=(False,))
        rows = m.export_latents(p, trajs, ["pi"])
        assert len(rows) == 5 and [r[1] for r in rows] == [0, 1, 2, 3, 4]
        m.write_latents_csv(rows, 3, tmp_path / "a.csv")
        m.write_latents_csv(m.export_latents(p, trajs, ["pi"]), 3, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_checkpoint_round_trip(self, tmp_path):
        p = perturbed_params(small_config())
        p.norm = m.Normalizer(np.array([1.0, 2.0]), np.array([0.5, 3.0]), -0.7, 2.5)
        m.save_checkpoint(p, tmp_path / "ck.json")
        q = m.load_checkpoint(tmp_path / "ck.json")
        assert q.config == p.config and q.norm.reward_mean == -0.7
        for k in p.tensors:
            np.testing.assert_array_equal(p.tensors[k], q.tensors[k])
        meta = json.loads((tmp_path / "ck.json").read_text())["meta"]
        assert meta["B"] == 2 and meta["l"] == 3 and meta["M"] == 4 and len(meta["branch_weights"]) == 2

    def test_foreign_checkpoint_rejected(self, tmp_path):
        (tmp_path / "x.json").write_text(json.dumps({"meta": {"model_kind": "ar"}, "tensors": {}}))
        with pytest.raises(ValueError):
            m.load_checkpoint(tmp_path / "x.json")


class TestEnsembleStacking:
    def test_single_member_matches_plain_rollout(self):
        cfg = small_config(kind="vlm")
        p = perturbed_params(cfg)
        pol = envs.pd_policy(envs.make_env("LineMass"), 2.0)
        a = m.rollout(p, pol, 5, 0.9, 4, np.random.default_rng(0))
        b = m.rollout(m.stack_members([p]), pol, 5, 0.9, 4, np.random.default_rng(0))
        np.testing.assert_allclose(a.returns, b.returns, rtol=1e-14)

    def test_identical_members_scale_variance(self):
        cfg = small_config(kind="vlm")
        p = perturbed_params(cfg)
        B = 4
        ens = m.stack_members([p] * B)
        w = m.branch_weights_array(ens)
        np.testing.assert_allclose(w, 1 / B)
        tape = Tape()
        z = tape.constant(np.zeros((B, 1, 3)))
        heads = nn.gaussian_head(consts(tape, ens.tensors), "dec.state", z)
        mixed = m.mix_gaussian(heads, tape.constant(w.reshape(B, 1, 1)))
        single = nn.gaussian_head(consts(tape, p.tensors), "dec.state", tape.constant(np.zeros((1, 1, 3))))
        np.testing.assert_allclose(mixed.mean.value, single.mean.value[0], rtol=1e-13)
        np.testing.assert_allclose(mixed.var.value, single.var.value[0] / B, rtol=1e-13)

    def test_empty_member_list(self):
        with pytest.raises(ValueError):
            m.stack_members([])
