"""Variational latent branching model: encoder, branched decoder, objectives, training, rollout.

Shapes used throughout: a minibatch of ``N`` trajectories padded to ``T`` steps is laid
out time-major, so per-step quantities for the whole batch are row blocks of height
``N`` (``(T+1)*N`` rows for states, ``T*N`` rows for transitions). Decoder parameters
carry a leading branch axis of size ``B``; every per-branch quantity therefore has
shape ``(B, rows, width)``.

The single-branch, ungated configuration is the plain variational latent model (VLM);
its RSA variants are selected with ``ModelConfig.rsa``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .autodiff import (AdamState, NonFiniteError, ShapeError, Tape, Tensor, adam_step, backward, concat,
                       exp, log, lr_schedule, square, tsum)
from .envs import Dataset, LinearGaussianPolicy, Trajectory

logger = logging.getLogger(__name__)

MODEL_KINDS = ("vlm", "vlbm", "ensemble")
RSA_KINDS = ("none", "pairwise", "mse")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, cause: str = ""):
        self.iteration = iteration
        super().__init__(f"non-finite objective at iteration {iteration}" + (f" ({cause})" if cause else ""))


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int
    action_dim: int
    kind: str = "vlbm"
    latent_dim: int = 16
    hidden: int = 64                  # LSTM width M, shared by h and the mapped h~
    mlp_hidden: tuple[int, ...] = (128, 64)
    post_hidden: int = 64             # dense layer following each LSTM
    branches: int = 10
    rsa: str = "pairwise"
    C: float = 0.1                    # RSA weight for the single-branch objective
    C1: float = 0.1
    C2: float = 0.1
    eps: float = 1e-8
    termination: bool = False
    branch_init: str = "prior"        # first decoder input: prior draw or encoder sample
    mix_reward: bool = True
    termination_rule: str = "sample"  # "sample" or "threshold"
    hidden_act: str = "tanh"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.rsa not in RSA_KINDS:
            raise ValueError(f"unknown rsa kind {self.rsa!r}")
        if self.branches < 1:
            raise ValueError("branches must be >= 1")
        if self.kind == "vlm" and self.branches != 1:
            raise ValueError("the single-branch model has exactly one decoder")
        if min(self.C, self.C1, self.C2) < 0 or self.eps <= 0:
            raise ValueError("C, C1, C2 must be >= 0 and eps > 0")
        if self.branch_init not in ("prior", "encoder"):
            raise ValueError(f"unknown branch_init {self.branch_init!r}")

    @property
    def gated(self) -> bool:
        return self.kind == "vlbm"

    @property
    def trainable(self) -> bool:
        return self.kind != "ensemble"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "mlp_hidden" in d:
            d["mlp_hidden"] = tuple(d["mlp_hidden"])
        return cls(**d)


@dataclass
class Normalizer:
    """Per-dimension standardisation of states and rewards, fitted on the training data."""

    state_mean: np.ndarray
    state_std: np.ndarray
    reward_mean: float = 0.0
    reward_std: float = 1.0

    @classmethod
    def identity(cls, state_dim: int) -> "Normalizer":
        return cls(np.zeros(state_dim), np.ones(state_dim))

    @classmethod
    def fit(cls, trajs: Sequence[Trajectory]) -> "Normalizer":
        S = np.concatenate([tr.states for tr in trajs])
        R = np.concatenate([tr.rewards for tr in trajs]) if any(tr.T for tr in trajs) else np.zeros(1)
        sstd = S.std(axis=0)
        rstd = float(R.std())
        return cls(S.mean(axis=0), np.where(sstd > 1e-6, sstd, 1.0), float(R.mean()), rstd if rstd > 1e-6 else 1.0)

    def to_dict(self) -> dict:
        return {"state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist(),
                "reward_mean": self.reward_mean, "reward_std": self.reward_std}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Normalizer":
        return cls(np.asarray(d["state_mean"], float), np.asarray(d["state_std"], float),
                   float(d["reward_mean"]), float(d["reward_std"]))


@dataclass
class VLBMParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    norm: Normalizer
    meta: dict = field(default_factory=dict)

    @property
    def B(self) -> int:
        return self.config.branches

    def copy(self) -> "VLBMParams":
        return VLBMParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.norm,
                          dict(self.meta))


def init_params(cfg: ModelConfig, seed: int, norm: Normalizer | None = None) -> VLBMParams:
    ds, da, l, M, H = cfg.state_dim, cfg.action_dim, cfg.latent_dim, cfg.hidden, list(cfg.mlp_hidden)
    P = cfg.post_hidden
    enc_blocks = [
        ("mlp", "enc.init.mu", [ds] + H + [l]),
        ("mlp", "enc.init.var", [ds] + H + [l]),
        ("lstm", "enc.lstm", l + da + ds, M),
        ("mlp", "enc.post.mu", [M, P, l]),
        ("mlp", "enc.post.var", [M, P, l]),
    ]
    dec_blocks = [
        ("lstm", "dec.lstm", l + da, M),
        ("mlp", "dec.map", [M, P, M]),
        ("mlp", "dec.prior.mu", [M, P, l]),
        ("mlp", "dec.prior.var", [M, P, l]),
        ("mlp", "dec.state.mu", [l] + H + [ds]),
        ("mlp", "dec.state.var", [l] + H + [ds]),
        ("mlp", "dec.reward.mu", [l] + H + [1]),
        ("mlp", "dec.reward.var", [l] + H + [1]),
    ]
    if cfg.termination:
        dec_blocks.append(("mlp", "dec.term", [l] + H + [1]))
    seeds = np.random.SeedSequence(seed).spawn(3)
    tensors = nn.init_weights(seeds[0], enc_blocks)
    tensors.update(nn.init_weights(seeds[1], dec_blocks, stack=(cfg.branches,)))
    if cfg.gated:
        rng = np.random.default_rng(seeds[2])
        tensors["gate.v"] = rng.uniform(0.5, 1.5, size=(cfg.branches, 1, 1)) / math.sqrt(cfg.branches)
    return VLBMParams(cfg, tensors, norm or Normalizer.identity(ds), {"seed": seed})


# -- minibatches and noise ------------------------------------------------------------

@dataclass
class Batch:
    """Time-major, padded arrays for ``N`` trajectories of at most ``T`` steps."""

    N: int
    T: int
    S: np.ndarray          # ((T+1)N, ds)
    A: np.ndarray          # (TN, da)
    R: np.ndarray          # (TN, 1)
    D: np.ndarray          # ((T+1)N, 1) termination labels
    mask_s: np.ndarray     # ((T+1)N, 1)
    mask_t: np.ndarray     # (TN, 1)
    lengths: np.ndarray    # (N,)

    def rows(self, t: int) -> slice:
        return slice(t * self.N, (t + 1) * self.N)


def make_batch(trajs: Sequence[Trajectory], norm: Normalizer, action_dim: int | None = None) -> Batch:
    N = len(trajs)
    if N == 0:
        raise ValueError("empty minibatch")
    T = max(tr.T for tr in trajs)
    ds = trajs[0].states.shape[1]
    da = action_dim if action_dim is not None else max(tr.actions.shape[1] for tr in trajs)
    S = np.zeros((T + 1, N, ds))
    A = np.zeros((T, N, da))
    R = np.zeros((T, N, 1))
    D = np.zeros((T + 1, N, 1))
    ms = np.zeros((T + 1, N, 1))
    mt = np.zeros((T, N, 1))
    lengths = np.array([tr.T for tr in trajs])
    for i, tr in enumerate(trajs):
        if tr.states.shape[1] != ds or (tr.T and tr.actions.shape[1] != da):
            raise ShapeError("trajectory widths differ within the minibatch")
        S[:tr.T + 1, i] = (tr.states - norm.state_mean) / norm.state_std
        if tr.T:
            A[:tr.T, i] = tr.actions
        R[:tr.T, i, 0] = (tr.rewards - norm.reward_mean) / norm.reward_std
        ms[:tr.T + 1, i] = 1.0
        mt[:tr.T, i] = 1.0
        if tr.terminated:
            D[tr.T, i, 0] = 1.0
    return Batch(N, T, S.reshape(-1, ds), A.reshape(-1, da), R.reshape(-1, 1), D.reshape(-1, 1),
                 ms.reshape(-1, 1), mt.reshape(-1, 1), lengths)


@dataclass
class Noise:
    """Standard-normal draws consumed by one objective evaluation; fixed noise makes it deterministic."""

    enc0: np.ndarray   # (N, l)
    enc: np.ndarray    # (T, N, l)
    dec0: np.ndarray   # (B, N, l) prior draws for the first decoder latent
    dec: np.ndarray    # (B, TN, l)

    @classmethod
    def draw(cls, rng: np.random.Generator, cfg: ModelConfig, N: int, T: int) -> "Noise":
        l, B = cfg.latent_dim, cfg.branches
        return cls(rng.standard_normal((N, l)), rng.standard_normal((T, N, l)),
                   rng.standard_normal((B, N, l)), rng.standard_normal((B, T * N, l)))

    @classmethod
    def zeros(cls, cfg: ModelConfig, N: int, T: int) -> "Noise":
        l, B = cfg.latent_dim, cfg.branches
        return cls(np.zeros((N, l)), np.zeros((T, N, l)), np.zeros((B, N, l)), np.zeros((B, T * N, l)))


# -- encoder and decoder ----------------------------------------------------------------

@dataclass
class EncodedTraj:
    z: Tensor                   # ((T+1)N, l) latent samples, time-major
    h: Tensor | None            # (TN, M) encoder recurrent states for t = 1..T
    q0: nn.DiagGaussian         # posterior over z_0
    post: nn.DiagGaussian | None  # posteriors for t = 1..T, (TN, l)
    z_steps: list[Tensor]       # per-step views of z


def encode(p: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, noise: Noise) -> EncodedTraj:
    tape = next(iter(p.values())).tape
    if batch.S.shape[1] != cfg.state_dim or batch.A.shape[1] != cfg.action_dim:
        raise ShapeError(f"encode: data widths (state {batch.S.shape[1]}, action {batch.A.shape[1]}) "
                         f"do not match model ({cfg.state_dim}, {cfg.action_dim})")
    N, T, l, M = batch.N, batch.T, cfg.latent_dim, cfg.hidden
    S = tape.constant(batch.S)
    q0 = nn.gaussian_head(p, "enc.init", S[0:N], cfg.hidden_act)
    z = nn.reparam_sample(q0, noise.enc0)
    zs = [z]
    if T == 0:
        return EncodedTraj(z, None, q0, None, zs)
    Wx = p["enc.lstm.Wx"]
    # action and next-state contributions for all steps in one product each
    pre = (tape.constant(batch.A) @ Wx[l:l + cfg.action_dim] + S[N:] @ Wx[l + cfg.action_dim:]
           + p["enc.lstm.b"])
    Wz = Wx[0:l]
    h = tape.constant(np.zeros((N, M)))
    c = tape.constant(np.zeros((N, M)))
    hs, mus, vs = [], [], []
    for t in range(1, T + 1):
        h, c = nn.lstm_cell(p, "enc.lstm", h, c, pre[(t - 1) * N:t * N] + z @ Wz)
        q = nn.gaussian_head(p, "enc.post", h, cfg.hidden_act)
        z = nn.reparam_sample(q, noise.enc[t - 1])
        hs.append(h)
        mus.append(q.mean)
        vs.append(q.var)
        zs.append(z)
    post = nn.DiagGaussian(concat(mus, 0), concat(vs, 0))
    return EncodedTraj(concat(zs, 0), concat(hs, 0), q0, post, zs)


@dataclass
class TeacherForced:
    h: Tensor             # (B, TN, M)
    h_tilde: Tensor       # (B, TN, M)
    prior: nn.DiagGaussian  # (B, TN, l)
    z0: Tensor            # (B, N, l) first decoder input


def decode_teacher_forced(p: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, enc: EncodedTraj,
                          noise: Noise) -> TeacherForced:
    """Run every branch's recurrence on encoder latents (the first input is a prior draw by default)."""
    tape = enc.z.tape
    N, T, l, M, B = batch.N, batch.T, cfg.latent_dim, cfg.hidden, cfg.branches
    if cfg.branch_init == "prior":
        z0 = tape.constant(noise.dec0)
    else:
        z0 = tape.constant(np.zeros((B, 1, 1))) + enc.z_steps[0]
    Wx = p["dec.lstm.Wx"]
    Wz = Wx[:, 0:l]
    zproj = z0 @ Wz
    if T > 1:
        zproj = concat([zproj, enc.z[0:(T - 1) * N] @ Wz], axis=1)
    pre = zproj + tape.constant(batch.A) @ Wx[:, l:] + p["dec.lstm.b"]
    h = tape.constant(np.zeros((B, N, M)))
    c = tape.constant(np.zeros((B, N, M)))
    hs = []
    for t in range(1, T + 1):
        h, c = nn.lstm_cell(p, "dec.lstm", h, c, pre[:, (t - 1) * N:t * N])
        hs.append(h)
    H = concat(hs, axis=1)
    H_tilde = nn.mlp_forward(p, "dec.map", H, "linear", cfg.hidden_act)
    prior = nn.gaussian_head(p, "dec.prior", H_tilde, cfg.hidden_act)
    return TeacherForced(H, H_tilde, prior, z0)


@dataclass
class DecodedStep:
    h: Tensor
    c: Tensor
    h_tilde: Tensor
    prior: nn.DiagGaussian
    z: Tensor
    state: nn.DiagGaussian
    reward: nn.DiagGaussian
    term_mean: Tensor | None


def decode_step(p: Mapping[str, Tensor], cfg: ModelConfig, h_prev: Tensor, c_prev: Tensor, z_prev: Tensor,
                a_prev, noise) -> DecodedStep:
    """One generative step for all branches at once (leading axis ``B``)."""
    tape = h_prev.tape
    a_prev = a_prev if isinstance(a_prev, Tensor) else tape.constant(a_prev)
    if z_prev.shape[-1] != cfg.latent_dim or a_prev.shape[-1] != cfg.action_dim:
        raise ShapeError(f"decode_step: got latent {z_prev.shape[-1]} / action {a_prev.shape[-1]}, "
                         f"expected {cfg.latent_dim} / {cfg.action_dim}")
    h, c = nn.lstm_step(p, "dec.lstm", h_prev, c_prev, [z_prev, a_prev])
    h_tilde = nn.mlp_forward(p, "dec.map", h, "linear", cfg.hidden_act)
    prior = nn.gaussian_head(p, "dec.prior", h_tilde, cfg.hidden_act)
    z = nn.reparam_sample(prior, noise)
    state = nn.gaussian_head(p, "dec.state", z, cfg.hidden_act)
    reward = nn.gaussian_head(p, "dec.reward", z, cfg.hidden_act)
    term = nn.mlp_forward(p, "dec.term", z, "sigmoid", cfg.hidden_act) if cfg.termination else None
    return DecodedStep(h, c, h_tilde, prior, z, state, reward, term)


# -- branch mixture ---------------------------------------------------------------------

def branch_weights(v: Tensor, eps: float = 1e-8) -> Tensor:
    """``w_b = v_b^2 / (eps + sum_b v_b^2)``; same shape as ``v``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    v2 = square(v)
    return v2 * exp(-log(eps + tsum(v2)))


def branch_weights_array(params: VLBMParams) -> np.ndarray:
    cfg = params.config
    if cfg.kind == "ensemble":
        return np.full(cfg.branches, 1.0 / cfg.branches)
    if not cfg.gated:
        return np.ones(cfg.branches)
    v2 = params.tensors["gate.v"].reshape(-1) ** 2
    return v2 / (cfg.eps + v2.sum())


def _weights_tensor(p: Mapping[str, Tensor], cfg: ModelConfig, tape: Tape) -> Tensor:
    if cfg.gated:
        return branch_weights(p["gate.v"], cfg.eps)
    return tape.constant(np.ones((cfg.branches, 1, 1)))


def mix_gaussian(heads: nn.DiagGaussian, w: Tensor) -> nn.DiagGaussian:
    """Collapse the leading branch axis: mean ``sum w_b mu_b``, variance ``sum w_b^2 var_b``."""
    if heads.mean.shape[0] != w.shape[0]:
        raise ShapeError(f"mix_gaussian: {heads.mean.shape[0]} heads but {w.shape[0]} weights")
    if heads.mean.shape != heads.var.shape:
        raise ShapeError(f"mix_gaussian: mean {heads.mean.shape} and variance {heads.var.shape} differ")
    return nn.DiagGaussian(tsum(w * heads.mean, axis=0), tsum(square(w) * heads.var, axis=0))


def mix_bernoulli(means: Tensor, w: Tensor) -> Tensor:
    """``sum_b w_b mu_b`` over the leading branch axis, squashed into ``(0, 1)``."""
    if means.shape[0] != w.shape[0]:
        raise ShapeError(f"mix_bernoulli: {means.shape[0]} means but {w.shape[0]} weights")
    return nn.squash_probability(tsum(w * means, axis=0))


# -- alignment losses -------------------------------------------------------------------

def rsa(h_tilde: Tensor, h: Tensor, row_weights=None) -> Tensor:
    """Mean pairwise squared error between the coordinate differences of ``h_tilde`` and ``h``.

    Rows are timesteps (and trajectories); the last axis has width ``M``. For each row
    ``sum_{j<k} ((a_j - a_k) - (b_j - b_k))^2`` is computed as ``M*sum d^2 - (sum d)^2``
    with ``d = a - b`` and divided by ``M(M-1)/2``. Rows are then averaged, or weighted by
    ``row_weights`` of shape ``(rows, 1)``. Any leading axes (branches) are kept.
    """
    M = h.shape[-1]
    if M < 2:
        raise ValueError("rsa needs recurrent states of width >= 2")
    if h_tilde.shape[-1] != M:
        raise ShapeError(f"rsa: widths {h_tilde.shape[-1]} and {M} differ")
    d = h_tilde - h
    per_row = M * tsum(square(d), axis=-1, keepdims=True) - square(tsum(d, axis=-1, keepdims=True))
    per_row = per_row * (2.0 / (M * (M - 1)))
    return _weighted_rows(per_row, row_weights)


def mse_alignment(h_tilde: Tensor, h: Tensor, row_weights=None) -> Tensor:
    """Ablation: plain mean squared error between the two recurrent states."""
    if h_tilde.shape[-1] != h.shape[-1]:
        raise ShapeError(f"mse: widths {h_tilde.shape[-1]} and {h.shape[-1]} differ")
    per_row = tsum(square(h_tilde - h), axis=-1, keepdims=True) * (1.0 / h.shape[-1])
    return _weighted_rows(per_row, row_weights)


def _weighted_rows(per_row: Tensor, row_weights) -> Tensor:
    rows = per_row.shape[-2]
    if row_weights is None:
        row_weights = np.full((rows, 1), 1.0 / rows)
    return tsum(per_row * per_row.tape.constant(row_weights), axis=(-2, -1))


def alignment_row_weights(batch: Batch) -> np.ndarray:
    """Average over each trajectory's own steps, then over trajectories."""
    per_traj = np.where(batch.lengths > 0, 1.0 / np.maximum(batch.lengths, 1), 0.0) / batch.N
    return batch.mask_t * np.tile(per_traj, batch.T)[:, None]


# -- objectives -------------------------------------------------------------------------

def _masked_mean(rows: Tensor, mask: np.ndarray, N: int) -> Tensor:
    """Sum masked rows over time and average over trajectories, keeping leading axes."""
    return tsum(rows * rows.tape.constant(mask / N), axis=(-2, -1))


def _elbo_parts(p, cfg: ModelConfig, batch: Batch, enc: EncodedTraj, dec: TeacherForced | None) -> dict:
    N = batch.N
    tape = enc.z.tape
    state = nn.gaussian_head(p, "dec.state", enc.z, cfg.hidden_act)          # (B, (T+1)N, ds)
    parts = {
        "log_p_state": _masked_mean(nn.gaussian_log_prob_rows(state, batch.S), batch.mask_s, N),
        "kl0": _masked_mean(nn.gaussian_kl_rows(enc.q0, nn.standard_normal(enc.z, cfg.latent_dim)),
                            np.ones((N, 1)), N),
    }
    if batch.T > 0:
        zt = enc.z[N:]
        reward = nn.gaussian_head(p, "dec.reward", zt, cfg.hidden_act)
        parts["log_p_reward"] = _masked_mean(nn.gaussian_log_prob_rows(reward, batch.R), batch.mask_t, N)
        parts["kl"] = _masked_mean(nn.gaussian_kl_rows(enc.post, dec.prior), batch.mask_t, N)
    else:
        parts["log_p_reward"] = tape.constant(np.zeros(cfg.branches))
        parts["kl"] = tape.constant(np.zeros(cfg.branches))
    if cfg.termination:
        term = nn.mlp_forward(p, "dec.term", enc.z, "sigmoid", cfg.hidden_act)
        parts["log_p_term"] = _masked_mean(nn.bernoulli_log_prob_rows(term, batch.D), batch.mask_s, N)
    return parts


def _elbo_from_parts(parts: dict) -> Tensor:
    out = parts["log_p_state"] + parts["log_p_reward"] - parts["kl0"] - parts["kl"]
    if "log_p_term" in parts:
        out = out + parts["log_p_term"]
    return out


def elbo(p: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, noise: Noise) -> Tensor:
    """Per-branch evidence lower bound, shape ``(B,)``, averaged over the trajectories in ``batch``.

    The decoder's transition prior is evaluated on encoder latents, one posterior sample per step.
    """
    enc = encode(p, cfg, batch, noise)
    dec = decode_teacher_forced(p, cfg, batch, enc, noise) if batch.T > 0 else None
    return _elbo_from_parts(_elbo_parts(p, cfg, batch, enc, dec))


def _alignment(cfg: ModelConfig, batch: Batch, enc: EncodedTraj, dec: TeacherForced | None) -> Tensor | None:
    if cfg.rsa == "none" or batch.T == 0:
        return None
    fn = rsa if cfg.rsa == "pairwise" else mse_alignment
    return fn(dec.h_tilde, enc.h, alignment_row_weights(batch))


def objective_terms(p: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, noise: Noise) -> dict:
    """All named pieces of the training objective plus ``"objective"`` itself."""
    tape = next(iter(p.values())).tape
    enc = encode(p, cfg, batch, noise)
    dec = decode_teacher_forced(p, cfg, batch, enc, noise) if batch.T > 0 else None
    parts = _elbo_parts(p, cfg, batch, enc, dec)
    elbos = _elbo_from_parts(parts)
    align = _alignment(cfg, batch, enc, dec)
    terms = {"elbo": elbos, **parts}
    if align is not None:
        terms["rsa"] = align
    if not cfg.gated:
        obj = tsum(elbos)
        if align is not None:
            obj = obj - cfg.C * tsum(align)
        terms["objective"] = obj
        return terms

    N = batch.N
    w = _weights_tensor(p, cfg, tape)
    z0 = tape.constant(noise.dec0)
    if batch.T > 0:
        z_t = nn.reparam_sample(dec.prior, noise.dec)
        z_branch = concat([z0, z_t], axis=1)
    else:
        z_branch = z0
    state = mix_gaussian(nn.gaussian_head(p, "dec.state", z_branch, cfg.hidden_act), w)
    mixed = _masked_mean(nn.gaussian_log_prob_rows(state, batch.S), batch.mask_s, N)
    terms["mixed_state"] = mixed
    if cfg.mix_reward and batch.T > 0:
        reward = mix_gaussian(nn.gaussian_head(p, "dec.reward", z_t, cfg.hidden_act), w)
        terms["mixed_reward"] = _masked_mean(nn.gaussian_log_prob_rows(reward, batch.R), batch.mask_t, N)
        mixed = mixed + terms["mixed_reward"]
    if cfg.termination:
        means = nn.mlp_forward(p, "dec.term", z_branch, "sigmoid", cfg.hidden_act)
        term_mean = tsum(w * means, axis=0)
        terms["mixed_term"] = _masked_mean(nn.bernoulli_log_prob_rows(term_mean, batch.D), batch.mask_s, N)
        mixed = mixed + terms["mixed_term"]
    obj = mixed + cfg.C2 * tsum(elbos)
    if align is not None:
        obj = obj - cfg.C1 * tsum(align)
    terms["objective"] = obj
    return terms


def vlm_objective(p, cfg: ModelConfig, batch: Batch, noise: Noise) -> Tensor:
    """ELBO minus ``C`` times the alignment loss (pairwise, MSE or none per ``cfg.rsa``)."""
    if cfg.gated:
        raise ValueError("vlm_objective needs a single-branch configuration")
    return objective_terms(p, cfg, batch, noise)["objective"]


def vlbm_objective(p, cfg: ModelConfig, batch: Batch, noise: Noise) -> Tensor:
    """Mixed-head log-likelihood + ``C2 * sum_b ELBO_b`` - ``C1 * sum_b RSA_b``."""
    if not cfg.gated:
        raise ValueError("vlbm_objective needs a gated (branched) configuration")
    return objective_terms(p, cfg, batch, noise)["objective"]


def evaluate_objective(params: VLBMParams, batch: Batch, noise: Noise, tensors=None) -> float:
    """Objective value without recording gradients."""
    tape = Tape(record=False)
    p = {k: tape.constant(v) for k, v in (tensors or params.tensors).items()}
    return float(objective_terms(p, params.config, batch, noise)["objective"].value)


def objective_and_grads(params: VLBMParams, batch: Batch, noise: Noise, tensors=None):
    tape = Tape()
    p = tape.leaves(tensors or params.tensors)
    terms = objective_terms(p, params.config, batch, noise)
    return terms, backward(tape, terms["objective"])


# -- training -------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    max_iter: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.997
    l2: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    gate_lr_scale: float = 1.0     # step-size multiplier for the branch gate variables

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _l2_applies(name: str) -> bool:
    # weight matrices only: biases and the gate variables are left undecayed
    leaf = name.rsplit(".", 1)[-1]
    return not name.startswith("gate.") and leaf.startswith("W")


@dataclass
class TrainLog:
    objective: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def train(params: VLBMParams, dataset: Dataset | Sequence[Trajectory], config: TrainConfig,
          rng: np.random.Generator, fit_normalizer: bool = True,
          callback: Callable[[int, float], None] | None = None) -> tuple[VLBMParams, TrainLog]:
    """Stochastic gradient ascent on the model objective with Adam and exponential lr decay."""
    trajs = list(dataset.trajectories if isinstance(dataset, Dataset) else dataset)
    if not trajs:
        raise ValueError("cannot train on an empty dataset")
    out = params.copy()
    if fit_normalizer:
        out.norm = Normalizer.fit(trajs)
    cfg = out.config
    state = AdamState()
    log_ = TrainLog()
    n = len(trajs)
    for it in range(config.max_iter):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        batch = make_batch([trajs[i] for i in idx], out.norm, cfg.action_dim)
        noise = Noise.draw(rng, cfg, batch.N, batch.T)
        try:
            terms, grads = objective_and_grads(out, batch, noise)
        except NonFiniteError as e:
            raise TrainingDivergedError(it, str(e)) from e
        value = float(terms["objective"].value)
        if not math.isfinite(value):
            raise TrainingDivergedError(it)
        lr = lr_schedule(config.lr, config.lr_decay, it)
        ascent = {k: -g for k, g in grads.items()}
        out.tensors, state = adam_step(out.tensors, ascent, state, lr, config.beta1, config.beta2,
                                       config.eps_adam, config.l2, _l2_applies,
                                       {"gate.v": config.gate_lr_scale})
        log_.objective.append(value)
        log_.lr.append(lr)
        if callback is not None:
            callback(it, value)
        if it % 50 == 0:
            logger.debug("iter %d objective %.4f lr %.2e", it, value, lr)
    if cfg.gated:
        out.meta["branch_weights"] = branch_weights_array(out).tolist()
    return out, log_


# -- evaluation rollouts -----------------------------------------------------------------

@dataclass
class RolloutResult:
    estimate: float
    returns: np.ndarray
    lengths: np.ndarray


def _decoder_constants(tensors: Mapping[str, np.ndarray], tape: Tape) -> dict:
    return {k: tape.constant(v) for k, v in tensors.items() if k.startswith("dec.")}


def rollout(params: VLBMParams, policy: LinearGaussianPolicy, T: int, gamma: float, episodes: int,
            rng: np.random.Generator, weights: np.ndarray | None = None) -> RolloutResult:
    """Simulate ``episodes`` trajectories of length ``T`` inside the learned model.

    Latents start from the prior, states and rewards are drawn from the branch mixture
    and the discounted return ``sum_t gamma^(t-1) r_(t-1)`` is averaged over episodes.
    With termination modelling an episode stops at the first step where the mixed
    Bernoulli fires.
    """
    cfg = params.config
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if policy.state_dim != cfg.state_dim or policy.action_dim != cfg.action_dim:
        raise ShapeError(f"policy maps {policy.state_dim} -> {policy.action_dim}, model expects "
                         f"{cfg.state_dim} -> {cfg.action_dim}")
    B, E, l, M = cfg.branches, episodes, cfg.latent_dim, cfg.hidden
    w = branch_weights_array(params) if weights is None else np.asarray(weights, float)
    if w.shape != (B,):
        raise ShapeError(f"expected {B} branch weights, got shape {w.shape}")
    w3 = w.reshape(B, 1, 1)
    norm = params.norm
    tape = Tape(record=False)
    p = _decoder_constants(params.tensors, tape)

    def mixed_sample(head: nn.DiagGaussian) -> np.ndarray:
        mean = np.sum(w3 * head.mean.value, axis=0)
        var = np.sum(w3 ** 2 * head.var.value, axis=0)
        return mean + np.sqrt(var) * rng.standard_normal(mean.shape)

    z = tape.constant(rng.standard_normal((B, E, l)))
    h = tape.constant(np.zeros((B, E, M)))
    c = tape.constant(np.zeros((B, E, M)))
    s = mixed_sample(nn.gaussian_head(p, "dec.state", z, cfg.hidden_act)) * norm.state_std + norm.state_mean
    alive = np.ones(E, dtype=bool)
    returns = np.zeros(E)
    lengths = np.zeros(E, dtype=int)
    for t in range(1, T + 1):
        a = policy.act_batch(s, rng)
        step = decode_step(p, cfg, h, c, z, a, rng.standard_normal((B, E, l)))
        s = mixed_sample(step.state) * norm.state_std + norm.state_mean
        r = mixed_sample(step.reward)[:, 0] * norm.reward_std + norm.reward_mean
        returns += np.where(alive, gamma ** (t - 1) * r, 0.0)
        lengths += alive
        if cfg.termination:
            d_mean = np.clip(np.sum(w3 * step.term_mean.value, axis=0)[:, 0], 0.0, 1.0)
            if cfg.termination_rule == "threshold":
                done = d_mean > 0.5
            else:
                done = rng.random(E) < d_mean
            alive &= ~done
        if not alive.any():
            break
        h, c, z = step.h, step.c, step.z
    return RolloutResult(float(returns.mean()), returns, lengths)


# -- latent export and checkpoints ----------------------------------------------------------

LATENT_HEADER_PREFIX = ("policy_id", "t")


def export_latents(params: VLBMParams, trajectories: Sequence[Trajectory], policy_ids: Sequence | None = None):
    """Encoder means (zero noise) for every visited step: list of ``(policy_id, t, z)`` rows."""
    cfg = params.config
    rows = []
    policy_ids = list(policy_ids) if policy_ids is not None else [0] * len(trajectories)
    tape = Tape(record=False)
    p = {k: tape.constant(v) for k, v in params.tensors.items() if k.startswith("enc.")}
    for pid, tr in zip(policy_ids, trajectories):
        batch = make_batch([tr], params.norm, cfg.action_dim)
        enc = encode(p, cfg, batch, Noise.zeros(cfg, 1, batch.T))
        for t, z in enumerate(enc.z_steps):
            rows.append((pid, t, z.value[0].copy()))
    return rows


def latent_header(latent_dim: int) -> list[str]:
    return list(LATENT_HEADER_PREFIX) + [f"z_{i}" for i in range(latent_dim)]


def write_latents_csv(rows, latent_dim: int, path) -> None:
    import csv
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(latent_header(latent_dim))
        for pid, t, z in rows:
            writer.writerow([pid, t] + [repr(float(x)) for x in z])


def save_checkpoint(params: VLBMParams, path, extra_meta: Mapping | None = None) -> None:
    meta = {"model_kind": params.config.kind, "B": params.B, "l": params.config.latent_dim,
            "M": params.config.hidden, "config": params.config.to_dict(), "norm": params.norm.to_dict(),
            **params.meta, **(extra_meta or {})}
    if params.config.gated:
        meta["branch_weights"] = branch_weights_array(params).tolist()
    doc = {"meta": meta,
           "tensors": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(params.tensors.items())}}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> VLBMParams:
    doc = json.loads(Path(path).read_text())
    meta = doc["meta"]
    if meta.get("model_kind") not in MODEL_KINDS:
        raise ValueError(f"{path}: not a latent-model checkpoint (kind {meta.get('model_kind')!r})")
    cfg = ModelConfig.from_dict(meta["config"])
    tensors = {k: np.asarray(v["data"], float).reshape(v["shape"]) for k, v in doc["tensors"].items()}
    rest = {k: v for k, v in meta.items() if k not in ("model_kind", "B", "l", "M", "config", "norm")}
    return VLBMParams(cfg, tensors, Normalizer.from_dict(meta["norm"]), rest)


def stack_members(members: Sequence[VLBMParams]) -> VLBMParams:
    """Concatenate the decoders of independently trained single-branch models along the branch axis.

    The result is rollout-only: each member keeps its own latent space and the outputs
    are mixed with uniform weights.
    """
    if not members:
        raise ValueError("no members to stack")
    base = members[0]
    cfg = replace(base.config, kind="ensemble", branches=len(members))
    tensors = {k: np.concatenate([m.tensors[k] for m in members], axis=0)
               for k in base.tensors if k.startswith("dec.")}
    return VLBMParams(cfg, tensors, base.norm, {"members": len(members)})
