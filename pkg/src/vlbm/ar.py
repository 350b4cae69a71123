"""Autoregressive dynamics ensemble, the strongest model-based baseline.

Each member predicts the next state one dimension at a time and the reward last:
``p(y_j | s, a, y_1..y_(j-1))`` with ``y = (s'_1, ..., s'_d, r)``. A member is a stack of
``d + 1`` small Gaussian MLPs. All members share one parameter dict with a leading
member axis, and their per-dimension outputs are combined with the same learned gate as
the branched model (``w = v^2 / (eps + sum v^2)``, mixed moments ``sum w mu`` and
``sum w^2 var``).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .autodiff import AdamState, NonFiniteError, ShapeError, Tape, Tensor, adam_step, backward, lr_schedule, tsum
from .envs import Dataset, LinearGaussianPolicy, Trajectory
from .model import (Normalizer, RolloutResult, TrainConfig, TrainingDivergedError, TrainLog, branch_weights,
                    mix_gaussian)

AR_KIND = "ar"


@dataclass(frozen=True)
class ARConfig:
    state_dim: int
    action_dim: int
    members: int = 10
    mlp_hidden: tuple[int, ...] = (64, 32)
    eps: float = 1e-8
    hidden_act: str = "tanh"

    def __post_init__(self):
        if self.members < 1:
            raise ValueError("members must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def out_dims(self) -> int:
        return self.state_dim + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ARConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "mlp_hidden" in d:
            d["mlp_hidden"] = tuple(d["mlp_hidden"])
        return cls(**d)


@dataclass
class ARParams:
    config: ARConfig
    tensors: dict[str, np.ndarray]
    norm: Normalizer
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ARParams":
        return ARParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.norm, dict(self.meta))


def _prefix(j: int) -> str:
    return f"ar.d{j}"


def init_ar_params(cfg: ARConfig, seed: int, norm: Normalizer | None = None) -> ARParams:
    """Every member is initialised from its own seed; slices are then stacked."""
    member_seeds = np.random.SeedSequence(seed).spawn(cfg.members + 1)
    per_member = []
    for ms in member_seeds[:-1]:
        blocks = []
        for j in range(cfg.out_dims):
            sizes = [cfg.state_dim + cfg.action_dim + j] + list(cfg.mlp_hidden) + [1]
            blocks += [("mlp", _prefix(j) + ".mu", sizes), ("mlp", _prefix(j) + ".var", sizes)]
        per_member.append(nn.init_weights(ms, blocks))
    tensors = {k: np.stack([m[k] for m in per_member]) for k in per_member[0]}
    rng = np.random.default_rng(member_seeds[-1])
    tensors["gate.v"] = rng.uniform(0.5, 1.5, size=(cfg.members, 1, 1)) / math.sqrt(cfg.members)
    return ARParams(cfg, tensors, norm or Normalizer.identity(cfg.state_dim), {"seed": seed})


def gate_weights_array(params: ARParams) -> np.ndarray:
    v2 = params.tensors["gate.v"].reshape(-1) ** 2
    return v2 / (params.config.eps + v2.sum())


# -- data ---------------------------------------------------------------------------------

def transition_arrays(trajs: Sequence[Trajectory], norm: Normalizer) -> tuple[np.ndarray, np.ndarray]:
    """Normalised inputs ``(s, a)`` and targets ``(s', r)`` for every transition."""
    X, Y = [], []
    for tr in trajs:
        if tr.T == 0:
            continue
        s = (tr.states - norm.state_mean) / norm.state_std
        r = (tr.rewards - norm.reward_mean) / norm.reward_std
        X.append(np.concatenate([s[:-1], tr.actions], axis=1))
        Y.append(np.concatenate([s[1:], r[:, None]], axis=1))
    if not X:
        raise ValueError("dataset has no transitions")
    return np.concatenate(X), np.concatenate(Y)


# -- objective --------------------------------------------------------------------------------

def _heads(p: Mapping[str, Tensor], cfg: ARConfig, j: int, inp: Tensor) -> nn.DiagGaussian:
    return nn.gaussian_head(p, _prefix(j), inp, cfg.hidden_act)


def ar_objective_terms(p: Mapping[str, Tensor], cfg: ARConfig, X: np.ndarray, Y: np.ndarray) -> dict:
    """Mixed log-likelihood plus every member's own log-likelihood, averaged over transitions.

    Inputs for dimension ``j`` use the observed values of the earlier dimensions
    (teacher forcing), so the chain factorises exactly.
    """
    if X.shape[1] != cfg.state_dim + cfg.action_dim or Y.shape[1] != cfg.out_dims:
        raise ShapeError(f"ar objective: got inputs {X.shape[1]} / targets {Y.shape[1]}, expected "
                         f"{cfg.state_dim + cfg.action_dim} / {cfg.out_dims}")
    tape = next(iter(p.values())).tape
    n = X.shape[0]
    w = branch_weights(p["gate.v"], cfg.eps)
    member_ll, mixed_ll = None, None
    for j in range(cfg.out_dims):
        inp = tape.constant(np.concatenate([X, Y[:, :j]], axis=1))
        heads = _heads(p, cfg, j, inp)
        target = Y[:, j:j + 1]
        ll_k = tsum(nn.gaussian_log_prob_rows(heads, target), axis=(-2, -1)) * (1.0 / n)
        ll_mix = nn.gaussian_log_prob(mix_gaussian(heads, w), target) * (1.0 / n)
        member_ll = ll_k if member_ll is None else member_ll + ll_k
        mixed_ll = ll_mix if mixed_ll is None else mixed_ll + ll_mix
    return {"member_log_lik": member_ll, "mixed_log_lik": mixed_ll, "objective": mixed_ll + tsum(member_ll)}


def ar_objective_and_grads(params: ARParams, X: np.ndarray, Y: np.ndarray, tensors=None):
    tape = Tape()
    p = tape.leaves(tensors or params.tensors)
    terms = ar_objective_terms(p, params.config, X, Y)
    return terms, backward(tape, terms["objective"])


def _l2_applies(name: str) -> bool:
    return not name.startswith("gate.") and name.rsplit(".", 1)[-1].startswith("W")


def ar_train(dataset: Dataset | Sequence[Trajectory], config: ARConfig, train_config: TrainConfig,
             rng: np.random.Generator, seed: int = 0, params: ARParams | None = None) -> tuple[ARParams, TrainLog]:
    """Maximise the AR objective on random minibatches of ``train_config.batch_size`` transitions."""
    trajs = list(dataset.trajectories if isinstance(dataset, Dataset) else dataset)
    if not trajs:
        raise ValueError("cannot train on an empty dataset")
    norm = Normalizer.fit(trajs)
    out = params.copy() if params is not None else init_ar_params(config, seed)
    out.norm = norm
    X, Y = transition_arrays(trajs, norm)
    state = AdamState()
    log_ = TrainLog()
    for it in range(train_config.max_iter):
        idx = rng.choice(len(X), size=min(train_config.batch_size, len(X)), replace=False)
        try:
            terms, grads = ar_objective_and_grads(out, X[idx], Y[idx])
        except NonFiniteError as e:
            raise TrainingDivergedError(it, str(e)) from e
        value = float(terms["objective"].value)
        lr = lr_schedule(train_config.lr, train_config.lr_decay, it)
        out.tensors, state = adam_step(out.tensors, {k: -g for k, g in grads.items()}, state, lr,
                                       train_config.beta1, train_config.beta2, train_config.eps_adam,
                                       train_config.l2, _l2_applies, {"gate.v": train_config.gate_lr_scale})
        log_.objective.append(value)
        log_.lr.append(lr)
    out.meta["gate_weights"] = gate_weights_array(out).tolist()
    return out, log_


# -- rollout -----------------------------------------------------------------------------------

def ar_rollout(params: ARParams, policy: LinearGaussianPolicy, T: int, gamma: float, episodes: int,
               rng: np.random.Generator, initial_states: np.ndarray,
               weights: np.ndarray | None = None) -> RolloutResult:
    """Sample dimensions in index order from the gated mixture, starting from dataset initial states."""
    cfg = params.config
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    init = np.asarray(initial_states, float)
    if init.ndim != 2 or init.shape[1] != cfg.state_dim or len(init) == 0:
        raise ShapeError(f"initial_states must be (n, {cfg.state_dim}), got {init.shape}")
    w = gate_weights_array(params) if weights is None else np.asarray(weights, float)
    if w.shape != (cfg.members,):
        raise ShapeError(f"expected {cfg.members} gate weights, got shape {w.shape}")
    w3 = w.reshape(-1, 1, 1)
    norm = params.norm
    tape = Tape(record=False)
    p = {k: tape.constant(v) for k, v in params.tensors.items()}
    s = init[rng.integers(len(init), size=episodes)]
    returns = np.zeros(episodes)
    for t in range(T):
        a = policy.act_batch(s, rng)
        x = np.concatenate([(s - norm.state_mean) / norm.state_std, a], axis=1)
        y = np.zeros((episodes, cfg.out_dims))
        for j in range(cfg.out_dims):
            heads = _heads(p, cfg, j, tape.constant(np.concatenate([x, y[:, :j]], axis=1)))
            mean = np.sum(w3 * heads.mean.value, axis=0)[:, 0]
            var = np.sum(w3 ** 2 * heads.var.value, axis=0)[:, 0]
            y[:, j] = mean + np.sqrt(var) * rng.standard_normal(episodes)
        s = y[:, :cfg.state_dim] * norm.state_std + norm.state_mean
        r = y[:, -1] * norm.reward_std + norm.reward_mean
        returns += gamma ** t * r
    return RolloutResult(float(returns.mean()), returns, np.full(episodes, T))


# -- checkpoints -------------------------------------------------------------------------------

def save_ar_checkpoint(params: ARParams, path, extra_meta: Mapping | None = None) -> None:
    meta = {"model_kind": AR_KIND, "B": params.config.members, "config": params.config.to_dict(),
            "norm": params.norm.to_dict(), **params.meta, **(extra_meta or {})}
    meta["gate_weights"] = gate_weights_array(params).tolist()
    doc = {"meta": meta, "tensors": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                                     for k, v in sorted(params.tensors.items())}}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_ar_checkpoint(path) -> ARParams:
    doc = json.loads(Path(path).read_text())
    meta = doc["meta"]
    if meta.get("model_kind") != AR_KIND:
        raise ValueError(f"{path}: not an autoregressive checkpoint")
    tensors = {k: np.asarray(v["data"], float).reshape(v["shape"]) for k, v in doc["tensors"].items()}
    rest = {k: v for k, v in meta.items() if k not in ("model_kind", "B", "config", "norm")}
    return ARParams(ARConfig.from_dict(meta["config"]), tensors, Normalizer.from_dict(meta["norm"]), rest)
