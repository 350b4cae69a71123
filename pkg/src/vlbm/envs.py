"""Synthetic continuous-control tasks, linear-Gaussian policies and offline datasets.

Three small environments stand in for the Mujoco tasks used in model-based OPE
benchmarks:

* ``LineMass``  -- a 1-D point mass driven toward ``pos = 1``.
* ``Swirl2D``   -- a 2-D point mass whose velocity is rotated and tanh-damped.
* ``CliffMass`` -- ``LineMass`` that terminates early once ``|pos| > 2``.

Rewards are always ``-(distance to goal)^2 - 0.01 |a|^2`` so they never exceed 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

ENV_IDS = ("LineMass", "Swirl2D", "CliffMass")
DATASET_SUFFIX = ".traj.jsonl"


class DatasetFormatError(ValueError):
    """Raised when a ``.traj.jsonl`` file cannot be parsed."""


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    state_dim: int
    action_dim: int
    horizon: int = 50
    dt: float = 0.1
    process_noise: float = 0.01
    init_noise: float = 0.05
    control_cost: float = 0.01
    goal: tuple[float, ...] = (1.0,)
    swirl_angle: float = 0.1
    swirl_damping: float = 0.1
    cliff: float | None = None

    @property
    def action_low(self) -> float:
        return -1.0

    @property
    def action_high(self) -> float:
        return 1.0

    def with_noise(self, scale: float) -> "EnvSpec":
        """Copy of the spec with process and initial-state noise multiplied by ``scale``."""
        return replace(self, process_noise=self.process_noise * scale, init_noise=self.init_noise * scale)


def make_env(env_id: str, **overrides) -> EnvSpec:
    if env_id == "LineMass":
        spec = EnvSpec("LineMass", 2, 1)
    elif env_id == "CliffMass":
        spec = EnvSpec("CliffMass", 2, 1, cliff=2.0)
    elif env_id == "Swirl2D":
        spec = EnvSpec("Swirl2D", 4, 2, goal=(1.0, 1.0))
    else:
        raise ValueError(f"unknown env {env_id!r}; expected one of {', '.join(ENV_IDS)}")
    return replace(spec, **overrides) if overrides else spec


def initial_state(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    return spec.init_noise * rng.standard_normal(spec.state_dim)


def is_terminal(spec: EnvSpec, s: np.ndarray) -> bool:
    return spec.cliff is not None and abs(float(s[0])) > spec.cliff


def env_step(spec: EnvSpec, s, a, rng: np.random.Generator | None = None):
    """Advance the true dynamics by one step.

    Returns ``(s_next, reward, done)``; ``done`` is only ever raised by the cliff
    rule, the horizon is enforced by the caller. Actions outside the box are clipped.
    """
    s = np.asarray(s, dtype=float)
    a = np.clip(np.atleast_1d(np.asarray(a, dtype=float)), spec.action_low, spec.action_high)
    if a.shape != (spec.action_dim,) or s.shape != (spec.state_dim,):
        raise ValueError(f"{spec.kind}: expected state {spec.state_dim} / action {spec.action_dim}, "
                         f"got {s.shape} / {a.shape}")
    if rng is None or spec.process_noise == 0.0:
        noise = np.zeros(spec.action_dim)
    else:
        noise = spec.process_noise * rng.standard_normal(spec.action_dim)
    k = spec.action_dim
    pos, vel = s[:k], s[k:]
    new_pos = pos + spec.dt * vel
    if spec.kind == "Swirl2D":
        c, sn = math.cos(spec.swirl_angle), math.sin(spec.swirl_angle)
        rotated = np.array([c * vel[0] - sn * vel[1], sn * vel[0] + c * vel[1]])
        new_vel = rotated - spec.swirl_damping * np.tanh(vel) + spec.dt * a + noise
    else:
        new_vel = vel + spec.dt * a + noise
    s_next = np.concatenate([new_pos, new_vel])
    if not np.all(np.isfinite(s_next)):
        raise FloatingPointError(f"{spec.kind}: non-finite state {s_next}")
    goal = np.asarray(spec.goal)
    reward = -float(np.sum((new_pos - goal) ** 2)) - spec.control_cost * float(np.sum(a ** 2))
    return s_next, reward, is_terminal(spec, s_next)


@dataclass(frozen=True)
class LinearGaussianPolicy:
    """``a = K s + bias + N(0, sigma^2)``, clipped to the action box after the noise."""

    gain: np.ndarray
    bias: np.ndarray
    sigma: float = 0.0
    name: str = ""

    def act(self, s, rng: np.random.Generator | None = None) -> np.ndarray:
        return policy_act(self, s, rng)

    def act_batch(self, states: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        a = states @ np.asarray(self.gain).T + np.asarray(self.bias)
        if self.sigma > 0.0 and rng is not None:
            a = a + self.sigma * rng.standard_normal(a.shape)
        return np.clip(a, -1.0, 1.0)

    @property
    def action_dim(self) -> int:
        return int(np.asarray(self.bias).shape[0])

    @property
    def state_dim(self) -> int:
        return int(np.asarray(self.gain).shape[1])

    def describe(self) -> dict:
        return {"name": self.name, "gain": np.asarray(self.gain).tolist(),
                "bias": np.asarray(self.bias).tolist(), "sigma": self.sigma}

    @classmethod
    def from_description(cls, d: dict) -> "LinearGaussianPolicy":
        return cls(np.asarray(d["gain"], float), np.asarray(d["bias"], float), float(d["sigma"]), d.get("name", ""))


def policy_act(policy: LinearGaussianPolicy, s, rng: np.random.Generator | None = None) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape != (policy.state_dim,):
        raise ValueError(f"policy expects state of width {policy.state_dim}, got {s.shape}")
    return policy.act_batch(s[None, :], rng)[0]


# Behavioural data is collected with the middle gain plus action noise; the 11 target
# policies sweep from sluggish to strongly over-driven controllers.
GAIN_SWEEP = tuple(float(g) for g in np.geomspace(0.1, 10.0, 11))
BEHAVIOR_GAIN = 1.0
DAMPING = 0.9


def pd_policy(spec: EnvSpec, gain: float, sigma: float = 0.0, damping: float = DAMPING,
              name: str | None = None) -> LinearGaussianPolicy:
    """Proportional-derivative controller toward the goal: ``a = gain*(goal - pos) - damping*vel``."""
    k = spec.action_dim
    K = np.zeros((k, spec.state_dim))
    K[:, :k] = -gain * np.eye(k)
    K[:, k:] = -damping * np.eye(k)
    bias = gain * np.asarray(spec.goal, dtype=float)
    return LinearGaussianPolicy(K, bias, sigma, name or f"pd_gain_{gain:.4g}")


def target_policies(spec: EnvSpec) -> list[LinearGaussianPolicy]:
    return [pd_policy(spec, g, name=f"target_{i:02d}") for i, g in enumerate(GAIN_SWEEP)]


def behavior_policy(spec: EnvSpec, gain: float = BEHAVIOR_GAIN, sigma: float = 0.3) -> LinearGaussianPolicy:
    return pd_policy(spec, gain, sigma=sigma, name="behavior")


def push_policy(spec: EnvSpec, push: float = 0.5, sigma: float = 0.0, name: str = "push") -> LinearGaussianPolicy:
    """Open-loop constant push; drives CliffMass over the cliff."""
    K = np.zeros((spec.action_dim, spec.state_dim))
    return LinearGaussianPolicy(K, np.full(spec.action_dim, push), sigma, name)


@dataclass
class Trajectory:
    states: np.ndarray   # (T+1, state_dim)
    actions: np.ndarray  # (T, action_dim)
    rewards: np.ndarray  # (T,)
    terminated: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(len(self.states), -1)
        self.actions = np.asarray(self.actions, dtype=float).reshape(len(self.actions), -1) \
            if len(self.actions) else np.zeros((0, 0))
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        T = len(self.rewards)
        if len(self.states) != T + 1 or len(self.actions) != T:
            raise ValueError(f"inconsistent trajectory lengths: states {len(self.states)}, "
                             f"actions {len(self.actions)}, rewards {T}")

    @property
    def T(self) -> int:
        return len(self.rewards)

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.rewards * gamma ** np.arange(self.T)))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.terminated == other.terminated and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions) and np.array_equal(self.rewards, other.rewards))


@dataclass
class Dataset:
    env_id: str
    policy: dict
    trajectories: list[Trajectory] = field(default_factory=list)
    seed: int | None = None
    env: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def initial_states(self) -> np.ndarray:
        return np.stack([tr.states[0] for tr in self.trajectories])


def env_spec_from_dict(d: dict) -> EnvSpec:
    d = dict(d)
    d["goal"] = tuple(d["goal"])
    return EnvSpec(**d)


def env_spec_to_dict(spec: EnvSpec) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.__dict__.items()}


def run_episode(spec: EnvSpec, policy: LinearGaussianPolicy, rng: np.random.Generator) -> Trajectory:
    s = initial_state(spec, rng)
    states, actions, rewards = [s], [], []
    terminated = False
    for _ in range(spec.horizon):
        a = policy_act(policy, s, rng)
        s, r, done = env_step(spec, s, a, rng)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        if done:
            terminated = True
            break
    return Trajectory(np.array(states), np.array(actions).reshape(len(actions), spec.action_dim),
                      np.array(rewards), terminated)


def collect_dataset(spec: EnvSpec, policy: LinearGaussianPolicy, n_traj: int, seed: int) -> Dataset:
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(n_traj)
    trajs = [run_episode(spec, policy, np.random.default_rng(ss)) for ss in streams]
    return Dataset(spec.kind, policy.describe(), trajs, seed, env_spec_to_dict(spec))


def _batched_returns(spec: EnvSpec, policy: LinearGaussianPolicy, episodes: int, gamma: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised Monte-Carlo rollouts; returns per-episode discounted returns and lengths."""
    k = spec.action_dim
    s = spec.init_noise * rng.standard_normal((episodes, spec.state_dim))
    alive = np.ones(episodes, dtype=bool)
    ret = np.zeros(episodes)
    length = np.zeros(episodes, dtype=int)
    goal = np.asarray(spec.goal)
    c, sn = math.cos(spec.swirl_angle), math.sin(spec.swirl_angle)
    for t in range(spec.horizon):
        a = policy.act_batch(s, rng)
        noise = spec.process_noise * rng.standard_normal((episodes, k))
        pos, vel = s[:, :k], s[:, k:]
        new_pos = pos + spec.dt * vel
        if spec.kind == "Swirl2D":
            rot = np.stack([c * vel[:, 0] - sn * vel[:, 1], sn * vel[:, 0] + c * vel[:, 1]], axis=1)
            new_vel = rot - spec.swirl_damping * np.tanh(vel) + spec.dt * a + noise
        else:
            new_vel = vel + spec.dt * a + noise
        r = -np.sum((new_pos - goal) ** 2, axis=1) - spec.control_cost * np.sum(a ** 2, axis=1)
        ret += np.where(alive, gamma ** t * r, 0.0)
        length += alive
        s = np.concatenate([new_pos, new_vel], axis=1)
        if spec.cliff is not None:
            alive &= ~(np.abs(new_pos[:, 0]) > spec.cliff)
        if not alive.any():
            break
    return ret, length


def oracle_return(spec: EnvSpec, policy: LinearGaussianPolicy, episodes: int = 1000, gamma: float = 0.995,
                  seed: int = 0, return_lengths: bool = False):
    """Monte-Carlo ground truth on the true environment: ``(mean, standard error)``.

    With ``return_lengths`` the mean episode length is appended to the tuple.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rets, lengths = _batched_returns(spec, policy, episodes, gamma, np.random.default_rng(seed))
    se = float(rets.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    out = (float(rets.mean()), se)
    if return_lengths:
        out = out + (float(lengths.mean()),)
    return out


# -- JSON-lines dataset format ---------------------------------------------------------

def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    header = {"env_id": ds.env_id, "policy": ds.policy, "seed": ds.seed, "env": ds.env,
              "n_traj": len(ds.trajectories)}
    with path.open("w") as f:
        f.write(json.dumps(header) + "\n")
        for tr in ds.trajectories:
            # repr-based float serialisation round-trips doubles exactly
            f.write(json.dumps({"states": tr.states.tolist(), "actions": tr.actions.tolist(),
                                "rewards": tr.rewards.tolist(), "terminated": bool(tr.terminated)}) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with path.open() as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
        env_id, policy = header["env_id"], header["policy"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetFormatError(f"{path}: line 1: bad header ({e})") from e
    trajs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            trajs.append(Trajectory(np.array(rec["states"], float), np.array(rec["actions"], float),
                                    np.array(rec["rewards"], float), bool(rec["terminated"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"{path}: line {lineno}: {e}") from e
    expected = header.get("n_traj")
    if expected is not None and expected != len(trajs):
        raise DatasetFormatError(f"{path}: line {len(lines) + 1}: expected {expected} trajectories, "
                                 f"found {len(trajs)} (truncated file?)")
    return Dataset(env_id, policy, trajs, header.get("seed"), header.get("env", {}))


def dataset_summary(ds: Dataset, gamma: float = 1.0) -> dict:
    if not ds.trajectories:
        return {"count": 0, "mean_length": 0.0, "mean_return": 0.0}
    return {"count": len(ds.trajectories),
            "mean_length": float(np.mean([tr.T for tr in ds.trajectories])),
            "mean_return": float(np.mean([tr.discounted_return(gamma) for tr in ds.trajectories]))}


def iter_policies(spec: EnvSpec, which: str | Iterable[float] = "sweep") -> list[LinearGaussianPolicy]:
    if which == "sweep":
        return target_policies(spec)
    return [pd_policy(spec, float(g)) for g in which]
