"""Off-policy evaluation experiments: train a model variant, estimate every target policy's
return by rollout and score the estimates against Monte-Carlo ground truth.

Six variants are available:

``VLM``                 single latent model, no alignment loss
``VLM+RSA``             single latent model with the pairwise alignment loss
``VLM+RSA(MSE)``        single latent model with the plain MSE alignment loss
``VLM+RSA-Ensemble``    B independently trained VLM+RSA models averaged with uniform weights
``VLBM``                the branched, gated model
``AR-Ensemble``         gated ensemble of autoregressive dynamics models
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ar, envs, metrics
from .envs import Dataset, EnvSpec, LinearGaussianPolicy
from .model import (ModelConfig, RolloutResult, TrainConfig, TrainLog, VLBMParams, branch_weights_array,
                    init_params, rollout, stack_members, train)

logger = logging.getLogger(__name__)

VARIANTS = ("VLM", "VLM+RSA", "VLM+RSA(MSE)", "VLM+RSA-Ensemble", "VLBM", "AR-Ensemble")

_VARIANT_MODEL = {
    "VLM": ("vlm", "none"),
    "VLM+RSA": ("vlm", "pairwise"),
    "VLM+RSA(MSE)": ("vlm", "mse"),
    "VLM+RSA-Ensemble": ("vlm", "pairwise"),
    "VLBM": ("vlbm", "pairwise"),
}


class ExperimentError(RuntimeError):
    """A variant failed for one seed; carries both so the caller can report them."""

    def __init__(self, variant: str, seed: int, cause: Exception):
        self.variant, self.seed, self.cause = variant, seed, cause
        super().__init__(f"{variant} failed for seed {seed}: {cause}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one OPE study; mirrored field-for-field by the JSON config file."""

    env: str = "LineMass"
    variants: tuple[str, ...] = ("VLBM",)
    seeds: tuple[int, ...] = (0, 1, 2)
    # data
    n_traj: int = 200
    data_seed: int = 1000
    behavior_gain: float = 1.0
    behavior_sigma: float = 0.3
    # evaluation
    gamma: float = 0.995
    episodes: int = 50
    oracle_episodes: int = 1000
    oracle_seed: int = 0
    # latent models
    latent_dim: int = 16
    hidden: int = 64
    mlp_hidden: tuple[int, ...] = (128, 64)
    post_hidden: int = 64
    branches: int = 10
    C: float = 0.1
    C1: float = 0.1
    C2: float = 0.1
    eps: float = 1e-8
    branch_init: str = "prior"
    termination: bool = False
    # optimisation
    max_iter: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.997
    l2: float = 1e-3
    gate_lr_scale: float = 1.0
    # autoregressive baseline
    ar_members: int = 10
    ar_mlp_hidden: tuple[int, ...] = (64, 32)
    ar_max_iter: int = 1000
    ar_batch_size: int = 256
    ar_lr: float = 1e-3

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
        if self.env not in envs.ENV_IDS:
            raise ValueError(f"unknown environment {self.env!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.episodes < 1 or self.oracle_episodes < 1:
            raise ValueError("episode counts must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        names = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        out = {}
        for k, v in d.items():
            out[k] = tuple(v) if isinstance(v, list) else v
        return cls(**out)

    def merged(self, **overrides) -> "ExperimentConfig":
        """Copy with the non-``None`` overrides applied (command-line flags beat the file)."""
        return self.from_dict({**self.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})


PRESETS = {
    # the published settings: 16-d latents, 64-unit LSTMs, 10 branches, 1000 iterations
    "paper": ExperimentConfig(),
    # laptop-sized networks used by the acceptance study
    "desk": ExperimentConfig(latent_dim=4, hidden=32, mlp_hidden=(64, 32), post_hidden=32, branches=5,
                             C=1.0, C1=1.0, C2=1.0, max_iter=900, batch_size=32, lr=3e-3, gate_lr_scale=10.0,
                             ar_mlp_hidden=(32, 32), ar_max_iter=600, ar_lr=3e-3),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name].merged(**overrides)


def env_spec(cfg: ExperimentConfig) -> EnvSpec:
    return envs.make_env(cfg.env)


def behavior_for(cfg: ExperimentConfig, spec: EnvSpec) -> LinearGaussianPolicy:
    return envs.behavior_policy(spec, cfg.behavior_gain, cfg.behavior_sigma)


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = env_spec(cfg)
    return envs.collect_dataset(spec, behavior_for(cfg, spec), cfg.n_traj, cfg.data_seed)


def model_config(cfg: ExperimentConfig, variant: str, state_dim: int, action_dim: int) -> ModelConfig:
    kind, rsa_kind = _VARIANT_MODEL[variant]
    return ModelConfig(state_dim, action_dim, kind=kind, latent_dim=cfg.latent_dim, hidden=cfg.hidden,
                       mlp_hidden=tuple(cfg.mlp_hidden), post_hidden=cfg.post_hidden,
                       branches=cfg.branches if kind == "vlbm" else 1, rsa=rsa_kind, C=cfg.C, C1=cfg.C1,
                       C2=cfg.C2, eps=cfg.eps, termination=cfg.termination, branch_init=cfg.branch_init)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(max_iter=cfg.max_iter, batch_size=cfg.batch_size, lr=cfg.lr, lr_decay=cfg.lr_decay,
                       l2=cfg.l2, gate_lr_scale=cfg.gate_lr_scale)


def ar_config(cfg: ExperimentConfig, state_dim: int, action_dim: int) -> ar.ARConfig:
    return ar.ARConfig(state_dim, action_dim, members=cfg.ar_members, mlp_hidden=tuple(cfg.ar_mlp_hidden),
                       eps=cfg.eps)


def ar_train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(max_iter=cfg.ar_max_iter, batch_size=cfg.ar_batch_size, lr=cfg.ar_lr,
                       lr_decay=cfg.lr_decay, l2=cfg.l2, gate_lr_scale=cfg.gate_lr_scale)


# -- training and estimation ----------------------------------------------------------------

@dataclass
class TrainedModel:
    variant: str
    params: VLBMParams | ar.ARParams
    logs: list[TrainLog]
    initial_states: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray | None:
        if isinstance(self.params, ar.ARParams):
            return ar.gate_weights_array(self.params)
        if self.params.config.kind == "vlm":
            return None
        return branch_weights_array(self.params)


def _seed_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([abs(int(k)) for k in key]))


def train_variant(variant: str, dataset: Dataset, cfg: ExperimentConfig, seed: int,
                  callback: Callable[[int, float], None] | None = None) -> TrainedModel:
    """Train one variant from scratch; every random choice derives from ``seed``."""
    spec = envs.env_spec_from_dict(dataset.env) if dataset.env else env_spec(cfg)
    ds_dim, da_dim = spec.state_dim, spec.action_dim
    if variant == "AR-Ensemble":
        params, log_ = ar.ar_train(dataset, ar_config(cfg, ds_dim, da_dim), ar_train_config(cfg),
                                   _seed_rng(seed, 1), seed=seed)
        return TrainedModel(variant, params, [log_], dataset.initial_states())
    mcfg = model_config(cfg, variant, ds_dim, da_dim)
    if variant == "VLM+RSA-Ensemble":
        members, logs = [], []
        for b in range(cfg.branches):
            p0 = init_params(mcfg, seed * 1000 + b)
            p, log_ = train(p0, dataset, train_config(cfg), _seed_rng(seed, 2, b), callback=callback)
            members.append(p)
            logs.append(log_)
        return TrainedModel(variant, stack_members(members), logs)
    p0 = init_params(mcfg, seed)
    p, log_ = train(p0, dataset, train_config(cfg), _seed_rng(seed, 1), callback=callback)
    return TrainedModel(variant, p, [log_])


def estimate_return(model: TrainedModel, policy: LinearGaussianPolicy, cfg: ExperimentConfig, horizon: int,
                    rng: np.random.Generator) -> RolloutResult:
    if isinstance(model.params, ar.ARParams):
        return ar.ar_rollout(model.params, policy, horizon, cfg.gamma, cfg.episodes, rng, model.initial_states)
    return rollout(model.params, policy, horizon, cfg.gamma, cfg.episodes, rng)


def estimate_returns(model: TrainedModel, policies: Sequence[LinearGaussianPolicy], cfg: ExperimentConfig,
                     seed: int, horizon: int) -> np.ndarray:
    return np.array([estimate_return(model, pol, cfg, horizon, _seed_rng(seed, 3, i)).estimate
                     for i, pol in enumerate(policies)])


# -- ground truth ----------------------------------------------------------------------------

class OracleCache:
    """Monte-Carlo true returns persisted as JSON, keyed by (env, policy, gamma, episodes, seed)."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[str, dict] = {}
        if self.path is not None and self.path.exists():
            self._data = json.loads(self.path.read_text())

    @staticmethod
    def key(spec: EnvSpec, policy: LinearGaussianPolicy, gamma: float, episodes: int, seed: int) -> str:
        return json.dumps({"env": envs.env_spec_to_dict(spec), "policy": policy.describe(), "gamma": gamma,
                           "episodes": episodes, "seed": seed}, sort_keys=True)

    def __len__(self):
        return len(self._data)

    def get(self, spec: EnvSpec, policy: LinearGaussianPolicy, gamma: float, episodes: int, seed: int) -> dict:
        k = self.key(spec, policy, gamma, episodes, seed)
        if k not in self._data:
            mean, se, length = envs.oracle_return(spec, policy, episodes, gamma, seed, return_lengths=True)
            self._data[k] = {"mean": mean, "se": se, "mean_length": length}
            self.save()
        return self._data[k]

    def save(self) -> None:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self._data, sort_keys=True, indent=1))


def true_returns(spec: EnvSpec, policies: Sequence[LinearGaussianPolicy], cfg: ExperimentConfig,
                 cache: OracleCache) -> np.ndarray:
    return np.array([cache.get(spec, p, cfg.gamma, cfg.oracle_episodes, cfg.oracle_seed)["mean"]
                     for p in policies])


# -- scoring and reports ----------------------------------------------------------------------

def score(est: np.ndarray, truth: np.ndarray) -> dict:
    """Rank correlation (``None`` when undefined), raw/normalised regret@1 and MAE."""
    try:
        rank = metrics.spearman(est, truth)
    except metrics.UndefinedMetricError:
        rank = None
    raw, norm = metrics.regret_at_1(est, truth)
    return {"rank_corr": rank, "regret_raw": raw, "regret_norm": norm, "mae": metrics.mae_metric(est, truth)}


@dataclass
class RunResult:
    variant: str
    seed: int
    estimates: list[float]
    rank_corr: float | None
    regret_raw: float
    regret_norm: float
    mae: float
    branch_weights: list[float] | None = None
    objective_first: float | None = None
    objective_last: float | None = None


@dataclass
class MetricsReport:
    config: dict
    policies: list[str]
    truths: list[float]
    runs: list[RunResult] = field(default_factory=list)

    def for_variant(self, variant: str) -> list[RunResult]:
        return [r for r in self.runs if r.variant == variant]

    def summary(self) -> dict:
        """Per-variant mean and median of each metric (missing rank correlations skipped)."""
        out = {}
        for v in dict.fromkeys(r.variant for r in self.runs):
            runs = self.for_variant(v)
            entry = {}
            for key in ("rank_corr", "regret_raw", "regret_norm", "mae"):
                vals = [getattr(r, key) for r in runs if getattr(r, key) is not None]
                entry[f"mean_{key}"] = float(np.mean(vals)) if vals else None
                entry[f"median_{key}"] = float(np.median(vals)) if vals else None
            out[v] = entry
        return out

    def to_dict(self) -> dict:
        return {"config": self.config, "policies": self.policies, "truths": self.truths,
                "runs": [asdict(r) for r in self.runs], "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(d["config"], list(d["policies"]), list(d["truths"]), [RunResult(**r) for r in d["runs"]])


SUMMARY_COLUMNS = ("variant", "seed", "rank_corr", "regret_raw", "regret_norm", "mae")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_report(report: MetricsReport, out_dir: str | Path) -> None:
    """``report.json``, ``summary.csv`` and ``branch_weights.csv`` in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    with (out / "summary.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for r in report.runs:
            w.writerow([r.variant, r.seed, _fmt(r.rank_corr), _fmt(r.regret_raw), _fmt(r.regret_norm), _fmt(r.mae)])
    with (out / "branch_weights.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("variant", "seed", "branch", "weight"))
        for r in report.runs:
            for b, wb in enumerate(r.branch_weights or []):
                w.writerow([r.variant, r.seed, b, _fmt(wb)])


def read_report(out_dir: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads((Path(out_dir) / "report.json").read_text()))


def _mean_or_none(xs: Sequence[float]) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, dataset: Dataset | None = None,
                   policies: Sequence[LinearGaussianPolicy] | None = None, cache: OracleCache | None = None,
                   on_trained: Callable[[TrainedModel, int], None] | None = None) -> MetricsReport:
    """Train every variant for every seed, estimate all policies and score against the oracle.

    Seeds run sequentially; every random draw is derived from ``(seed, stage, index)`` so
    a rerun with the same configuration reproduces the report byte for byte.
    """
    spec = env_spec(cfg)
    dataset = dataset if dataset is not None else make_dataset(cfg)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    policies = list(policies) if policies is not None else envs.target_policies(spec)
    if cache is None:
        cache = OracleCache(Path(out_dir) / "oracle_cache.json" if out_dir is not None else None)
    truth = true_returns(spec, policies, cfg, cache)
    horizon = spec.horizon
    report = MetricsReport(cfg.to_dict(), [p.name for p in policies], truth.tolist())
    for variant in cfg.variants:
        for seed in cfg.seeds:
            logger.info("training %s seed %d", variant, seed)
            try:
                model = train_variant(variant, dataset, cfg, seed)
                est = estimate_returns(model, policies, cfg, seed, horizon)
            except Exception as e:  # reported with the failing seed
                raise ExperimentError(variant, seed, e) from e
            sc = score(est, truth)
            w = model.weights
            report.runs.append(RunResult(
                variant, seed, est.tolist(), sc["rank_corr"], sc["regret_raw"], sc["regret_norm"], sc["mae"],
                None if w is None else w.tolist(),
                _mean_or_none(_window(model.logs, first=True)), _mean_or_none(_window(model.logs, first=False))))
            logger.info("%s seed %d: rank %s regret %.3f mae %.3f", variant, seed, sc["rank_corr"],
                        sc["regret_norm"], sc["mae"])
            if on_trained is not None:
                on_trained(model, seed)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _window(logs: Sequence[TrainLog], first: bool, size: int = 20) -> list[float]:
    out = []
    for log_ in logs:
        out.extend(log_.objective[:size] if first else log_.objective[-size:])
    return out


# -- early termination study ---------------------------------------------------------------------

CLIFF_BEHAVIOR_PUSH = 0.25
CLIFF_BEHAVIOR_SIGMA = 0.5
CLIFF_TARGET_PUSH = 0.5


def cliff_behavior_policy(spec: EnvSpec) -> LinearGaussianPolicy:
    """Noisy gentle push: most episodes leave the safe region late, a few never do."""
    return envs.push_policy(spec, CLIFF_BEHAVIOR_PUSH, CLIFF_BEHAVIOR_SIGMA, name="cliff_behavior")


def termination_study(cfg: ExperimentConfig, seed: int, cache: OracleCache | None = None,
                      dataset: Dataset | None = None) -> dict:
    """Compare model-rollout and true mean episode lengths for a policy that drives off the cliff."""
    spec = envs.make_env("CliffMass")
    cfg = cfg.merged(env="CliffMass", termination=True)
    if dataset is None:
        dataset = envs.collect_dataset(spec, cliff_behavior_policy(spec), cfg.n_traj, cfg.data_seed)
    target = envs.push_policy(spec, CLIFF_TARGET_PUSH, 0.0, name="cliff_target")
    cache = cache or OracleCache()
    true = cache.get(spec, target, cfg.gamma, cfg.oracle_episodes, cfg.oracle_seed)
    model = train_variant("VLBM", dataset, cfg, seed)
    res = estimate_return(model, target, cfg, spec.horizon, _seed_rng(seed, 4))
    model_len = float(res.lengths.mean())
    return {"seed": seed, "model_mean_length": model_len, "true_mean_length": true["mean_length"],
            "relative_gap": abs(model_len - true["mean_length"]) / true["mean_length"],
            "dataset_mean_length": float(np.mean([tr.T for tr in dataset.trajectories])),
            "model_estimate": res.estimate, "true_return": true["mean"]}
