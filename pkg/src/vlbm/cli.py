"""Command-line entry point: ``vlbm <command> [flags]``.

Commands: gen-data, train, eval, ope, report, export-latents. Each accepts ``--seed``
and ``--config`` (a JSON file mirroring :class:`vlbm.harness.ExperimentConfig`, with an
optional ``"preset"`` key naming the base settings). Flags override the file, and the
merged configuration is written as ``effective_config.json`` next to every output.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``VLBM_LOG`` selects the
logging level (``quiet``, ``info`` or ``debug``; default ``info``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ar, envs, harness
from .envs import DatasetFormatError
from .model import TrainingDivergedError, export_latents, load_checkpoint, save_checkpoint, write_latents_csv

logger = logging.getLogger("vlbm")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
DEFAULT_PRESET = "desk"
CONFIG_ECHO = "effective_config.json"


class UsageError(Exception):
    """Bad flags or inputs that the user must fix; exit code 2."""


class RuntimeFailure(Exception):
    """The command was well-formed but failed while running; exit code 1."""


# -- configuration -------------------------------------------------------------------------

def load_config(path: str | None, **overrides) -> harness.ExperimentConfig:
    base_name, doc = DEFAULT_PRESET, {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise RuntimeFailure(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        doc = dict(doc)
        base_name = doc.pop("preset", base_name)
    try:
        cfg = harness.preset(base_name).merged(**doc)
        return cfg.merged(**overrides)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def echo_config(cfg: harness.ExperimentConfig, directory: Path, extra: dict | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"config": cfg.to_dict(), **(extra or {})}
    (directory / CONFIG_ECHO).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _check_env(name: str) -> None:
    if name not in envs.ENV_IDS:
        raise UsageError(f"unknown environment: {name} (choose from {', '.join(envs.ENV_IDS)})")


def _read_data(path: str) -> envs.Dataset:
    try:
        return envs.read_dataset(path)
    except OSError as e:
        raise RuntimeFailure(f"cannot read dataset {path}: {e}") from e
    except DatasetFormatError as e:
        raise RuntimeFailure(str(e)) from e


def _parse_policies(spec: envs.EnvSpec, text: str) -> list[envs.LinearGaussianPolicy]:
    if text == "sweep":
        return envs.target_policies(spec)
    try:
        gains = [float(g) for g in text.split(",") if g.strip()]
    except ValueError as e:
        raise UsageError(f"--policies expects 'sweep' or comma-separated gains, got {text!r}") from e
    if not gains:
        raise UsageError("--policies is empty")
    return envs.iter_policies(spec, gains)


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as e:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from e
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


# -- commands ----------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _check_env(args.env)
    cfg = load_config(args.config, env=args.env, n_traj=args.n_traj, data_seed=args.seed,
                      behavior_gain=args.policy_gain, behavior_sigma=args.noise)
    spec = envs.make_env(cfg.env)
    if args.push is not None:
        policy = envs.push_policy(spec, args.push, cfg.behavior_sigma, name="push_behavior")
    else:
        policy = harness.behavior_for(cfg, spec)
    ds = envs.collect_dataset(spec, policy, cfg.n_traj, cfg.data_seed)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        envs.write_dataset(ds, out)
        echo_config(cfg, out.parent, {"command": "gen-data", "policy": policy.describe()})
    except OSError as e:
        raise RuntimeFailure(f"cannot write {out}: {e}") from e
    s = envs.dataset_summary(ds, cfg.gamma)
    print(f"wrote {s['count']} trajectories to {out}: mean length {s['mean_length']:.2f}, "
          f"mean return {s['mean_return']:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = _read_data(args.data)
    if ds.env_id not in envs.ENV_IDS:
        raise UsageError(f"unknown environment: {ds.env_id}")
    cfg = cfg.merged(env=ds.env_id)
    out = Path(args.out_checkpoint)
    log_rows: list[tuple[int, float, float]] = []
    try:
        model = harness.train_variant(args.variant, ds, cfg, args.seed) if len(ds) else None
    except TrainingDivergedError as e:
        raise RuntimeFailure(f"training diverged: {e}") from e
    if model is None:
        raise RuntimeFailure("cannot train on an empty dataset")
    member_logs = model.logs
    for m, log_ in enumerate(member_logs):
        for it, (obj, lr) in enumerate(zip(log_.objective, log_.lr)):
            log_rows.append((m, it, obj, lr))
    meta = {"variant": args.variant, "train_seed": args.seed, "dataset": ds.policy}
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(model.params, ar.ARParams):
            ar.save_ar_checkpoint(model.params, out, meta)
        else:
            save_checkpoint(model.params, out, meta)
        with (out.parent / "training_log.csv").open("w", newline="") as f:
            w = csv.writer(f)
            header = ["iter", "objective", "lr"] if len(member_logs) == 1 else ["member", "iter", "objective", "lr"]
            w.writerow(header)
            for m, it, obj, lr in log_rows:
                row = [it, repr(obj), repr(lr)]
                w.writerow(row if len(member_logs) == 1 else [m] + row)
        echo_config(cfg, out.parent, {"command": "train", "variant": args.variant, "seed": args.seed})
    except OSError as e:
        raise RuntimeFailure(f"cannot write outputs next to {out}: {e}") from e
    weights = model.weights
    msg = f"trained {args.variant} ({sum(len(l.objective) for l in member_logs)} iterations) -> {out}"
    if weights is not None:
        msg += "; weights " + " ".join(f"{w:.4g}" for w in weights)
    print(msg)
    return 0


def _load_any(path: str):
    try:
        doc_kind = json.loads(Path(path).read_text())["meta"].get("model_kind")
    except OSError as e:
        raise RuntimeFailure(f"cannot read checkpoint {path}: {e}") from e
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise RuntimeFailure(f"{path} is not a checkpoint: {e}") from e
    if doc_kind == ar.AR_KIND:
        return ar.load_ar_checkpoint(path)
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    cfg = load_config(args.config, episodes=args.episodes)
    params = _load_any(args.checkpoint)
    env_id = args.env or cfg.env
    _check_env(env_id)
    spec = envs.make_env(env_id)
    policies = _parse_policies(spec, args.policies)
    init = None
    if isinstance(params, ar.ARParams):
        if args.data is None:
            raise UsageError("an autoregressive checkpoint needs --data for its initial states")
        init = _read_data(args.data).initial_states()
    variant = "AR-Ensemble" if init is not None else "checkpoint"
    model = harness.TrainedModel(variant, params, [], init)
    rows = []
    for i, pol in enumerate(policies):
        res = harness.estimate_return(model, pol, cfg, spec.horizon, harness._seed_rng(args.seed, 3, i))
        se = float(res.returns.std(ddof=1) / np.sqrt(len(res.returns))) if len(res.returns) > 1 else 0.0
        rows.append((pol.name, res.estimate, se, float(res.lengths.mean())))
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("policy", "estimate", "std_err", "mean_length"))
            for name, est, se, length in rows:
                w.writerow([name, repr(est), repr(se), repr(length)])
        echo_config(cfg, out.parent, {"command": "eval", "checkpoint": str(args.checkpoint), "seed": args.seed})
    except OSError as e:
        raise RuntimeFailure(f"cannot write {out}: {e}") from e
    for name, est, se, _ in rows:
        print(f"{name}\t{est:.4f} +- {se:.4f}")
    return 0


def cmd_ope(args) -> int:
    variants = list(harness.VARIANTS) if args.variant == ["all"] else args.variant
    overrides = {"variants": variants}
    if args.seeds is not None:
        overrides["seeds"] = _parse_seeds(args.seeds)
    if args.env is not None:
        _check_env(args.env)
        overrides["env"] = args.env
    if args.data is None:
        overrides["data_seed"] = args.seed
    cfg = load_config(args.config, **overrides)
    dataset = None
    if args.data is not None:
        dataset = _read_data(args.data)
        cfg = cfg.merged(env=dataset.env_id)
    spec = envs.make_env(cfg.env)
    policies = _parse_policies(spec, args.policies)
    out = Path(args.out_dir)
    cache_path = Path(args.oracle_cache) if args.oracle_cache else out / "oracle_cache.json"
    try:
        report = harness.run_experiment(cfg, out, dataset, policies, harness.OracleCache(cache_path))
    except harness.ExperimentError as e:
        raise RuntimeFailure(f"{e.variant} failed at seed {e.seed}: {e.cause}") from e
    echo_config(cfg, out, {"command": "ope", "policies": args.policies,
                           "data": str(args.data) if args.data else None})
    _print_summary(report)
    return 0


def _print_summary(report: harness.MetricsReport) -> None:
    print("variant\tseeds\trank_corr\tregret_norm\tmae")
    for v, s in report.summary().items():
        rank = "n/a" if s["mean_rank_corr"] is None else f"{s['mean_rank_corr']:.3f}"
        print(f"{v}\t{len(report.for_variant(v))}\t{rank}\t{s['mean_regret_norm']:.3f}\t{s['mean_mae']:.3f}")


def cmd_report(args) -> int:
    load_config(args.config)  # validated for symmetry with the other commands
    path = Path(args.out_dir)
    try:
        report = harness.read_report(path)
    except OSError as e:
        raise RuntimeFailure(f"cannot read report in {path}: {e}") from e
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise RuntimeFailure(f"malformed report in {path}: {e}") from e
    _print_summary(report)
    print("variant\tseed\trank_corr\tregret_raw\tregret_norm\tmae")
    for r in report.runs:
        rank = "n/a" if r.rank_corr is None else f"{r.rank_corr:.3f}"
        print(f"{r.variant}\t{r.seed}\t{rank}\t{r.regret_raw:.4f}\t{r.regret_norm:.3f}\t{r.mae:.3f}")
    return 0


def cmd_export_latents(args) -> int:
    load_config(args.config)
    try:
        kind = json.loads(Path(args.checkpoint).read_text())["meta"].get("model_kind")
    except OSError as e:
        raise RuntimeFailure(f"cannot read checkpoint {args.checkpoint}: {e}") from e
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise RuntimeFailure(f"{args.checkpoint} is not a checkpoint: {e}") from e
    if kind == ar.AR_KIND:
        raise UsageError("autoregressive checkpoints have no latent space to export")
    params = load_checkpoint(args.checkpoint)
    if params.config.kind == "ensemble":
        raise UsageError("ensemble checkpoints carry no encoder; export a member instead")
    ds = _read_data(args.data)
    rows = export_latents(params, ds.trajectories, [i for i in range(len(ds))])
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_latents_csv(rows, params.config.latent_dim, out)
    except OSError as e:
        raise RuntimeFailure(f"cannot write {out}: {e}") from e
    print(f"wrote {len(rows)} latent rows to {out}")
    return 0


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlbm", description="Variational latent branching model OPE toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        p.add_argument("--config", default=None, help="JSON experiment config; flags override it")
        return p

    g = common(sub.add_parser("gen-data", help="collect a behavioural dataset"))
    g.add_argument("--env", default="LineMass")
    g.add_argument("--policy-gain", type=float, default=None, help="behaviour controller gain")
    g.add_argument("--noise", type=float, default=None, help="behaviour action-noise scale")
    g.add_argument("--push", type=float, default=None, help="use a constant push instead of the controller")
    g.add_argument("--n-traj", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train", help="train one model variant"))
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=harness.VARIANTS, default="VLBM")
    t.add_argument("--out-checkpoint", required=True)
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="estimate policy returns with a trained checkpoint"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", default=None)
    e.add_argument("--policies", default="sweep", help="'sweep' or comma-separated controller gains")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--data", default=None, help="dataset supplying initial states (autoregressive models)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    o = common(sub.add_parser("ope", help="run the full off-policy evaluation study"))
    o.add_argument("--data", default=None, help="dataset file; generated from the config when omitted")
    o.add_argument("--env", default=None)
    o.add_argument("--variant", nargs="+", default=["VLBM"], choices=list(harness.VARIANTS) + ["all"])
    o.add_argument("--policies", default="sweep")
    o.add_argument("--seeds", default=None, help="comma-separated training seeds")
    o.add_argument("--oracle-cache", default=None)
    o.add_argument("--out-dir", required=True)
    o.set_defaults(func=cmd_ope)

    r = common(sub.add_parser("report", help="print the metrics stored in an ope output directory"))
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report)

    x = common(sub.add_parser("export-latents", help="write encoder latents of a dataset as CSV"))
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_latents)
    return parser


def configure_logging() -> None:
    level_name = os.environ.get("VLBM_LOG", "info").lower()
    if level_name not in LOG_LEVELS:
        raise UsageError(f"VLBM_LOG must be one of {', '.join(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    if args.command == "ope" and "all" in args.variant and len(args.variant) > 1:
        parser.error("--variant all cannot be combined with other variants")
    try:
        configure_logging()
        return args.func(args)
    except UsageError as e:
        print(f"vlbm {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (RuntimeFailure, TrainingDivergedError) as e:
        print(f"vlbm {args.command}: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
