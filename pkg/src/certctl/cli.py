"""Command line entry point: train, eval, compare, selftest."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .controllers import ControllerError, ZeroPolicy
from .dynamics import DynamicsError
from .fblin_clf import transverse
from .learning.ddpg import NumericalAbort
from .learning.training import (PolicyFormatError, Trainer, TrainingError, compute_losses,
                                 load_policy, save_policy)
from .sim import SimulationError, run_episode, trace_csv, trace_summary

log = logging.getLogger("certctl")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
LOG_COLUMNS = ["episode", "steps", "termination", "return", "mean_loss_V", "mean_loss_B",
               "mean_loss_C", "mean_loss_io", "infeasible_steps", "barrier_violation_steps",
               "sigma", "action_noise", "critic_loss", "eval_score"]


def _setup_logging():
    level = os.environ.get("CERTCTL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
        cfg.raw = {**cfg.raw, "seed": cfg.seed}
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _headers(cfg):
    return [f"config_hash={cfg.config_hash()}", f"seed={cfg.seed}"]


def _meta(cfg, **extra):
    d = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    d.update(extra)
    return d


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    return str(o)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _csv_text(header_lines, columns, rows):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    trainer = Trainer(cfg)
    if args.resume:
        trainer.load_checkpoint(args.resume)
        log.info("resumed at episode %d", trainer.episode)
    total = args.episodes if args.episodes is not None else cfg.learning.episodes
    t0 = time.perf_counter()
    try:
        res = trainer.run(max(0, total - trainer.episode))
    finally:
        trainer.save_checkpoint(out / "checkpoint.npz")
    meta = _meta(cfg)
    save_policy(out / "policy.json", res.policy, cfg.variant,
                {**meta, "best_episode": res.best_episode,
                 "critic": trainer.agent.critic.to_dict()})
    (out / "training_log.csv").write_text(_csv_text(
        _headers(cfg), LOG_COLUMNS, ([r[c] for c in LOG_COLUMNS] for r in res.log)))
    summary = {
        **meta,
        "variant": cfg.variant,
        "episodes": res.episodes_run,
        "best_episode": res.best_episode,
        "best_eval_score": res.best_score,
        "first_episode_mean_loss_V": res.log[0]["mean_loss_V"] if res.log else None,
        "final10_mean_loss_V": float(np.mean([r["mean_loss_V"] for r in res.log[-10:]]))
        if res.log else None,
        "wall_seconds": time.perf_counter() - t0,
    }
    _write_json(out / "train_summary.json", summary)
    if res.log and not args.no_figures:
        from .plotting import training_curve
        training_curve(res.log, out / "training_curve.png", meta)
    print(f"trained {res.episodes_run} episodes; policy written to {out / 'policy.json'}")
    return EXIT_OK


# ----------------------------------------------------------------------- eval

def _policy_for(cfg, variant, policy_path):
    ctrl = cfg.controller(variant)
    if not ctrl.learned:
        return None
    if policy_path is None:
        log.warning("no policy given for %s; using the zero policy", variant)
        return ZeroPolicy(ctrl.layout)
    pol = load_policy(policy_path)
    if pol.layout != ctrl.layout:
        raise PolicyFormatError(f"policy layout {pol.layout} does not fit variant {variant}")
    return pol


def _eval_seeds(cfg, n):
    return [cfg.seed * 100_003 + 10_000 + j for j in range(n)]


def _run(cfg, pair, variant, policy, seed):
    ctrl = cfg.controller(variant, policy=policy)
    try:
        trace = run_episode(pair, ctrl, cfg.episode_config(seed=seed))
    except SimulationError as exc:
        if exc.trace is None:
            raise
        trace = exc.trace
    return ctrl, trace


def _attach_reward(cfg, ctrl, trace):
    if trace.length < 2:
        return
    lc = cfg.learning
    from .learning.training import FAILED_TERMINATIONS, compute_reward
    losses = compute_losses(trace)
    r = compute_reward(losses, lc.w_v, lc.w_b, lc.w_c,
                       failed=trace.termination in FAILED_TERMINATIONS,
                       failure_penalty=lc.failure_penalty, io=ctrl.layout.io)
    trace.reward = np.r_[r, np.nan]
    return losses


def evaluate_config(cfg, variant=None, policy=None, episodes=None, mode=None):
    """Runs evaluation episodes; returns (traces, aggregate dict)."""
    variant = variant or cfg.variant
    n = int(episodes if episodes is not None else cfg.eval.get("episodes", 50))
    mode = mode or cfg.eval.get("mode", cfg.mode)
    pair = cfg.pair(mode)
    tol = cfg.violation_tol
    traces, per_ep = [], []
    for seed in _eval_seeds(cfg, n):
        ctrl, tr = _run(cfg, pair, variant, policy, seed)
        losses = _attach_reward(cfg, ctrl, tr)
        s = trace_summary(tr, tol, ctrl.clf.rate)
        s["seed"] = seed
        s["failed"] = tr.termination != "horizon"
        if losses is not None:
            s["mean_loss_V"] = float(np.mean(losses["V"]))
            s["mean_loss_B"] = float(np.mean(losses["B"])) if losses["B"].size else 0.0
            s["mean_loss_C"] = float(np.mean(losses["C"])) if losses["C"].size else 0.0
        traces.append(tr)
        per_ep.append(s)
    steps = sum(s["steps"] for s in per_ep)
    agg = {
        "variant": variant,
        "mode": mode,
        "episodes": n,
        "violation_tol": tol,
        "barrier_violation_episodes": sum(s["barrier_violation_steps"] > 0 for s in per_ep),
        "barrier_violation_steps": sum(s["barrier_violation_steps"] for s in per_ep),
        "constraint_violation_episodes": sum(s["constraint_violation_steps"] > 0 for s in per_ep),
        "constraint_violation_steps": sum(s["constraint_violation_steps"] for s in per_ep),
        "clf_violation_steps": sum(s["clf_violation_steps"] for s in per_ep),
        "infeasible_steps": sum(s["infeasible_steps"] for s in per_ep),
        "qp_infeasibility_rate": sum(s["infeasible_steps"] for s in per_ep) / max(steps, 1),
        "failures": sum(s["failed"] for s in per_ep),
        "steps": steps,
        "per_episode": per_ep,
    }
    return traces, agg


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    variant = args.variant or cfg.variant
    policy = _policy_for(cfg, variant, args.policy)
    traces, agg = evaluate_config(cfg, variant, policy, args.episodes, args.mode)
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    for j, (tr, s) in enumerate(zip(traces, agg["per_episode"])):
        (tdir / f"episode_{j:03d}.csv").write_text(
            trace_csv(tr, _headers(cfg) + [f"episode_seed={s['seed']}", f"variant={variant}"]))
    meta = _meta(cfg, policy=str(args.policy) if args.policy else None)
    _write_json(out / "eval_summary.json", {**meta, **agg})
    if not args.no_figures:
        from .plotting import episode_traces
        episode_traces(traces[:8], out / "eval_traces.png", meta=_meta(cfg))
    print(f"{variant} [{agg['mode']}]: {agg['barrier_violation_episodes']}/{agg['episodes']} "
          f"barrier-violating episodes, {agg['constraint_violation_episodes']} constraint-violating, "
          f"{agg['failures']} failures, infeasibility rate {agg['qp_infeasibility_rate']:.4f}")
    return EXIT_OK


# -------------------------------------------------------------------- compare

def _margins(ctrl, tr):
    nom = ctrl.nominal
    eta = np.array([np.linalg.norm(transverse(nom, x).eta) for x in tr.x])
    vmargin = np.full(tr.length, np.nan)
    vmargin[1:] = tr.vdot_meas()[1:] + ctrl.clf.rate * tr.V[:-1]
    return eta, vmargin, tr.B, tr.zeta_meas()


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    variants = args.variants or cfg.compare.get("variants") or [cfg.variant]
    policies = dict(cfg.compare.get("policies", {}))
    if args.policy:
        policies[cfg.variant] = args.policy
    n = int(args.episodes if args.episodes is not None else cfg.compare.get("episodes", 1))
    mode = args.mode or cfg.compare.get("mode", cfg.mode)
    pair = cfg.pair(mode)
    seeds = _eval_seeds(cfg, n)
    summary = {**_meta(cfg), "mode": mode, "episode_seeds": seeds, "variants": {}}
    tol = cfg.violation_tol
    for j, seed in enumerate(seeds):
        cols, data, series = ["time"], [], {}
        t_ref = None
        for v in variants:
            policy = _policy_for(cfg, v, policies.get(v))
            ctrl, tr = _run(cfg, pair, v, policy, seed)
            eta, vm, B, Z = _margins(ctrl, tr)
            t_ref = tr.t if t_ref is None or len(tr.t) > len(t_ref) else t_ref
            cols += [f"{v}:eta_norm", f"{v}:Vdot_margin"]
            cols += [f"{v}:B_{i}" for i in range(B.shape[1])]
            cols += [f"{v}:zeta_{k}" for k in range(Z.shape[1])]
            data.append(np.column_stack([eta, vm, B, Z]))
            series[v] = {"eta_norm": eta, "B_min": B.min(axis=1) if B.shape[1] else None}
            s = summary["variants"].setdefault(v, {
                "barrier_violation_steps": 0, "constraint_violation_steps": 0,
                "clf_violation_steps": 0, "infeasible_steps": 0, "failures": 0,
                "episodes": 0, "seeds": []})
            s["barrier_violation_steps"] += tr.barrier_violations(tol)
            s["constraint_violation_steps"] += tr.constraint_violations(tol)
            s["clf_violation_steps"] += tr.clf_violations(tol, ctrl.clf.rate)
            s["infeasible_steps"] += tr.infeasible_count()
            s["failures"] += tr.termination != "horizon"
            s["episodes"] += 1
            s["seeds"].append(seed)
        K = len(t_ref)
        rows = []
        for k in range(K):
            row = [t_ref[k]]
            for block in data:
                row += list(block[k]) if k < len(block) else [np.nan] * block.shape[1]
            rows.append(row)
        (out / f"compare_{j:03d}.csv").write_text(_csv_text(
            _headers(cfg) + [f"episode_seed={seed}", "variants=" + ",".join(variants)], cols, rows))
        if j == 0 and not args.no_figures:
            from .plotting import compare_panels
            compare_panels(t_ref, series, out / "compare.png", _meta(cfg, seed=seed))
    _write_json(out / "compare_summary.json", summary)
    for v, s in summary["variants"].items():
        print(f"{v}: barrier {s['barrier_violation_steps']}, constraint "
              f"{s['constraint_violation_steps']}, CLF {s['clf_violation_steps']} violation steps, "
              f"{s['failures']} failures")
    return EXIT_OK


# ------------------------------------------------------------------- selftest

def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    failures = run_selftest(args.inject or ())
    print(f"{failures} propert{'y' if failures == 1 else 'ies'} failed")
    return min(failures, 125)


# ----------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="certctl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (default: config out_dir)")
        sp.add_argument("--episodes", type=int, help="number of episodes")
        sp.add_argument("--no-figures", action="store_true", help="skip PNG output")

    sp = sub.add_parser("train", help="train the estimator policy")
    common(sp)
    sp.add_argument("--resume", help="checkpoint.npz written by an earlier run")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a controller (and policy)")
    common(sp)
    sp.add_argument("--policy", help="policy JSON")
    sp.add_argument("--variant", help="controller variant (default: config)")
    sp.add_argument("--mode", choices=["scale", "payload", "none"], help="uncertainty mode")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="run several variants on identical episodes")
    common(sp)
    sp.add_argument("--policy", help="policy JSON for the config's variant")
    sp.add_argument("--variants", nargs="+", help="variants (default: [compare] table)")
    sp.add_argument("--mode", choices=["scale", "payload", "none"], help="uncertainty mode")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("selftest", help="oracle and zero-policy property suite")
    sp.add_argument("--inject", nargs="*", choices=["lyapunov", "qp"],
                    help="deliberately break a component")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PolicyFormatError, NumericalAbort, SimulationError, TrainingError, ControllerError,
            DynamicsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
