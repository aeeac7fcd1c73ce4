"""Episodic DDPG training of the uncertainty estimates.

Rewards are built from measured trajectory data only: numerically
differentiated V, barrier and constraint signals are compared with what the
nominal-model rows plus the learned corrections predicted when the input
was applied.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..controllers import ControllerError, EstimateLayout, EstimatorPolicy
from ..sim import SimulationError, backward_difference, run_episode
from .ddpg import DdpgAgent, DdpgHyper, NumericalAbort, ReplayBuffer
from .mlp import Mlp

log = logging.getLogger("certctl.training")

POLICY_FORMAT_VERSION = 1
FAILED_TERMINATIONS = ("failure", "diverged", "infeasible", "error")


class TrainingError(RuntimeError):
    pass


class PolicyFormatError(ValueError):
    pass


# -------------------------------------------------------------- measurements

def numerical_derivative(values, ts: float) -> np.ndarray:
    """Backward difference of a sampled signal; entry 0 is NaN."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 0 or v.shape[0] < 2:
        raise ValueError("need at least two samples")
    return backward_difference(v, ts)


def compute_losses(trace, controller=None, policy=None) -> dict:
    """Squared prediction errors per transition k -> k+1.

    The estimate made at step k (when mu_k was applied) is compared with the
    measurement available at step k+1. When ``policy`` is given the rows are
    re-evaluated with its estimates at the recorded (x_k, mu_k), otherwise the
    estimates logged in the trace are used.
    """
    K = trace.length
    if K < 2:
        raise ValueError("need at least two samples")
    vdot, bdr, zeta = trace.vdot_est[:-1], trace.bdr_est[:-1], trace.zeta_est[:-1]
    if policy is not None:
        if controller is None:
            raise ValueError("re-evaluating a policy needs the controller")
        vdot = np.empty(K - 1)
        bdr = np.empty((K - 1, trace.B.shape[1]))
        zeta = np.empty((K - 1, trace.signal.shape[1]))
        for k in range(K - 1):
            est = policy(trace.x[k], trace.psi)
            vdot[k], bdr[k], zeta[k] = controller.estimate_rows(trace.x[k], trace.psi, est,
                                                                trace.mu[k])
    return {
        "V": (trace.vdot_meas()[1:] - vdot) ** 2,
        "B": (trace.bdr_meas()[1:] - bdr) ** 2,
        "C": (trace.zeta_meas()[1:] - zeta) ** 2,
        "io": np.sum((trace.yr_meas()[1:] - trace.mu[:-1]) ** 2, axis=1),
    }


def io_rl_reward(trace) -> np.ndarray:
    """-||y^(r)_meas - mu||^2 per transition."""
    return -compute_losses(trace)["io"]


def compute_reward(losses: dict, w_v=1.0, w_b=None, w_c=None, failed=False,
                   failure_penalty=100.0, io=False, clip=0.0, power=1.0) -> np.ndarray:
    """Negative weighted loss per transition; the failure penalty lands on the last one.

    ``clip`` > 0 caps every per-row loss before weighting. ``power`` raises
    each per-row loss to that exponent first (0.5 turns squared errors into
    absolute errors, which keeps a usable slope close to zero error).
    """
    if clip > 0:
        losses = {k: np.minimum(v, clip) for k, v in losses.items()}
    if power != 1.0:
        losses = {k: np.power(v, power) for k, v in losses.items()}
    if io:
        r = -losses["io"].copy()
    else:
        nb, nc = losses["B"].shape[1], losses["C"].shape[1]
        wb = np.ones(nb) if w_b is None or len(w_b) == 0 else np.asarray(w_b, dtype=float)
        wc = np.ones(nc) if w_c is None or len(w_c) == 0 else np.asarray(w_c, dtype=float)
        if wb.shape != (nb,) or wc.shape != (nc,):
            raise ValueError("loss weights do not match the number of rows")
        r = -(w_v * losses["V"] + losses["B"] @ wb + losses["C"] @ wc)
    if failed and len(r):
        r[-1] -= failure_penalty
    return r


# ------------------------------------------------------------------ policies

def action_bounds(layout: EstimateLayout, alpha_max, beta_max) -> np.ndarray:
    """Per-entry scale of the estimate vector.

    ``alpha_max``/``beta_max`` are scalars or one value per row (CLF,
    barriers, constraints in layout order).
    """
    mask = layout.alpha_mask()
    if layout.io:
        return np.where(mask, float(np.atleast_1d(alpha_max)[0]), float(np.atleast_1d(beta_max)[0]))
    n_rows = 1 + layout.n_b + layout.n_c
    a, b = (np.asarray(v, dtype=float).ravel() for v in (alpha_max, beta_max))
    for name, v in (("alpha_max", a), ("beta_max", b)):
        if v.size not in (1, n_rows):
            raise ValueError(f"{name} needs 1 or {n_rows} entries, got {v.size}")
    a, b = np.broadcast_to(a, (n_rows,)), np.broadcast_to(b, (n_rows,))
    out = np.empty(layout.dim)
    for k in range(n_rows):
        s = (layout.m + 1) * k
        out[s:s + layout.m] = a[k]
        out[s + layout.m] = b[k]
    return out


def policy_to_dict(policy: EstimatorPolicy, variant: str, extra=None) -> dict:
    d = {
        "format_version": POLICY_FORMAT_VERSION,
        "variant": variant,
        "layout": policy.layout.to_dict(),
        "bounds": policy.bounds.tolist(),
        "obs_scale": None if policy.obs_scale is None else policy.obs_scale.tolist(),
        "actor": policy.actor.to_dict(),
    }
    d.update(extra or {})
    return d


def policy_from_dict(d: dict) -> EstimatorPolicy:
    if d.get("format_version") != POLICY_FORMAT_VERSION:
        raise PolicyFormatError(f"unsupported policy format_version {d.get('format_version')!r}")
    try:
        layout = EstimateLayout(**d["layout"])
        actor = Mlp.from_dict(d["actor"])
        return EstimatorPolicy(actor, layout, d["bounds"], d.get("obs_scale"))
    except (KeyError, TypeError, ValueError, ControllerError) as exc:
        raise PolicyFormatError(f"malformed policy file: {exc}") from None


def save_policy(path, policy: EstimatorPolicy, variant: str, extra=None):
    Path(path).write_text(json.dumps(policy_to_dict(policy, variant, extra)))


def load_policy(path) -> EstimatorPolicy:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise PolicyFormatError(f"policy file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise PolicyFormatError(f"policy file is not JSON: {exc}") from None
    return policy_from_dict(d)


class _ExploringPolicy:
    """Actor plus Gaussian noise on the unit-scaled output; records what it emits."""

    def __init__(self, agent: DdpgAgent, base: EstimatorPolicy, noise: float, rng):
        self.agent, self.base, self.noise, self.rng = agent, base, noise, rng
        self.layout = base.layout
        self.obs, self.unit = [], []

    def __call__(self, x, psi=None):
        obs = self.base.observation(x, psi)
        a = self.agent.act(obs)
        if self.noise > 0:
            a = np.clip(a + self.rng.normal(0.0, self.noise, a.shape), -1.0, 1.0)
        self.obs.append(obs)
        self.unit.append(a)
        return self.base.bounds * a


# ------------------------------------------------------------------ training

@dataclass
class TrainingResult:
    policy: EstimatorPolicy
    log: list
    best_score: float
    best_episode: int
    agent: DdpgAgent = field(repr=False, default=None)
    episodes_run: int = 0


class Trainer:
    """Holds agent, buffer and counters so a run can be checkpointed and resumed."""

    def __init__(self, config):
        lc = config.learning
        self.config = config
        self.pair = config.pair()
        probe = config.controller()
        if not probe.learned:
            raise TrainingError(f"variant {config.variant!r} has no learned terms")
        self.layout = probe.layout
        self.io = self.layout.io
        n = self.pair.nominal_plant.n
        self.obs_dim = n + len(config.psi_ranges())
        self.bounds = action_bounds(self.layout, lc.alpha_max, lc.beta_max)
        self.obs_scale = np.asarray(lc.obs_scale, dtype=float) if lc.obs_scale else None
        if self.obs_scale is not None and self.obs_scale.shape != (self.obs_dim,):
            raise TrainingError(f"obs_scale must have {self.obs_dim} entries")
        hyper = DdpgHyper(batch=lc.batch, buffer=lc.buffer, gamma=lc.gamma, tau=lc.tau,
                          lr_actor=lc.lr_actor, lr_critic=lc.lr_critic,
                          hidden=tuple(lc.hidden), actor_reg=lc.actor_reg)
        self.agent = DdpgAgent(self.obs_dim, self.layout.dim, hyper, seed=config.seed,
                               actor_out_scale=lc.actor_out_scale)
        self.buffer = ReplayBuffer(lc.buffer, self.obs_dim, self.layout.dim, seed=config.seed + 7)
        self.episode = 0
        self.best_score = -np.inf
        self.best_episode = -1
        self.best_actor = self.agent.actor.copy()
        self.since_best = 0
        self.log: list = []

    # -- helpers
    def policy(self, actor=None) -> EstimatorPolicy:
        return EstimatorPolicy(actor or self.agent.actor, self.layout, self.bounds, self.obs_scale)

    def rewards(self, trace) -> np.ndarray:
        lc = self.config.learning
        losses = compute_losses(trace)
        r = compute_reward(losses, lc.w_v, lc.w_b, lc.w_c,
                           failed=trace.termination in FAILED_TERMINATIONS,
                           failure_penalty=lc.failure_penalty, io=self.io, clip=lc.loss_clip,
                           power=lc.loss_power)
        return lc.reward_scale * r, losses

    def _episode_rngs(self, episode, stream):
        ss = np.random.SeedSequence([self.config.seed, stream, episode])
        return [np.random.default_rng(s) for s in ss.spawn(3)]

    def rollout(self, episode, noise_scale, sigma, stream=0):
        cfg = self.config
        x_rng, mu_rng, act_rng = self._episode_rngs(episode, stream)
        explorer = _ExploringPolicy(self.agent, self.policy(), noise_scale, act_rng)
        ctrl = cfg.controller(policy=explorer)
        ep = cfg.episode_config(sigma=sigma)
        try:
            trace = run_episode(self.pair, ctrl, ep, rng=x_rng, noise_rng=mu_rng)
        except SimulationError as exc:
            if exc.trace is None or exc.trace.length < 2:
                raise
            trace = exc.trace
        return trace, explorer

    def evaluate(self, actor=None, episodes=None) -> float:
        """Mean noise-free return over fixed evaluation episodes."""
        lc = self.config.learning
        n = lc.eval_episodes if episodes is None else episodes
        policy = self.policy(actor)
        total = 0.0
        for j in range(n):
            x_rng, _, _ = self._episode_rngs(j, 1)
            ctrl = self.config.controller(policy=policy)
            trace = run_episode(self.pair, ctrl, self.config.episode_config(), rng=x_rng)
            r, _ = self.rewards(trace)
            total += float(np.sum(r))
        return total / max(n, 1)

    # -- main loop
    def step_episode(self):
        lc = self.config.learning
        k = self.episode
        sigma = lc.sigma * lc.sigma_decay ** k
        noise = lc.action_noise * lc.action_noise_decay ** k
        t0 = time.perf_counter()
        trace, explorer = self.rollout(k, noise, sigma)
        r, losses = self.rewards(trace)
        if not np.all(np.isfinite(r)):
            raise NumericalAbort(f"non-finite reward in episode {k}")
        T = len(r)
        obs = np.asarray(explorer.obs[:T])
        acts = np.asarray(explorer.unit[:T])
        next_obs = np.array([self.policy().observation(x, trace.psi) for x in trace.x[1:T + 1]])
        failed = trace.termination in FAILED_TERMINATIONS
        for i in range(T):
            self.buffer.add(obs[i], acts[i], r[i], next_obs[i], failed and i == T - 1)
        closs = np.nan
        if len(self.buffer) >= max(lc.warmup, lc.batch):
            n_up = max(1, int(round(lc.updates_per_step * T)))
            cl = [self.agent.update(self.buffer) for _ in range(n_up)]
            closs = float(np.mean(cl))
        row = {
            "episode": k,
            "steps": T,
            "termination": trace.termination,
            "return": float(np.sum(r)),
            "mean_loss_V": float(np.mean(losses["V"])),
            "mean_loss_B": float(np.mean(losses["B"])) if losses["B"].size else 0.0,
            "mean_loss_C": float(np.mean(losses["C"])) if losses["C"].size else 0.0,
            "mean_loss_io": float(np.mean(losses["io"])),
            "infeasible_steps": trace.infeasible_count(),
            "barrier_violation_steps": trace.barrier_violations(self.config.violation_tol),
            "sigma": sigma,
            "action_noise": noise,
            "critic_loss": closs,
            "eval_score": np.nan,
            "seconds": time.perf_counter() - t0,
        }
        self.episode += 1
        if lc.eval_every and (self.episode % lc.eval_every == 0 or self.episode == lc.episodes):
            score = self.evaluate()
            row["eval_score"] = score
            if score > self.best_score:
                self.best_score, self.best_episode = score, k
                self.best_actor = self.agent.actor.copy()
                self.since_best = 0
            else:
                self.since_best += 1
        self.log.append(row)
        log.info("episode %d: %s return=%.4g critic=%.3g eval=%.4g", k, trace.termination,
                 row["return"], closs, row["eval_score"])
        return row

    def run(self, episodes=None) -> TrainingResult:
        lc = self.config.learning
        target = lc.episodes if episodes is None else self.episode + episodes
        while self.episode < target:
            self.step_episode()
            if lc.early_stop_patience and self.since_best >= lc.early_stop_patience:
                log.info("early stop after episode %d", self.episode - 1)
                break
        if self.best_episode < 0:
            self.best_actor = self.agent.actor.copy()
            self.best_score = self.evaluate() if lc.eval_episodes else np.nan
            self.best_episode = self.episode - 1
        return TrainingResult(self.policy(self.best_actor), self.log, self.best_score,
                              self.best_episode, self.agent, self.episode)

    # -- checkpoints
    def save_checkpoint(self, path):
        a = self.agent
        nets = {"actor": a.actor, "critic": a.critic, "actor_target": a.actor_target,
                "critic_target": a.critic_target, "best_actor": self.best_actor}
        arrays = {f"{k}_flat": net.get_flat() for k, net in nets.items()}
        for name, opt in (("actor_opt", a.actor_opt), ("critic_opt", a.critic_opt)):
            arrays[f"{name}_m"] = np.concatenate([x.ravel() for x in opt.m])
            arrays[f"{name}_v"] = np.concatenate([x.ravel() for x in opt.v])
        b = self.buffer
        arrays.update(buf_obs=b.obs[:b.size], buf_act=b.act[:b.size], buf_rew=b.rew[:b.size],
                      buf_next=b.next_obs[:b.size], buf_done=b.done[:b.size])
        meta = {
            "episode": self.episode, "best_score": self.best_score,
            "best_episode": self.best_episode, "since_best": self.since_best,
            "updates": a.updates, "actor_opt_t": a.actor_opt.t, "critic_opt_t": a.critic_opt.t,
            "buf_ptr": b.ptr, "buf_rng": b.rng.bit_generator.state,
            "config_hash": self.config.config_hash(), "log": self.log,
        }
        np.savez(path, meta=np.array(json.dumps(meta, default=_json_default)), **arrays)

    def load_checkpoint(self, path):
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            if meta["config_hash"] != self.config.config_hash():
                raise TrainingError("checkpoint was written for a different config")
            a = self.agent
            for k in ("actor", "critic", "actor_target", "critic_target"):
                getattr(a, k).set_flat(z[f"{k}_flat"])
            self.best_actor = a.actor.copy()
            self.best_actor.set_flat(z["best_actor_flat"])
            for name in ("actor_opt", "critic_opt"):
                opt = getattr(a, name)
                for attr in ("m", "v"):
                    flat, i = z[f"{name}_{attr}"], 0
                    for arr in getattr(opt, attr):
                        arr[...] = flat[i:i + arr.size].reshape(arr.shape)
                        i += arr.size
                opt.t = meta[f"{name}_t"]
            b, n = self.buffer, len(z["buf_rew"])
            b.obs[:n], b.act[:n], b.rew[:n] = z["buf_obs"], z["buf_act"], z["buf_rew"]
            b.next_obs[:n], b.done[:n] = z["buf_next"], z["buf_done"]
            b.size, b.ptr = n, meta["buf_ptr"]
            b.rng.bit_generator.state = meta["buf_rng"]
        a.updates = meta["updates"]
        self.episode = meta["episode"]
        self.best_score = meta["best_score"] if meta["best_score"] is not None else -np.inf
        self.best_episode, self.since_best = meta["best_episode"], meta["since_best"]
        self.log = meta["log"]


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return None if not np.isfinite(o) else float(o)
    raise TypeError(type(o).__name__)


def ddpg_update(agent: DdpgAgent, buffer: ReplayBuffer) -> float:
    """One critic and actor step on a sampled minibatch; returns the critic loss."""
    return agent.update(buffer)


def run_training(config, episodes=None, resume=None) -> TrainingResult:
    trainer = Trainer(config)
    if resume is not None:
        trainer.load_checkpoint(resume)
    return trainer.run(episodes)


def learning_summary(config) -> dict:
    return asdict(config.learning)
