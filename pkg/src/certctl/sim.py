"""Fixed-step integration of the true plant, episodes and trace export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .fblin_clf import transverse

DIVERGENCE_NORM = 1e6


class SimulationError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


def integrate_step(plant, x, u, dt: float) -> np.ndarray:
    """Classical RK4 step of x_dot = f(x) + g(x) u with u held over the step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))

    def rhs(z):
        return plant.f(z) + plant.g(z) @ u

    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise SimulationError("diverged")
    return x_next


@dataclass
class EpisodeConfig:
    horizon: float = 5.0
    ts: float = 0.01
    x0_low: tuple = (0.0, 0.0)
    x0_high: tuple = (0.0, 0.0)
    psi_dist: list = field(default_factory=list)   # [(low, high), ...] uniform
    sigma: float = 0.0
    seed: int = 0
    max_consecutive_infeasible: int = 50

    def __post_init__(self):
        steps = self.horizon / self.ts
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be an integer multiple of ts")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.ts))

    def sample_initial(self, rng):
        lo, hi = np.asarray(self.x0_low, float), np.asarray(self.x0_high, float)
        x0 = lo + (hi - lo) * rng.random(lo.shape)
        psi = np.array([a + (b - a) * rng.random() for a, b in self.psi_dist])
        return x0, psi


@dataclass
class EpisodeTrace:
    """Row k holds state x_k and the control applied over [t_k, t_k+1).

    The final row is the terminal state; its control fields are NaN.
    """

    ts: float
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    d: np.ndarray
    status: list
    V: np.ndarray
    vdot_est: np.ndarray
    B: np.ndarray
    Btop: np.ndarray           # L_f^{rb-1} B, numerically differentiated once
    bdr_est: np.ndarray
    signal: np.ndarray         # constraint signals; d/dt signal - bound = zeta
    bounds: np.ndarray
    zeta_est: np.ndarray
    ytop: np.ndarray           # L_f^{r-1} h, for measuring y^(r)
    estimates: np.ndarray
    psi: np.ndarray
    termination: str
    reward: np.ndarray = None

    @property
    def length(self) -> int:
        return len(self.t)

    def vdot_meas(self):
        return backward_difference(self.V, self.ts)

    def bdr_meas(self):
        return backward_difference(self.Btop, self.ts)

    def zeta_meas(self):
        return backward_difference(self.signal, self.ts) - self.bounds

    def yr_meas(self):
        return backward_difference(self.ytop, self.ts)

    def infeasible_count(self) -> int:
        return sum(s == "infeasible" for s in self.status)

    def barrier_violations(self, tol: float) -> int:
        return int(np.sum(np.any(self.B < -tol, axis=1))) if self.B.size else 0

    def constraint_violations(self, tol: float) -> int:
        if not self.bounds.size:
            return 0
        z = self.zeta_meas()[1:]
        return int(np.sum(np.any(z > tol, axis=1)))

    def clf_violations(self, tol: float, rate: float) -> int:
        margin = self.vdot_meas()[1:] + rate * self.V[:-1]
        return int(np.sum(margin > tol))


def backward_difference(values, ts: float) -> np.ndarray:
    """(v_k - v_{k-1}) / ts along axis 0; row 0 is NaN (no predecessor)."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] < 2:
        raise ValueError("need at least two samples")
    out = np.full(v.shape, np.nan)
    out[1:] = (v[1:] - v[:-1]) / ts
    return out


def run_episode(pair, controller, config: EpisodeConfig, x0=None, psi=None, rng=None,
                noise_rng=None) -> EpisodeTrace:
    """Roll the true plant under ``controller`` (built on the nominal plant).

    Initial state and barrier parameters are drawn from ``config`` with
    ``rng`` unless given. ``noise_rng`` drives the exploration noise on mu.
    """
    true, nom = pair.true_plant, pair.nominal_plant
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if x0 is None or psi is None:
        x0_s, psi_s = config.sample_initial(rng)
        x0 = x0_s if x0 is None else x0
        psi = psi_s if psi is None else psi
    x = np.asarray(x0, dtype=float)
    psi = np.asarray(psi, dtype=float)
    noise_rng = noise_rng if noise_rng is not None else np.random.default_rng(config.seed + 1)
    ecbfs, specs = controller.ecbfs, controller.specs
    m, nb, nc = nom.m, len(ecbfs), len(specs)

    rec = {k: [] for k in ("x", "u", "mu", "d", "status", "V", "vdot", "B", "Btop", "bdr",
                           "sig", "zeta", "ytop", "est")}

    def observe(state):
        rec["x"].append(state.copy())
        rec["V"].append(controller.clf.V(transverse(nom, state).eta))
        rows = [e.lie(nom, state, psi) for e in ecbfs]
        rec["B"].append([e.value(state, psi) for e in ecbfs])
        rec["Btop"].append([r.eta_b[-1] for r in rows])
        rec["sig"].append([s.signal(state) for s in specs])
        rec["ytop"].append(nom.lie_f_h(state, nom.r - 1))

    termination = "horizon"
    u_prev = None
    streak = 0
    observe(x)
    for k in range(config.steps):
        noise = noise_rng.normal(0.0, config.sigma, m) if config.sigma > 0 else None
        try:
            out = controller(x, psi, u_prev, noise)
        except Exception as exc:
            raise SimulationError(f"controller failed at step {k}: {exc}",
                                  _finish(rec, config, psi, "error", m, nb, nc)) from exc
        rec["u"].append(out.u)
        rec["mu"].append(out.mu)
        rec["d"].append(out.d)
        rec["status"].append(out.qp_status)
        rec["vdot"].append(out.vdot_est)
        rec["bdr"].append(out.bdr_est)
        rec["zeta"].append(out.zeta_est)
        rec["est"].append(out.estimates)
        u_prev = out.u
        streak = streak + 1 if out.qp_status != "optimal" else 0
        try:
            x = integrate_step(true, x, out.u, config.ts)
        except SimulationError:
            termination = "diverged"
            break
        if np.linalg.norm(x) > DIVERGENCE_NORM:
            termination = "diverged"
            break
        observe(x)
        if true.failed(x):
            termination = "failure"
            break
        if streak > config.max_consecutive_infeasible:
            termination = "infeasible"
            break
    return _finish(rec, config, psi, termination, m, nb, nc,
                   bounds=np.array([s.bound for s in specs]))


def _finish(rec, config, psi, termination, m, nb, nc, bounds=None):
    K = len(rec["x"])
    est_dim = len(rec["est"][0]) if rec["est"] else 0

    def pad(key, width):
        arr = np.full((K, width), np.nan)
        if rec[key]:
            arr[:len(rec[key])] = np.asarray(rec[key], dtype=float).reshape(len(rec[key]), width)
        return arr

    status = list(rec["status"]) + [""] * (K - len(rec["status"]))
    return EpisodeTrace(
        ts=config.ts,
        t=config.ts * np.arange(K),
        x=np.asarray(rec["x"]),
        u=pad("u", m), mu=pad("mu", m), d=pad("d", 1)[:, 0], status=status,
        V=np.asarray(rec["V"]), vdot_est=pad("vdot", 1)[:, 0],
        B=np.asarray(rec["B"], dtype=float).reshape(K, nb),
        Btop=np.asarray(rec["Btop"], dtype=float).reshape(K, nb),
        bdr_est=pad("bdr", nb),
        signal=np.asarray(rec["sig"], dtype=float).reshape(K, nc),
        bounds=np.zeros(nc) if bounds is None else bounds,
        zeta_est=pad("zeta", nc),
        ytop=np.asarray(rec["ytop"], dtype=float).reshape(K, m),
        estimates=pad("est", est_dim),
        psi=np.asarray(psi, dtype=float),
        termination=termination,
    )


def trace_columns(trace: EpisodeTrace):
    n, m = trace.x.shape[1], trace.u.shape[1]
    nb, nc = trace.B.shape[1], trace.signal.shape[1]
    cols = ["time"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
    cols += [f"mu{i}" for i in range(m)] + ["V", "Vdot_meas", "Vdot_est"]
    cols += [f"B_{i}" for i in range(nb)] + [f"Bdr_meas_{i}" for i in range(nb)]
    cols += [f"Bdr_est_{i}" for i in range(nb)]
    cols += [f"zeta_{j}" for j in range(nc)] + [f"zeta_est_{j}" for j in range(nc)]
    cols += ["d", "qp_status", "reward"]
    return cols


def trace_rows(trace: EpisodeTrace):
    vd, bd, zm = trace.vdot_meas(), trace.bdr_meas(), trace.zeta_meas()
    reward = trace.reward if trace.reward is not None else np.full(trace.length, np.nan)
    for k in range(trace.length):
        row = [trace.t[k], *trace.x[k], *trace.u[k], *trace.mu[k], trace.V[k], vd[k],
               trace.vdot_est[k], *trace.B[k], *bd[k], *trace.bdr_est[k], *zm[k],
               *trace.zeta_est[k], trace.d[k]]
        yield [_fmt(v) for v in row] + [trace.status[k], _fmt(reward[k])]


def _fmt(v) -> str:
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def trace_csv(trace: EpisodeTrace, header_lines=()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_columns(trace))
    w.writerows(trace_rows(trace))
    return buf.getvalue()


def trace_summary(trace: EpisodeTrace, tol: float = 1e-3, clf_rate: float | None = None) -> dict:
    out = {
        "steps": trace.length - 1,
        "termination": trace.termination,
        "psi": trace.psi.tolist(),
        "barrier_violation_steps": trace.barrier_violations(tol),
        "constraint_violation_steps": trace.constraint_violations(tol),
        "infeasible_steps": trace.infeasible_count(),
        "min_B": trace.B.min(axis=0).tolist() if trace.B.size else [],
        "max_zeta": np.nanmax(trace.zeta_meas()[1:], axis=0).tolist()
        if trace.bounds.size and trace.length > 1 else [],
    }
    if clf_rate is not None:
        out["clf_violation_steps"] = trace.clf_violations(tol, clf_rate)
    return out
