"""QP controllers (CLF-QP, CBF-CLF-QP and their learned-estimate variants).

Every constraint row is affine in the auxiliary input mu because the plant
input is produced by the nominal linearizing law u = u0(x) + M(x) mu. The
learned estimates enter as per-row corrections (alpha . mu + beta):

    CLF       Vdot_hat   = LfV + beta_V + (LgV + alpha_V) mu
    barrier i B^(rb)_hat = Lf^rb B + LgLf B u0 + beta_B + (LgLf B M + alpha_B) mu
    row j     zeta_hat   = b_c + beta_C + (A_c + alpha_C) mu
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cbf import Ecbf
from .dynamics import PlantPair, mismatch_oracle
from .fblin_clf import ResClf, clf_lie_derivatives, pre_control, transverse
from .linalg_qp import QpProblem, solve_qp

VARIANTS = ("clf-qp", "cbf-clf-qp", "io-rl-clf-qp", "rl-clf-qp", "rl-cbf-clf-qp")
DEFAULT_RELAX_PENALTY = 1e3


class ControllerError(RuntimeError):
    pass


# ---------------------------------------------------------------- constraints

class AffineConstraintSpec:
    """Row zeta(x, mu) = d/dt signal(x) - bound <= 0, with signal linear in x.

    Against a plant (f, g) and the nominal pre-control u = u0 + M mu:
        A_c = c' g M,   b_c = c' (f + g u0) - bound
    where c is the gradient of the signal. The measured value is the
    numerical derivative of the signal along the trajectory minus the bound.
    """

    def __init__(self, weights, bound: float, name: str = "row"):
        self.weights = np.asarray(weights, dtype=float)
        self.bound = float(bound)
        self.name = name

    def signal(self, x) -> float:
        return float(self.weights @ np.asarray(x, dtype=float))

    def rows(self, plant, x, u0, M):
        x = np.asarray(x, dtype=float)
        c = self.weights
        A_c = c @ plant.g(x) @ M
        b_c = float(c @ (plant.f(x) + plant.g(x) @ u0) - self.bound)
        return A_c, b_c


def acceleration_bound(plant, index: int, bound: float):
    """|q_ddot[index]| <= bound as two affine rows (+ then -)."""
    w = np.zeros(plant.n)
    w[plant.n_q + index] = 1.0
    return [AffineConstraintSpec(w, bound, f"acc{index}+"),
            AffineConstraintSpec(-w, bound, f"acc{index}-")]


# --------------------------------------------------------------- policy terms

@dataclass(frozen=True)
class EstimateLayout:
    """Output layout [alpha_V, beta_V, (alpha_B, beta_B)_i, (alpha_C, beta_C)_j].

    ``io=True`` is the layout of the input-correcting policy: alpha (m x m,
    row-major) then beta (m).
    """

    m: int
    n_b: int = 0
    n_c: int = 0
    io: bool = False

    @property
    def dim(self) -> int:
        if self.io:
            return self.m * self.m + self.m
        return (self.m + 1) * (1 + self.n_b + self.n_c)

    def block(self, a, k):
        s = (self.m + 1) * k
        return a[s:s + self.m], float(a[s + self.m])

    def split(self, a):
        a = np.asarray(a, dtype=float)
        if a.shape != (self.dim,):
            raise ControllerError(f"estimate vector must have length {self.dim}")
        if self.io:
            m = self.m
            return a[: m * m].reshape(m, m), a[m * m:]
        v = self.block(a, 0)
        b = [self.block(a, 1 + i) for i in range(self.n_b)]
        c = [self.block(a, 1 + self.n_b + j) for j in range(self.n_c)]
        return v, b, c

    def pack(self, v, b=(), c=()):
        out = []
        for alpha, beta in [v, *b, *c]:
            out.extend(np.atleast_1d(alpha).tolist())
            out.append(float(beta))
        return np.array(out)

    def alpha_mask(self) -> np.ndarray:
        """True where the entry is an alpha (gain) term, False for beta."""
        mask = np.zeros(self.dim, dtype=bool)
        if self.io:
            mask[: self.m * self.m] = True
            return mask
        for k in range(1 + self.n_b + self.n_c):
            mask[(self.m + 1) * k:(self.m + 1) * k + self.m] = True
        return mask

    def to_dict(self):
        return {"m": self.m, "n_b": self.n_b, "n_c": self.n_c, "io": self.io}


class ZeroPolicy:
    def __init__(self, layout: EstimateLayout):
        self.layout = layout

    def __call__(self, x, psi=None) -> np.ndarray:
        return np.zeros(self.layout.dim)


class EstimatorPolicy:
    """Network-backed estimates: ``actor`` maps the observation (x, psi) to
    tanh-bounded outputs, scaled entrywise by ``bounds``."""

    def __init__(self, actor, layout: EstimateLayout, bounds, obs_scale=None):
        self.actor = actor
        self.layout = layout
        self.bounds = np.asarray(bounds, dtype=float)
        self.obs_scale = None if obs_scale is None else np.asarray(obs_scale, dtype=float)
        if actor.sizes[-1] != layout.dim or self.bounds.shape != (layout.dim,):
            raise ControllerError("actor output does not match the estimate layout")

    def observation(self, x, psi=None):
        obs = np.concatenate([np.asarray(x, dtype=float), np.asarray(psi if psi is not None else [], dtype=float)])
        return obs if self.obs_scale is None else obs / self.obs_scale

    def __call__(self, x, psi=None) -> np.ndarray:
        out = self.actor.forward(self.observation(x, psi)[None, :])[0][0]
        return self.bounds * out


class OraclePolicy:
    """Exact estimates from the analytic plant-pair mismatch (testing only)."""

    def __init__(self, pair: PlantPair, clf: ResClf | None = None, ecbfs=(), specs=(),
                 io: bool = False):
        self.pair, self.clf = pair, clf
        self.ecbfs, self.specs = list(ecbfs), list(specs)
        m = pair.nominal_plant.m
        self.layout = EstimateLayout(m, len(self.ecbfs), len(self.specs), io=io)

    def __call__(self, x, psi=None) -> np.ndarray:
        true, nom = self.pair.true_plant, self.pair.nominal_plant
        d = mismatch_oracle(self.pair, x)
        if self.layout.io:
            D3inv = np.linalg.inv(d.delta3)
            alpha = -D3inv @ d.delta2
            beta = -D3inv @ d.delta1
            return np.concatenate([alpha.reshape(-1), beta])
        eta = transverse(nom, x).eta
        w = 2.0 * eta @ self.clf.P_eps @ self.clf.G
        v = (w @ d.delta2, float(w @ d.delta1))
        u0, M = pre_control(nom, x)
        b = []
        for e in self.ecbfs:
            rt, rn = e.lie(true, x, psi), e.lie(nom, x, psi)
            dg = rt.LgLf_B - rn.LgLf_B
            b.append((dg @ M, float(rt.Lf_rb_B - rn.Lf_rb_B + dg @ u0)))
        c = []
        for s in self.specs:
            At, bt = s.rows(true, x, u0, M)
            An, bn = s.rows(nom, x, u0, M)
            c.append((At - An, bt - bn))
        return self.layout.pack(v, b, c)


# ------------------------------------------------------------------ controller

@dataclass
class ControllerOutput:
    u: np.ndarray
    mu: np.ndarray
    mu_b: list
    d: float
    qp_status: str
    V: float = 0.0
    vdot_est: float = 0.0
    B: list = field(default_factory=list)
    bdr_est: list = field(default_factory=list)
    zeta_est: list = field(default_factory=list)
    estimates: np.ndarray = None
    saturated: bool = False
    diagnostics: dict = field(default_factory=dict)


@dataclass
class _Rows:
    """Affine pieces of every row at one state, before the QP."""

    u0: np.ndarray
    M: np.ndarray
    V: float
    LfV: float
    LgV: np.ndarray
    eta_b: list
    bar_const: list
    bar_gain: list
    con_const: list
    con_gain: list
    B: list


def _rows(clf, ecbfs, specs, nominal, x, psi, est, layout):
    u0, M = pre_control(nominal, x)
    eta = transverse(nominal, x).eta
    V, LfV, LgV = clf_lie_derivatives(clf, eta)
    (aV, bV), bl, cl = layout.split(est)
    eta_b, bar_const, bar_gain, B = [], [], [], []
    for e, (aB, bB) in zip(ecbfs, bl):
        row = e.lie(nominal, x, psi)
        eta_b.append(row.eta_b)
        B.append(float(row.eta_b[0]))
        bar_const.append(float(row.Lf_rb_B + row.LgLf_B @ u0 + bB))
        bar_gain.append(row.LgLf_B @ M + aB)
    con_const, con_gain = [], []
    for s, (aC, bC) in zip(specs, cl):
        A_c, b_c = s.rows(nominal, x, u0, M)
        con_const.append(b_c + bC)
        con_gain.append(A_c + aC)
    return _Rows(u0, M, V, LfV + bV, LgV + aV, eta_b, bar_const, bar_gain,
                 con_const, con_gain, B)


class QpController:
    """One of the five controller variants built on a nominal plant.

    ``policy`` maps (x, psi) to an estimate vector; it is ignored (treated
    as zero) by the nominal variants. Calling the controller returns a
    ``ControllerOutput``; when the QP is infeasible the previous input is
    held and ``qp_status`` is ``"infeasible"``.
    """

    def __init__(self, variant, clf: ResClf, nominal, ecbfs=(), specs=(), policy=None,
                 relax_penalty: float = DEFAULT_RELAX_PENALTY, u_max=None):
        if variant not in VARIANTS:
            raise ControllerError(f"unknown controller variant {variant!r}")
        self.variant, self.clf, self.nominal = variant, clf, nominal
        self.ecbfs: list[Ecbf] = list(ecbfs) if "cbf" in variant else []
        self.specs = list(specs) if "cbf" in variant else []
        self.p = float(relax_penalty)
        self.u_max = nominal.u_max if u_max is None else float(u_max)
        io = variant == "io-rl-clf-qp"
        self.layout = EstimateLayout(nominal.m, len(self.ecbfs), len(self.specs), io=io)
        self.qp_layout = EstimateLayout(nominal.m, len(self.ecbfs), len(self.specs))
        self.policy = policy if policy is not None else ZeroPolicy(self.layout)
        if getattr(self.policy, "layout", self.layout).dim != self.layout.dim:
            raise ControllerError("policy output layout does not match the controller")

    @property
    def learned(self) -> bool:
        return self.variant in ("io-rl-clf-qp", "rl-clf-qp", "rl-cbf-clf-qp")

    @property
    def relaxed(self) -> bool:
        return "cbf" in self.variant

    def estimates(self, x, psi=None):
        if not self.learned:
            return np.zeros(self.layout.dim)
        return np.asarray(self.policy(x, psi), dtype=float)

    def build_qp(self, rows: _Rows) -> QpProblem:
        m = self.nominal.m
        rate = self.clf.rate
        A, b = [], []
        if self.relaxed:
            H = 2.0 * np.diag(np.r_[np.ones(m), self.p])
            A.append(np.r_[rows.LgV, -1.0])
            b.append(-rows.LfV - rate * rows.V)
            for e, const, gain, eb in zip(self.ecbfs, rows.bar_const, rows.bar_gain, rows.eta_b):
                # mu_b + K_b eta_b >= 0 with mu_b = const + gain . mu
                A.append(np.r_[-gain, 0.0])
                b.append(const + float(e.Kb @ eb))
            for const, gain in zip(rows.con_const, rows.con_gain):
                A.append(np.r_[gain, 0.0])
                b.append(-const)
            if np.isfinite(self.u_max):
                for i in range(m):
                    A.append(np.r_[rows.M[i], 0.0])
                    b.append(self.u_max - rows.u0[i])
                    A.append(np.r_[-rows.M[i], 0.0])
                    b.append(self.u_max + rows.u0[i])
        else:
            H = 2.0 * np.eye(m)
            A.append(rows.LgV)
            b.append(-rows.LfV - rate * rows.V)
        return QpProblem(H, np.zeros(H.shape[0]), np.array(A), np.array(b))

    def __call__(self, x, psi=None, u_prev=None, mu_noise=None) -> ControllerOutput:
        x = np.asarray(x, dtype=float)
        m = self.nominal.m
        est = self.estimates(x, psi)
        qp_est = est if self.variant in ("rl-clf-qp", "rl-cbf-clf-qp") else np.zeros(self.qp_layout.dim)
        rows = _rows(self.clf, self.ecbfs, self.specs, self.nominal, x, psi, qp_est, self.qp_layout)
        sol = solve_qp(self.build_qp(rows))
        status = sol.status
        d = float(sol.v_opt[m]) if self.relaxed else 0.0
        mu_star = sol.v_opt[:m].copy()
        mu_cmd = mu_star if mu_noise is None else mu_star + np.atleast_1d(mu_noise)
        if status == "optimal":
            u = rows.u0 + rows.M @ mu_cmd
            if self.variant == "io-rl-clf-qp":
                alpha, beta = self.layout.split(est)
                u = u + rows.M @ (alpha @ mu_cmd + beta)
        else:
            u = np.zeros(m) if u_prev is None else np.asarray(u_prev, dtype=float).copy()
        u_sat = np.clip(u, -self.u_max, self.u_max)
        saturated = bool(np.any(u_sat != u))
        if self.variant == "io-rl-clf-qp" and status == "optimal" and not saturated:
            mu_exec = mu_cmd
        else:
            # auxiliary input actually realised by the applied u under the nominal law
            mu_exec = np.linalg.solve(rows.M, u_sat - rows.u0)
        out = ControllerOutput(u=u_sat, mu=mu_exec, mu_b=[], d=d, qp_status=status,
                               V=rows.V, estimates=est, saturated=saturated)
        self._fill_estimates(out, rows, mu_exec)
        out.diagnostics = {"mu_star": mu_star, "kkt": sol.kkt_residual,
                           "active_set": sol.active_set}
        return out

    def _fill_estimates(self, out, rows, mu):
        out.vdot_est = float(rows.LfV + rows.LgV @ mu)
        out.B = list(rows.B)
        out.bdr_est = [float(c + g @ mu) for c, g in zip(rows.bar_const, rows.bar_gain)]
        out.mu_b = list(out.bdr_est)
        out.zeta_est = [float(c + g @ mu) for c, g in zip(rows.con_const, rows.con_gain)]

    def estimate_rows(self, x, psi, est, mu):
        """(Vdot_hat, [B^(rb)_hat], [zeta_hat]) at (x, mu) for an estimate vector."""
        rows = _rows(self.clf, self.ecbfs, self.specs, self.nominal, x, psi, est, self.qp_layout)
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        return (float(rows.LfV + rows.LgV @ mu),
                [float(c + g @ mu) for c, g in zip(rows.bar_const, rows.bar_gain)],
                [float(c + g @ mu) for c, g in zip(rows.con_const, rows.con_gain)])


# ------------------------------------------------------- functional interface

def _rows_single(policy, clf, nominal, x, psi=None, ecbfs=(), specs=()):
    layout = EstimateLayout(nominal.m, len(ecbfs), len(specs))
    est = np.zeros(layout.dim) if policy is None else np.asarray(policy(x, psi), dtype=float)
    return _rows(clf, list(ecbfs), list(specs), nominal, x, psi, est, layout), est


def solve_clf_qp(clf, plant, x, u_prev=None) -> ControllerOutput:
    return QpController("clf-qp", clf, plant)(x, None, u_prev)


def solve_cbf_clf_qp(clf, ecbfs, constraints, plant, x, psi=None, u_prev=None,
                     relax_penalty=DEFAULT_RELAX_PENALTY, u_max=None) -> ControllerOutput:
    return QpController("cbf-clf-qp", clf, plant, ecbfs, constraints,
                        relax_penalty=relax_penalty, u_max=u_max)(x, psi, u_prev)


def solve_rl_clf_qp(policy, clf, nominal_plant, x, u_prev=None) -> ControllerOutput:
    return QpController("rl-clf-qp", clf, nominal_plant, policy=policy)(x, None, u_prev)


def solve_rl_cbf_clf_qp(policy, clf, ecbfs, constraint_specs, nominal_plant, x, psi=None,
                        u_prev=None, relax_penalty=DEFAULT_RELAX_PENALTY,
                        u_max=None) -> ControllerOutput:
    return QpController("rl-cbf-clf-qp", clf, nominal_plant, ecbfs, constraint_specs,
                        policy=policy, relax_penalty=relax_penalty, u_max=u_max)(x, psi, u_prev)


def io_rl_input(policy, clf, nominal_plant, x, u_prev=None) -> ControllerOutput:
    return QpController("io-rl-clf-qp", clf, nominal_plant, policy=policy)(x, None, u_prev)


def estimate_vdot(policy, clf, nominal_plant, x, mu, psi=None, ecbfs=(), specs=()) -> float:
    rows, _ = _rows_single(policy, clf, nominal_plant, x, psi, ecbfs, specs)
    return float(rows.LfV + rows.LgV @ np.atleast_1d(mu))


def estimate_b_deriv(policy, ecbfs, i, clf, nominal_plant, x, psi, mu, specs=()) -> float:
    rows, _ = _rows_single(policy, clf, nominal_plant, x, psi, ecbfs, specs)
    return float(rows.bar_const[i] + rows.bar_gain[i] @ np.atleast_1d(mu))


def estimate_constraint_row(policy, specs, j, clf, nominal_plant, x, mu, psi=None,
                            ecbfs=()) -> float:
    rows, _ = _rows_single(policy, clf, nominal_plant, x, psi, ecbfs, specs)
    return float(rows.con_const[j] + rows.con_gain[j] @ np.atleast_1d(mu))
