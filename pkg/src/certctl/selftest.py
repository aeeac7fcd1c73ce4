"""Oracle-equivalence and zero-policy-equivalence property suite.

Each property returns (passed, detail). ``faults`` names deliberate
perturbations used to check that the suite notices a broken component.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import fblin_clf, linalg_qp
from .cbf import WallBarrier
from .controllers import OraclePolicy, QpController, ZeroPolicy, acceleration_bound
from .dynamics import DoubleIntegrator, InvertedPendulum, PlanarCart, uncertain_pair
from .fblin_clf import build_res_clf, clf_lie_derivatives, pre_control, transverse

FAULTS = ("lyapunov", "qp")


@contextmanager
def _inject(faults):
    saved = (linalg_qp.solve_lyapunov, fblin_clf.solve_lyapunov, linalg_qp.solve_qp)
    try:
        if "lyapunov" in faults:
            def bad_lyap(A, Q, _f=saved[0]):
                return _f(A, Q) + 1e-6
            linalg_qp.solve_lyapunov = fblin_clf.solve_lyapunov = bad_lyap
        if "qp" in faults:
            import certctl.controllers as ctl

            def bad_qp(problem, *a, _f=saved[2], **kw):
                sol = _f(problem, *a, **kw)
                sol.v_opt = sol.v_opt + 1e-3
                return sol
            ctl.solve_qp = bad_qp
        yield
    finally:
        linalg_qp.solve_lyapunov, fblin_clf.solve_lyapunov, linalg_qp.solve_qp = saved
        import certctl.controllers as ctl
        ctl.solve_qp = saved[2]


def _rng():
    return np.random.default_rng(12345)


def prop_lyapunov_residual():
    rng = _rng()
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(1, 7))
        A = rng.normal(size=(n, n))
        A -= (np.max(np.linalg.eigvals(A).real) + 0.5) * np.eye(n)
        Q = np.eye(n)
        P = linalg_qp.solve_lyapunov(A, Q)
        worst = max(worst, linalg_qp.lyapunov_residual(A, P, Q))
    return worst <= 1e-10, f"max residual {worst:.2e}"


def prop_qp_kkt():
    rng = _rng()
    worst = 0.0
    for _ in range(30):
        n, k = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        L = rng.normal(size=(n, n))
        H = L @ L.T + 0.1 * np.eye(n)
        A = rng.normal(size=(k, n))
        b = A @ rng.normal(size=n) + rng.random(k)
        sol = linalg_qp.solve_qp(linalg_qp.QpProblem(H, rng.normal(size=n), A, b))
        if not sol.optimal:
            return False, "feasible problem reported " + sol.status
        worst = max(worst, sol.kkt_residual)
    return worst <= 1e-6, f"max KKT residual {worst:.2e}"


def _pendulum_setup():
    nom = InvertedPendulum()
    clf = build_res_clf(1, 2, (-1.0, -1.5), 0.8, lam=1.6)
    return uncertain_pair(nom, "scale", 2.0), clf


def _wall_setup():
    nom = DoubleIntegrator(target=1.5, u_max=10.0)
    clf = build_res_clf(1, 2, (-1.0, -2.0), 0.8)
    ecbfs = [WallBarrier(0, 1.0, psi_index=0)]
    specs = acceleration_bound(nom, 0, 4.0)
    return uncertain_pair(nom, "scale", 2.0), clf, ecbfs, specs


def prop_oracle_clf_row():
    """Oracle-corrected Vdot estimate equals Vdot under the true plant."""
    pair, clf = _pendulum_setup()
    true, nom = pair.true_plant, pair.nominal_plant
    oracle = OraclePolicy(pair, clf)
    ctrl = QpController("rl-clf-qp", clf, nom, policy=oracle)
    rng = _rng()
    worst = 0.0
    for _ in range(50):
        x = nom.sample_domain(rng, 1)[0]
        mu = rng.normal(size=1)
        vhat, _, _ = ctrl.estimate_rows(x, None, oracle(x), mu)
        u0, M = pre_control(nom, x)
        xdot = true.f(x) + true.g(x) @ (u0 + M @ mu)
        eta = transverse(nom, x).eta
        eps = 1e-6
        deta = (transverse(nom, x + eps * xdot).eta - transverse(nom, x - eps * xdot).eta) / (2 * eps)
        vdot = float(2.0 * eta @ clf.P_eps @ deta)
        worst = max(worst, abs(vhat - vdot) / (1.0 + abs(vdot)))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def prop_oracle_barrier_and_constraints():
    pair, clf, ecbfs, specs = _wall_setup()
    true, nom = pair.true_plant, pair.nominal_plant
    oracle = OraclePolicy(pair, clf, ecbfs, specs)
    ctrl = QpController("rl-cbf-clf-qp", clf, nom, ecbfs, specs, policy=oracle)
    rng = _rng()
    worst = 0.0
    for _ in range(50):
        x = nom.sample_domain(rng, 1)[0]
        psi = np.array([rng.uniform(0.8, 1.2)])
        mu = rng.normal(size=1)
        _, bhat, chat = ctrl.estimate_rows(x, psi, oracle(x, psi), mu)
        u0, M = pre_control(nom, x)
        xdot = true.f(x) + true.g(x) @ (u0 + M @ mu)
        # double integrator: B = psi - p so B'' = -p'', zeta = +-p'' - bound
        acc = xdot[1]
        worst = max(worst, abs(bhat[0] + acc))
        for s, c in zip(specs, chat):
            worst = max(worst, abs(c - (s.weights[1] * acc - s.bound)))
    return worst <= 1e-9, f"max error {worst:.2e}"


def prop_oracle_io():
    """Oracle input correction makes y^(r) = mu on the true plant."""
    pair, clf = _pendulum_setup()
    true, nom = pair.true_plant, pair.nominal_plant
    oracle = OraclePolicy(pair, clf, io=True)
    rng = _rng()
    worst = 0.0
    for _ in range(50):
        x = nom.sample_domain(rng, 1)[0]
        mu = rng.normal(size=1)
        alpha, beta = oracle.layout.split(oracle(x))
        u0, M = pre_control(nom, x)
        u = u0 + M @ (mu + alpha @ mu + beta)
        yr = true.lie_f_h(x, true.r) + true.decoupling(x) @ u
        worst = max(worst, float(np.max(np.abs(yr - mu))))
    return worst <= 1e-9, f"max |y^(r) - mu| {worst:.2e}"


def prop_zero_policy_equivalence():
    """Learned variants with a zero policy reproduce the nominal mu*."""
    rng = _rng()
    worst = 0.0
    pair, clf = _pendulum_setup()
    nom = pair.nominal_plant
    for variant in ("rl-clf-qp", "io-rl-clf-qp"):
        a = QpController("clf-qp", clf, nom)
        b = QpController(variant, clf, nom)
        b.policy = ZeroPolicy(b.layout)
        for x in nom.sample_domain(rng, 30):
            worst = max(worst, float(np.max(np.abs(a(x).mu - b(x).mu))))
    wp, clf_w, ecbfs, specs = _wall_setup()
    a = QpController("cbf-clf-qp", clf_w, wp.nominal_plant, ecbfs, specs)
    b = QpController("rl-cbf-clf-qp", clf_w, wp.nominal_plant, ecbfs, specs)
    for x in wp.nominal_plant.sample_domain(rng, 30):
        psi = np.array([1.0])
        worst = max(worst, float(np.max(np.abs(a(x, psi).mu - b(x, psi).mu))))
    return worst <= 1e-6, f"max |mu difference| {worst:.2e}"


def prop_identical_plants_no_mismatch():
    from .dynamics import mismatch_oracle
    rng = _rng()
    worst = 0.0
    for nom in (InvertedPendulum(), DoubleIntegrator(), PlanarCart()):
        pair = uncertain_pair(nom, "none")
        for x in nom.sample_domain(rng, 20):
            d = mismatch_oracle(pair, x)
            worst = max(worst, float(np.max(np.abs(d.delta1))), float(np.max(np.abs(d.delta2))))
    return worst == 0.0, f"max |delta| {worst:.2e}"


def prop_clf_decay():
    """Nominal CLF-QP on the nominal plant meets Vdot <= -rate V at sampled states."""
    pair, clf = _pendulum_setup()
    nom = pair.nominal_plant
    ctrl = QpController("clf-qp", clf, nom)
    rng = _rng()
    worst = -np.inf
    for x in nom.sample_domain(rng, 50):
        out = ctrl(x)
        if out.saturated:
            continue
        V, LfV, LgV = clf_lie_derivatives(clf, transverse(nom, x).eta)
        worst = max(worst, LfV + LgV @ out.mu + clf.rate * V)
    return worst <= 1e-8, f"max CLF margin {worst:.2e}"


PROPERTIES = {
    "lyapunov_residual": prop_lyapunov_residual,
    "qp_kkt": prop_qp_kkt,
    "oracle_clf_row": prop_oracle_clf_row,
    "oracle_barrier_and_constraints": prop_oracle_barrier_and_constraints,
    "oracle_io_input": prop_oracle_io,
    "zero_policy_equivalence": prop_zero_policy_equivalence,
    "identical_plants_no_mismatch": prop_identical_plants_no_mismatch,
    "clf_decay": prop_clf_decay,
}


def run_selftest(faults=(), out=print) -> int:
    """Runs every property; returns the number of failures."""
    unknown = set(faults) - set(FAULTS)
    if unknown:
        raise ValueError(f"unknown fault {sorted(unknown)}; choose from {FAULTS}")
    failures = 0
    with _inject(tuple(faults)):
        for name, fn in PROPERTIES.items():
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash counts as a failure
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            failures += not ok
            out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return failures
