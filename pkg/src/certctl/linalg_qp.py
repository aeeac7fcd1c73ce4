"""Dense small-scale linear algebra: Lyapunov solver, symmetric eigenvalues, QP.

The QP solver is a dual active-set method (Goldfarb-Idnani) for problems

    min  1/2 v'Hv + c'v   s.t.  A_in v <= b_in

of dimension around 10 with a few tens of rows. It needs no feasible starting
point and reports infeasibility through ``QpSolution.status`` instead of
raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CONSTRAINT_TOL = 1e-8
STATIONARITY_TOL = 1e-6
MAX_ITER = 200
SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10


class LinalgError(ValueError):
    pass


def _as_matrix(M, name="matrix"):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.size == 0:
        raise LinalgError(f"{name} must be a non-empty 2-D array")
    if not np.all(np.isfinite(M)):
        raise LinalgError(f"{name} has non-finite entries")
    return M


def _check_symmetric(M, name):
    if M.shape[0] != M.shape[1]:
        raise LinalgError(f"{name} must be square, got {M.shape}")
    scale = max(1.0, np.max(np.abs(M)))
    if np.max(np.abs(M - M.T)) > SYMMETRY_TOL * scale:
        raise LinalgError(f"{name} is not symmetric")


def eig_sym(M) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, ascending."""
    M = _as_matrix(M, "M")
    _check_symmetric(M, "M")
    return np.linalg.eigvalsh(0.5 * (M + M.T))


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve A'P + PA = -Q for symmetric positive definite P.

    Uses the Kronecker form (I (x) A' + A' (x) I) vec(P) = -vec(Q) with a
    dense LU solve, followed by one step of iterative refinement.
    """
    A = _as_matrix(A, "A")
    Q = _as_matrix(Q, "Q")
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise LinalgError("A and Q must be square and of equal size")
    _check_symmetric(Q, "Q")
    if eig_sym(Q)[0] <= 0.0:
        raise LinalgError("Q must be positive definite")
    if np.max(np.linalg.eigvals(A).real) >= 0.0:
        raise LinalgError("unstable closed-loop matrix")

    eye = np.eye(n)
    # column-major vec: vec(A'P) = (I kron A') vec(P), vec(PA) = (A' kron I) vec(P)
    K = np.kron(eye, A.T) + np.kron(A.T, eye)
    rhs = -Q.reshape(-1, order="F")
    try:
        p = np.linalg.solve(K, rhs)
        p = p + np.linalg.solve(K, rhs - K @ p)
    except np.linalg.LinAlgError as exc:
        raise LinalgError("singular Lyapunov operator") from exc
    P = p.reshape(n, n, order="F")
    return 0.5 * (P + P.T)


def lyapunov_residual(A, P, Q) -> float:
    A, P, Q = (np.asarray(M, dtype=float) for M in (A, P, Q))
    return float(np.max(np.abs(A.T @ P + P @ A + Q)))


@dataclass
class QpProblem:
    """min 1/2 v'Hv + c'v subject to A_in v <= b_in."""

    H: np.ndarray
    c: np.ndarray
    A_in: np.ndarray = None
    b_in: np.ndarray = None

    def __post_init__(self):
        self.H = _as_matrix(self.H, "H")
        n = self.H.shape[0]
        _check_symmetric(self.H, "H")
        w = np.linalg.eigvalsh(0.5 * (self.H + self.H.T))
        if w[0] < -PSD_TOL * max(1.0, abs(w[-1])):
            raise LinalgError("H is not positive semidefinite")
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if self.c.shape != (n,):
            raise LinalgError(f"c must have length {n}")
        if self.A_in is None:
            self.A_in = np.zeros((0, n))
            self.b_in = np.zeros(0)
        self.A_in = np.asarray(self.A_in, dtype=float)
        if self.A_in.ndim == 1 and self.A_in.size == n:
            self.A_in = self.A_in[None, :]
        if self.A_in.ndim != 2 or self.A_in.shape[1] != n:
            raise LinalgError(f"A_in must have {n} columns")
        self.b_in = np.asarray(self.b_in, dtype=float).reshape(-1)
        if self.A_in.shape[0] != self.b_in.shape[0]:
            raise LinalgError("A_in and b_in row counts differ")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.A_in))
                and np.all(np.isfinite(self.b_in))):
            raise LinalgError("QP data has non-finite entries")

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def objective(self, v) -> float:
        v = np.asarray(v, dtype=float)
        return float(0.5 * v @ self.H @ v + self.c @ v)


@dataclass
class QpSolution:
    v_opt: np.ndarray
    status: str
    kkt_residual: float
    active_set: list = field(default_factory=list)
    multipliers: np.ndarray = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def kkt_residual(problem: QpProblem, v, lam) -> float:
    """Max of primal infeasibility, stationarity, dual infeasibility, complementarity."""
    slack = problem.A_in @ v - problem.b_in
    stat = problem.H @ v + problem.c + problem.A_in.T @ lam
    parts = [np.linalg.norm(stat)]
    if slack.size:
        parts += [np.max(np.maximum(slack, 0.0)),
                  np.max(np.maximum(-lam, 0.0)),
                  np.max(np.abs(lam * slack))]
    return float(max(parts))


def _factor(H):
    try:
        return np.linalg.cholesky(H), 0.0
    except np.linalg.LinAlgError:
        pass
    w = eig_sym(H)
    if w[0] < -PSD_TOL * max(1.0, abs(w[-1])):
        raise LinalgError("H is not positive semidefinite")
    reg = max(PSD_TOL, 1e-12 * abs(w[-1]))
    return np.linalg.cholesky(H + reg * np.eye(H.shape[0])), reg


def solve_qp(problem: QpProblem, tol: float = CONSTRAINT_TOL,
             max_iter: int = MAX_ITER) -> QpSolution:
    """Goldfarb-Idnani dual active-set method.

    Constraints are added one at a time (most violated first, measured on
    row-normalised slacks); a constraint whose multiplier would turn
    negative is dropped. Each iteration recomputes the reduced operators
    directly, which is cheap at the sizes used here.
    """
    H, c, A, b = problem.H, problem.c, problem.A_in, problem.b_in
    n, mrows = problem.dim, A.shape[0]
    L, reg = _factor(H)
    Linv = np.linalg.inv(L)
    Hinv = Linv.T @ Linv
    row_norm = np.linalg.norm(A, axis=1) if mrows else np.zeros(0)

    v = -Hinv @ c
    active: list[int] = []
    u = np.zeros(0)
    status = "max_iter"
    it = 0
    while it < max_iter:
        it += 1
        slack = A @ v - b
        scaled = np.where(row_norm > 0, slack / np.maximum(row_norm, 1e-300), slack)
        cand = [i for i in range(mrows) if i not in active and slack[i] > tol]
        if not cand:
            status = "optimal"
            break
        p = max(cand, key=lambda i: (scaled[i], -i))
        if row_norm[p] == 0.0:
            status = "infeasible"
            break
        npos = A[p]
        u_p = 0.0
        # inner loop: drop constraints until p can be added
        while True:
            if active:
                N = A[active].T
                S = N.T @ Hinv @ N
                try:
                    Nstar = np.linalg.solve(S, N.T @ Hinv)
                except np.linalg.LinAlgError:
                    Nstar = np.linalg.lstsq(S, N.T @ Hinv, rcond=None)[0]
                z = -(Hinv - Hinv @ N @ Nstar) @ npos
                r = Nstar @ npos
            else:
                z = -Hinv @ npos
                r = np.zeros(0)
            t1, drop = np.inf, None
            for k, rk in enumerate(r):
                if rk > 1e-14:
                    ratio = u[k] / rk
                    if ratio < t1:
                        t1, drop = ratio, k
            zn = -npos @ z
            t2 = np.inf
            if np.linalg.norm(z) > 1e-14 * max(1.0, np.linalg.norm(npos)) and zn > 1e-16:
                t2 = (A[p] @ v - b[p]) / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                status = "infeasible"
                break
            if not np.isfinite(t2):
                u = u - t * r
                u_p += t
                active.pop(drop)
                u = np.delete(u, drop)
                continue
            v = v + t * z
            u = u - t * r
            u_p += t
            if t2 <= t1:
                active.append(p)
                u = np.append(u, u_p)
                break
            active.pop(drop)
            u = np.delete(u, drop)
        if status == "infeasible":
            break

    lam = np.zeros(mrows)
    lam[active] = np.maximum(u, 0.0) if len(active) else 0.0
    res = kkt_residual(problem, v, lam)
    if status == "optimal" and reg == 0.0:
        if res > STATIONARITY_TOL * max(1.0, np.abs(c).max(initial=0.0), np.abs(H).max()):
            status = "max_iter"
    return QpSolution(v_opt=v, status=status, kkt_residual=res,
                      active_set=sorted(active), multipliers=lam, iterations=it)
