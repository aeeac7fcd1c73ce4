"""Input-output linearization, transverse coordinates and the RES-CLF."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ControlAffinePlant, DynamicsError, _checked_inverse, lie_derivatives
from .linalg_qp import LinalgError, eig_sym, solve_lyapunov


class ClfError(ValueError):
    pass


@dataclass(frozen=True)
class TransverseState:
    eta: np.ndarray
    x: np.ndarray


def transverse(plant: ControlAffinePlant, x) -> TransverseState:
    x = np.asarray(x, dtype=float)
    eta = np.concatenate([plant.lie_f_h(x, k) for k in range(plant.r)])
    return TransverseState(eta=eta, x=x)


def pre_control(plant: ControlAffinePlant, x):
    """Affine linearizing law u = u0 + M mu with u0 = u*(x), M = (L_g L_f^{r-1} h)^-1."""
    Lfr, D = lie_derivatives(plant, x)
    M = _checked_inverse(D)
    return -M @ Lfr, M


def io_linearizing_input(plant: ControlAffinePlant, x, mu) -> np.ndarray:
    u0, M = pre_control(plant, x)
    return u0 + M @ np.atleast_1d(np.asarray(mu, dtype=float))


def chain_matrices(m: int, r: int):
    """F (mr x mr) and G (mr x m) of the chain of integrators eta_dot = F eta + G mu."""
    F = np.zeros((m * r, m * r))
    F[: m * (r - 1), m:] = np.eye(m * (r - 1))
    G = np.zeros((m * r, m))
    G[m * (r - 1):, :] = np.eye(m)
    return F, G


def monic_coefficients(poles) -> np.ndarray:
    """[a_0, ..., a_{r-1}] of prod (s - p_i) = s^r + a_{r-1} s^{r-1} + ... + a_0."""
    poles = np.asarray(poles, dtype=float)
    coeffs = np.real(np.poly(poles))
    return coeffs[1:][::-1].copy()


@dataclass(frozen=True)
class ResClf:
    F: np.ndarray
    G: np.ndarray
    K: np.ndarray
    P_eps: np.ndarray
    Q: np.ndarray
    epsilon: float
    lam: float
    c1: float
    c2_over_eps2: float

    @property
    def m(self) -> int:
        return self.G.shape[1]

    @property
    def rate(self) -> float:
        """lambda / epsilon, the decay rate demanded of V."""
        return self.lam / self.epsilon

    @property
    def A(self) -> np.ndarray:
        return self.F + self.G @ self.K

    def V(self, eta) -> float:
        eta = np.asarray(eta, dtype=float)
        return float(eta @ self.P_eps @ eta)


def build_res_clf(m: int, r: int, pole_spec, epsilon: float = 0.8, lam: float | None = None,
                  Q=None) -> ResClf:
    """Gain K with epsilon scaling, P_eps from A'P + PA = -Q, default lambda.

    ``pole_spec`` lists r closed-loop poles (epsilon = 1) shared by every
    output channel. The gain on the k-th derivative block is -a_k / eps^(r-k).
    """
    if not 0.0 < epsilon < 1.0 and epsilon != 1.0:
        raise ClfError("epsilon must lie in (0, 1]")
    poles = np.asarray(pole_spec, dtype=float)
    if poles.shape != (r,):
        raise ClfError(f"need {r} poles, got {poles.shape}")
    a = monic_coefficients(poles)
    row = np.array([-a[k] / epsilon ** (r - k) for k in range(r)])
    K = np.kron(row, np.eye(m))
    F, G = chain_matrices(m, r)
    Q = np.eye(m * r) if Q is None else np.asarray(Q, dtype=float)
    try:
        P = solve_lyapunov(F + G @ K, Q)
    except LinalgError as exc:
        raise ClfError(str(exc)) from exc
    wp = eig_sym(P)
    if wp[0] <= 0.0:
        raise ClfError("P_eps is not positive definite")
    if lam is None:
        lam = 0.5 * eig_sym(Q)[0] / wp[-1]
    if lam <= 0.0:
        raise ClfError("lambda must be positive")
    return ResClf(F=F, G=G, K=K, P_eps=P, Q=Q, epsilon=float(epsilon), lam=float(lam),
                  c1=float(wp[0]), c2_over_eps2=float(wp[-1]))


def clf_lie_derivatives(clf: ResClf, eta):
    """(V, L_f V, L_g V) along the nominal chain-of-integrator dynamics."""
    eta = np.asarray(eta, dtype=float)
    P, F, G = clf.P_eps, clf.F, clf.G
    V = float(eta @ P @ eta)
    LfV = float(eta @ (F.T @ P + P @ F) @ eta)
    LgV = 2.0 * eta @ P @ G
    return V, LfV, LgV


__all__ = [
    "ClfError", "DynamicsError", "ResClf", "TransverseState", "build_res_clf",
    "chain_matrices", "clf_lie_derivatives", "io_linearizing_input", "monic_coefficients",
    "pre_control", "transverse",
]
