"""Exponential control barrier functions, optionally parameter dependent.

A barrier evaluates its Lie derivatives against whichever plant it is
handed, so the same object yields the nominal terms (nominal plant) and the
true terms (true plant) used by the mismatch oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fblin_clf import monic_coefficients


class BarrierError(ValueError):
    pass


def pole_place_kb(poles) -> np.ndarray:
    """K_b such that mu_b + K_b eta_b >= 0 has the given real negative poles.

    Coefficients of the monic polynomial with these roots, constant first:
    (s + 1)(s + 2) -> [2, 3].
    """
    poles = np.atleast_1d(np.asarray(poles, dtype=float))
    if poles.size == 0 or np.any(poles >= 0.0):
        raise BarrierError("ECBF poles must be real and negative")
    return monic_coefficients(poles)


def _companion_hurwitz(Kb) -> bool:
    r = len(Kb)
    A = np.zeros((r, r))
    A[:-1, 1:] = np.eye(r - 1)
    A[-1, :] = -np.asarray(Kb)
    return bool(np.max(np.linalg.eigvals(A).real) < 0.0)


@dataclass(frozen=True)
class BarrierRow:
    eta_b: np.ndarray
    Lf_rb_B: float
    LgLf_B: np.ndarray


class Ecbf:
    """Base ECBF. Subclasses implement ``lie(plant, x, psi)``."""

    relative_degree = 2
    name = "barrier"

    def __init__(self, poles=(-2.0, -4.0), psi_index=None):
        self.Kb = pole_place_kb(poles)
        if len(self.Kb) != self.relative_degree:
            raise BarrierError(f"need {self.relative_degree} poles")
        if not _companion_hurwitz(self.Kb):
            raise BarrierError("K_b companion matrix is not Hurwitz")
        self.psi_index = psi_index

    def value(self, x, psi=None) -> float:
        raise NotImplementedError

    def lie(self, plant, x, psi=None) -> BarrierRow:
        raise NotImplementedError

    def param(self, psi, default):
        if self.psi_index is None or psi is None or len(psi) == 0:
            return default
        return float(psi[self.psi_index])


class PositionBarrier(Ecbf):
    """B(q, psi) on the configuration of a mechanical plant (relative degree 2).

    With f = [qdot; a], g = [0; Bu]:
        L_f B   = dB . qdot
        L_f^2 B = qdot' d2B qdot + dB . a(x)
        L_g L_f B = dB . Bu(x)
    """

    def grad_hess(self, q, psi):
        raise NotImplementedError

    def lie(self, plant, x, psi=None) -> BarrierRow:
        x = np.asarray(x, dtype=float)
        nq = plant.n_q
        q, qd = x[:nq], x[nq:]
        dB, d2B = self.grad_hess(q, psi)
        B = self.value(x, psi)
        LfB = float(dB @ qd)
        Lf2B = float(qd @ d2B @ qd + dB @ plant.accel_drift(x))
        LgLfB = dB @ plant.accel_gain(x)
        return BarrierRow(eta_b=np.array([B, LfB]), Lf_rb_B=Lf2B, LgLf_B=np.atleast_1d(LgLfB))


class WallBarrier(PositionBarrier):
    """Half-line barrier on coordinate ``index``.

    side="upper": B = w - q_i (stay below w); side="lower": B = q_i - w.
    The wall position w is ``psi[psi_index]`` when a parameter is given.
    """

    name = "wall"

    def __init__(self, index=0, wall=1.0, side="upper", poles=(-2.0, -4.0), psi_index=None):
        super().__init__(poles, psi_index)
        if side not in ("upper", "lower"):
            raise BarrierError("side must be 'upper' or 'lower'")
        self.index, self.wall, self.side = int(index), float(wall), side
        self.sign = -1.0 if side == "upper" else 1.0

    def value(self, x, psi=None):
        w = self.param(psi, self.wall)
        return float(self.sign * (x[self.index] - w))

    def grad_hess(self, q, psi):
        dB = np.zeros(len(q))
        dB[self.index] = self.sign
        return dB, np.zeros((len(q), len(q)))


class SymmetricBoundBarrier(PositionBarrier):
    """B = q_max^2 - q_i^2, i.e. |q_i| <= q_max."""

    name = "bound"

    def __init__(self, index=0, bound=1.0, poles=(-2.0, -4.0), psi_index=None):
        super().__init__(poles, psi_index)
        self.index, self.bound = int(index), float(bound)

    def value(self, x, psi=None):
        b = self.param(psi, self.bound)
        return float(b * b - x[self.index] ** 2)

    def grad_hess(self, q, psi):
        n = len(q)
        dB = np.zeros(n)
        dB[self.index] = -2.0 * q[self.index]
        d2B = np.zeros((n, n))
        d2B[self.index, self.index] = -2.0
        return dB, d2B


class StateBarrier(Ecbf):
    """Relative-degree-1 barrier B(x, psi) given with its full-state gradient."""

    relative_degree = 1
    name = "state"

    def __init__(self, value_fn, grad_fn, poles=(-2.0,), psi_index=None):
        super().__init__(poles, psi_index)
        self._value, self._grad = value_fn, grad_fn

    def value(self, x, psi=None):
        return float(self._value(np.asarray(x, dtype=float), psi))

    def lie(self, plant, x, psi=None) -> BarrierRow:
        x = np.asarray(x, dtype=float)
        dB = np.asarray(self._grad(x, psi), dtype=float)
        return BarrierRow(eta_b=np.array([self.value(x, psi)]),
                          Lf_rb_B=float(dB @ plant.f(x)), LgLf_B=dB @ plant.g(x))


BARRIERS = {"wall": WallBarrier, "bound": SymmetricBoundBarrier}


def barrier_eta(ecbf: Ecbf, plant, x, psi=None) -> np.ndarray:
    return ecbf.lie(plant, x, psi).eta_b


def barrier_virtual_terms(ecbf: Ecbf, plant, x, psi=None):
    """(L_f^{r_b} B, L_g L_f^{r_b - 1} B) so that B^(r_b) = first + second . u."""
    row = ecbf.lie(plant, x, psi)
    return row.Lf_rb_B, row.LgLf_B
