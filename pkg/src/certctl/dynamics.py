"""Control-affine plants, nominal/true pairing and the analytic mismatch oracle.

All benchmark plants are mechanical with state ``x = [q, qdot]``, so

    f(x) = [qdot; a(x)],   g(x) = [0; Bu(x)]

and the output ``h(x) = C q - y_d`` has relative degree 2 with

    L_f h = C qdot,   L_f^2 h = C a(x),   L_g L_f h = C Bu(x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DynamicsError(ValueError):
    pass


class ControlAffinePlant:
    """Base class. Subclasses define ``accel_drift`` and ``accel_gain``."""

    name = "plant"
    n_q: int = 1
    m: int = 1
    r: int = 2
    u_max: float = np.inf
    failure_bound: float = 1e3

    def __init__(self, output_matrix=None, target=None):
        C = np.eye(self.m, self.n_q) if output_matrix is None else output_matrix
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.target = np.zeros(self.m) if target is None else np.atleast_1d(
            np.asarray(target, dtype=float))

    @property
    def n(self) -> int:
        return 2 * self.n_q

    # mechanical structure
    def accel_drift(self, x) -> np.ndarray:
        raise NotImplementedError

    def accel_gain(self, x) -> np.ndarray:
        raise NotImplementedError

    def f(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([x[self.n_q:], self.accel_drift(x)])

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return np.vstack([np.zeros((self.n_q, self.m)), self.accel_gain(x)])

    def h(self, x):
        x = np.asarray(x, dtype=float)
        return self.C @ x[:self.n_q] - self.target

    def lie_f_h(self, x, k: int) -> np.ndarray:
        """L_f^k h(x) for k = 0..r."""
        x = np.asarray(x, dtype=float)
        if k == 0:
            return self.h(x)
        if k == 1:
            return self.C @ x[self.n_q:]
        if k == 2:
            return self.C @ self.accel_drift(x)
        raise ValueError(f"k must be in 0..{self.r}")

    def decoupling(self, x) -> np.ndarray:
        """L_g L_f^{r-1} h(x)."""
        return self.C @ self.accel_gain(x)

    def failed(self, x) -> bool:
        return bool(np.linalg.norm(x) > self.failure_bound)

    def sample_domain(self, rng, size):
        return rng.uniform(-1.0, 1.0, size=(size, self.n))

    def with_params(self, **changes):
        raise NotImplementedError


class InvertedPendulum(ControlAffinePlant):
    """Point-mass pendulum about the upright, with an optional point payload.

    theta_ddot = ((m l + m_p l_p) g0 sin(theta) - b theta_dot + u) / (m l^2 + m_p l_p^2)
    """

    name = "pendulum"
    n_q = 1
    m = 1

    def __init__(self, mass=1.0, length=1.0, gravity=9.8, damping=0.0,
                 payload_mass=0.0, payload_offset=None, theta_d=0.0, u_max=20.0):
        super().__init__(target=[theta_d])
        self.mass, self.length, self.gravity = float(mass), float(length), float(gravity)
        self.damping = float(damping)
        self.payload_mass = float(payload_mass)
        self.payload_offset = 0.5 * self.length if payload_offset is None else float(payload_offset)
        self.theta_d = float(theta_d)
        self.u_max = float(u_max)
        self.inertia = self.mass * self.length**2 + self.payload_mass * self.payload_offset**2
        self.gravity_coeff = (self.mass * self.length
                              + self.payload_mass * self.payload_offset) * self.gravity

    def accel_drift(self, x):
        return np.array([(self.gravity_coeff * np.sin(x[0]) - self.damping * x[1]) / self.inertia])

    def accel_gain(self, x):
        return np.array([[1.0 / self.inertia]])

    def failed(self, x):
        return bool(abs(x[0]) > np.pi / 2)

    def sample_domain(self, rng, size):
        return np.column_stack([rng.uniform(-1.2, 1.2, size), rng.uniform(-2.0, 2.0, size)])

    def energy(self, x):
        return 0.5 * self.inertia * x[1] ** 2 + self.gravity_coeff * np.cos(x[0])

    def with_params(self, **changes):
        kw = dict(mass=self.mass, length=self.length, gravity=self.gravity,
                  damping=self.damping, payload_mass=self.payload_mass,
                  payload_offset=self.payload_offset, theta_d=self.theta_d, u_max=self.u_max)
        kw.update(changes)
        return InvertedPendulum(**kw)


class DoubleIntegrator(ControlAffinePlant):
    """Point mass on a line: p_ddot = u / (m + payload)."""

    name = "double_integrator"
    n_q = 1
    m = 1

    def __init__(self, mass=1.0, target=0.0, payload_mass=0.0, u_max=np.inf):
        super().__init__(target=[target])
        self.mass = float(mass)
        self.payload_mass = float(payload_mass)
        self.u_max = float(u_max)
        self.total_mass = self.mass + self.payload_mass

    def accel_drift(self, x):
        return np.zeros(1)

    def accel_gain(self, x):
        return np.array([[1.0 / self.total_mass]])

    def sample_domain(self, rng, size):
        return np.column_stack([rng.uniform(-1.0, 1.5, size), rng.uniform(-2.0, 2.0, size)])

    def with_params(self, **changes):
        kw = dict(mass=self.mass, target=float(self.target[0]),
                  payload_mass=self.payload_mass, u_max=self.u_max)
        kw.update(changes)
        return DoubleIntegrator(**kw)


class PlanarCart(ControlAffinePlant):
    """Planar point mass with linear drag: q_ddot = (F - c qdot) / (m + payload)."""

    name = "planar_cart"
    n_q = 2
    m = 2

    def __init__(self, mass=1.0, drag=0.5, target=(0.0, 0.0), payload_mass=0.0, u_max=np.inf):
        super().__init__(target=list(target))
        self.mass, self.drag = float(mass), float(drag)
        self.payload_mass = float(payload_mass)
        self.u_max = float(u_max)
        self.total_mass = self.mass + self.payload_mass

    def accel_drift(self, x):
        return -self.drag * np.asarray(x[2:], dtype=float) / self.total_mass

    def accel_gain(self, x):
        return np.eye(2) / self.total_mass

    def sample_domain(self, rng, size):
        return rng.uniform(-1.5, 1.5, size=(size, 4))

    def with_params(self, **changes):
        kw = dict(mass=self.mass, drag=self.drag, target=tuple(self.target),
                  payload_mass=self.payload_mass, u_max=self.u_max)
        kw.update(changes)
        return PlanarCart(**kw)


PLANTS = {
    "pendulum": InvertedPendulum,
    "double_integrator": DoubleIntegrator,
    "planar_cart": PlanarCart,
}


def make_plant(plant_id: str, **params) -> ControlAffinePlant:
    try:
        cls = PLANTS[plant_id]
    except KeyError:
        raise DynamicsError(f"unknown plant {plant_id!r}") from None
    return cls(**params)


@dataclass(frozen=True)
class PlantPair:
    true_plant: ControlAffinePlant
    nominal_plant: ControlAffinePlant

    def __post_init__(self):
        t, s = self.true_plant, self.nominal_plant
        if (t.n, t.m, t.r) != (s.n, s.m, s.r):
            raise DynamicsError("true and nominal plants must share n, m and r")


def uncertain_pair(nominal: ControlAffinePlant, mode: str = "scale", scale: float = 2.0,
                   payload: float = 0.5) -> PlantPair:
    """Build (true, nominal) from a nominal plant.

    ``scale`` multiplies the mass; ``payload`` adds ``payload * mass`` as a
    separate point mass (off-axis for the pendulum); ``none`` copies.
    """
    if mode == "none":
        true = nominal.with_params()
    elif mode == "scale":
        true = nominal.with_params(mass=nominal.mass * scale)
    elif mode == "payload":
        true = nominal.with_params(payload_mass=nominal.payload_mass + payload * nominal.mass)
    else:
        raise DynamicsError(f"unknown uncertainty mode {mode!r}")
    return PlantPair(true, nominal)


@dataclass(frozen=True)
class MismatchTerms:
    delta1: np.ndarray
    delta2: np.ndarray
    delta3: np.ndarray


def _checked_inverse(D):
    D = np.atleast_2d(D)
    if not np.all(np.isfinite(D)) or np.linalg.cond(D) > 1e12:
        raise DynamicsError("lost relative degree: decoupling matrix is singular")
    return np.linalg.inv(D)


def lie_derivatives(plant: ControlAffinePlant, x):
    """(L_f^r h(x), L_g L_f^{r-1} h(x))."""
    D = plant.decoupling(x)
    _checked_inverse(D)
    return plant.lie_f_h(x, plant.r), D


def feedforward_input(plant: ControlAffinePlant, x) -> np.ndarray:
    Lfr, D = lie_derivatives(plant, x)
    return -np.linalg.solve(D, Lfr)


def mismatch_oracle(pair: PlantPair, x) -> MismatchTerms:
    """Exact bias and gain errors of y^(r) under the nominal linearizing law."""
    Lfr, D = lie_derivatives(pair.true_plant, x)
    Lfr_n = pair.nominal_plant.lie_f_h(x, pair.nominal_plant.r)
    Dn = pair.nominal_plant.decoupling(x)
    Dn_inv = _checked_inverse(Dn)
    # equal decoupling matrices give an exact identity (no round-off in D Dn^-1)
    ratio = np.eye(D.shape[0]) if np.array_equal(D, Dn) else D @ Dn_inv
    delta1 = Lfr - ratio @ Lfr_n
    delta2 = ratio - np.eye(ratio.shape[0])
    return MismatchTerms(delta1, delta2, delta2 + np.eye(ratio.shape[0]))


def true_derivative(plant: ControlAffinePlant, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (plant.n,) or u.shape != (plant.m,):
        raise DynamicsError(f"expected x{(plant.n,)} and u{(plant.m,)}, got {x.shape}, {u.shape}")
    return plant.f(x) + plant.g(x) @ u
