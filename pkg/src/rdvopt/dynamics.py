"""Relative orbital element dynamics for near-circular rendezvous.

The solver-side state is the dimensionless quasi-nonsingular relative
orbital element (ROE) vector ``(da, dlambda, dex, dey, dix, diy)``.
Geometric constraints live in the target-centered radial/tangential/normal
(RTN) Cartesian frame; the two are tied together by the first-order linear
map :func:`psi_map`.

All maps here use the Keplerian near-circular specialization: the state
transition matrix is identity plus the along-track drift proportional to
the relative semi-major axis, and the control input matrix is the
first-order sensitivity of the ROE to an impulsive RTN delta-velocity.
The nonlinear two-body integrator in :mod:`rdvopt.twobody` is the ground
truth these matrices are verified against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# WGS-84 gravitational parameter [m^3/s^2] and equatorial radius [m].
MU_EARTH = 3.986004418e14
R_EARTH = 6378137.0

TWO_PI = 2.0 * math.pi

# Quasi-nonsingular elements are still singular for equatorial orbits.
MIN_INCLINATION = 1e-4
MAX_ECCENTRICITY = 0.05


@dataclass(frozen=True)
class OrbitalElements:
    """Quasi-nonsingular mean orbital elements of the target.

    Attributes
    ----------
    a : float
        Semi-major axis [m].
    nu : float
        Mean argument of latitude (mean anomaly + argument of perigee) [rad].
    ex, ey : float
        Eccentricity vector components ``e*cos(w)``, ``e*sin(w)``.
    i : float
        Inclination [rad].
    raan : float
        Right ascension of the ascending node [rad].
    """

    a: float
    nu: float
    ex: float
    ey: float
    i: float
    raan: float

    def __post_init__(self):
        if not (self.a > 0.0):
            raise ValueError(f"semi-major axis must be positive, got {self.a}")
        e = math.hypot(self.ex, self.ey)
        if not (e < 1.0):
            raise ValueError(f"eccentricity must be < 1, got {e}")
        for name in ("nu", "i", "raan"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"element {name} is not finite")
        object.__setattr__(self, "nu", self.nu % TWO_PI)
        object.__setattr__(self, "raan", self.raan % TWO_PI)
        object.__setattr__(self, "i", self.i % TWO_PI)

    @property
    def eccentricity(self) -> float:
        return math.hypot(self.ex, self.ey)

    @property
    def argp(self) -> float:
        """Argument of perigee [rad]."""
        return math.atan2(self.ey, self.ex)

    @property
    def mean_anomaly(self) -> float:
        return (self.nu - self.argp) % TWO_PI

    def after(self, dt: float) -> "OrbitalElements":
        """Mean elements a time ``dt`` later; only ``nu`` advances."""
        n = mean_motion(self)
        return OrbitalElements(self.a, (self.nu + n * dt) % TWO_PI,
                               self.ex, self.ey, self.i, self.raan)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.nu, self.ex, self.ey, self.i, self.raan])


@dataclass(frozen=True)
class RoeState:
    """Dimensionless quasi-nonsingular relative orbital elements."""

    da: float
    dlambda: float
    dex: float
    dey: float
    dix: float
    diy: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("relative orbital elements must be finite")

    @classmethod
    def from_array(cls, arr) -> "RoeState":
        a = np.asarray(arr, dtype=float).reshape(6)
        return cls(*a.tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.da, self.dlambda, self.dex,
                         self.dey, self.dix, self.diy])

    def scaled(self, a: float) -> np.ndarray:
        """Meter-scaled view ``a * droe`` for a target semi-major axis."""
        return a * self.as_array()


@dataclass(frozen=True)
class RtnState:
    """Relative Cartesian state in the target-centered RTN frame."""

    dr: np.ndarray  # position (radial, tangential, normal) [m]
    dv: np.ndarray  # velocity [m/s]

    def __post_init__(self):
        dr = np.asarray(self.dr, dtype=float).reshape(3)
        dv = np.asarray(self.dv, dtype=float).reshape(3)
        if not (np.all(np.isfinite(dr)) and np.all(np.isfinite(dv))):
            raise ValueError("RTN state must be finite")
        object.__setattr__(self, "dr", dr)
        object.__setattr__(self, "dv", dv)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.dr, self.dv])


@dataclass(frozen=True)
class ImpulsiveControl:
    """Instantaneous delta-velocity in RTN coordinates [m/s]."""

    dvec: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dvec, dtype=float).reshape(3)
        if not np.all(np.isfinite(d)):
            raise ValueError("delta-velocity must be finite")
        object.__setattr__(self, "dvec", d)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.dvec))


def mean_motion(oe: OrbitalElements) -> float:
    """Mean motion ``n = sqrt(mu / a^3)`` [rad/s]."""
    if oe.a <= 0.0:
        raise ValueError("semi-major axis must be positive")
    return math.sqrt(MU_EARTH / oe.a**3)


def orbital_period(oe: OrbitalElements) -> float:
    return TWO_PI / mean_motion(oe)


def stm(oe: OrbitalElements, dt: float) -> np.ndarray:
    """Keplerian ROE state transition matrix over ``dt`` seconds.

    Identity except for the along-track drift row: a relative semi-major
    axis offset ``da`` drifts the relative mean longitude at rate
    ``-1.5 * n * da``.
    """
    if dt < 0.0:
        raise ValueError("propagation time must be non-negative")
    phi = np.eye(6)
    phi[1, 0] = -1.5 * mean_motion(oe) * dt
    return phi


def _check_near_circular(oe: OrbitalElements) -> None:
    if abs(math.sin(oe.i)) < MIN_INCLINATION:
        raise ValueError("quasi-nonsingular elements are singular for "
                         f"near-equatorial orbits (i = {oe.i:.2e} rad)")
    if oe.eccentricity >= MAX_ECCENTRICITY:
        raise ValueError("near-circular forms require e < "
                         f"{MAX_ECCENTRICITY}, got {oe.eccentricity:.4f}")


def control_matrix(oe: OrbitalElements) -> np.ndarray:
    """First-order ROE response to an impulsive RTN delta-velocity.

    Returns the 6x3 matrix ``B`` such that ``droe_plus = droe + B @ dv``
    with ``dv`` in [m/s], for a near-circular target at mean argument of
    latitude ``oe.nu``.
    """
    _check_near_circular(oe)
    u = oe.nu
    na = mean_motion(oe) * oe.a
    su, cu = math.sin(u), math.cos(u)
    return np.array([
        [0.0,      2.0,        0.0],
        [-2.0,     0.0,        0.0],
        [su,       2.0 * cu,   0.0],
        [-cu,      2.0 * su,   0.0],
        [0.0,      0.0,        cu],
        [0.0,      0.0,        su],
    ]) / na


def psi_map(oe: OrbitalElements) -> np.ndarray:
    """First-order linear map from ROE to the RTN Cartesian state.

    ``[dr; dv] approx Psi @ droe`` with positions in meters and velocities
    in m/s for the dimensionless ROE state; near-circular form evaluated
    at mean argument of latitude ``oe.nu``.
    """
    _check_near_circular(oe)
    a = oe.a
    n = mean_motion(oe)
    u = oe.nu
    su, cu = math.sin(u), math.cos(u)
    an = a * n
    return np.array([
        [a,          0.0, -a * cu,       -a * su,       0.0,      0.0],
        [0.0,        a,   2.0 * a * su,  -2.0 * a * cu, 0.0,      0.0],
        [0.0,        0.0, 0.0,           0.0,           a * su,   -a * cu],
        [0.0,        0.0, an * su,       -an * cu,      0.0,      0.0],
        [-1.5 * an,  0.0, 2.0 * an * cu, 2.0 * an * su, 0.0,      0.0],
        [0.0,        0.0, 0.0,           0.0,           an * cu,  an * su],
    ])


def psi_inverse_apply(oe: OrbitalElements, chi: np.ndarray) -> np.ndarray:
    """ROE state whose linear RTN image equals ``chi``."""
    return np.linalg.solve(psi_map(oe), np.asarray(chi, dtype=float).reshape(6))


def propagate(state: RoeState, ctrl: ImpulsiveControl, oe: OrbitalElements,
              dt: float) -> RoeState:
    """One discrete dynamics step: impulse applied, then drift over ``dt``.

    Implements ``droe(t+dt) = Phi(dt) @ (droe(t) + B(t) @ dv(t))``.
    """
    b = control_matrix(oe)
    phi = stm(oe, dt)
    nxt = phi @ (state.as_array() + b @ ctrl.dvec)
    return RoeState.from_array(nxt)


def rtn_from_roe(oe: OrbitalElements, roe: np.ndarray) -> RtnState:
    chi = psi_map(oe) @ np.asarray(roe, dtype=float).reshape(6)
    return RtnState(chi[:3], chi[3:])
