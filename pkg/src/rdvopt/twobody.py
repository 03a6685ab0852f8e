"""Nonlinear two-body verification oracle.

Integrates the target and servicer spacecraft under point-mass gravity
with a fixed-step classical Runge-Kutta scheme, applies impulses as
instantaneous RTN velocity changes of the servicer, and reports the
nonlinear relative motion in the target-centered rotating RTN frame.

This module is deliberately independent of the linearized machinery in
:mod:`rdvopt.dynamics`: conversions go through Cartesian inertial states
and Kepler's equation, never through the small-separation matrices, so it
can serve as ground truth for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (MU_EARTH, OrbitalElements, RoeState, RtnState,
                       mean_motion, orbital_period)


def solve_kepler(mean_anom: float, e: float, tol: float = 1e-14) -> float:
    """Eccentric anomaly from mean anomaly by Newton iteration."""
    m = math.fmod(mean_anom, 2.0 * math.pi)
    ecc_anom = m if e < 0.8 else math.pi
    for _ in range(64):
        f = ecc_anom - e * math.sin(ecc_anom) - m
        ecc_anom -= f / (1.0 - e * math.cos(ecc_anom))
        if abs(f) < tol:
            break
    return ecc_anom


def elements_to_rv(oe: OrbitalElements) -> tuple[np.ndarray, np.ndarray]:
    """Inertial position [m] and velocity [m/s] of an osculating element set."""
    e = oe.eccentricity
    argp = oe.argp if e > 0.0 else 0.0
    mean_anom = oe.nu - argp
    ecc_anom = solve_kepler(mean_anom, e)
    ce, se = math.cos(ecc_anom), math.sin(ecc_anom)
    b_fac = math.sqrt(1.0 - e * e)
    # Perifocal coordinates.
    r_pf = np.array([oe.a * (ce - e), oe.a * b_fac * se, 0.0])
    r_norm = oe.a * (1.0 - e * ce)
    edot = math.sqrt(MU_EARTH * oe.a) / r_norm
    v_pf = np.array([-edot * se, edot * b_fac * ce, 0.0])
    rot = _perifocal_to_inertial(oe.raan, oe.i, argp)
    return rot @ r_pf, rot @ v_pf


def _perifocal_to_inertial(raan: float, inc: float, argp: float) -> np.ndarray:
    co, so = math.cos(raan), math.sin(raan)
    ci, si = math.cos(inc), math.sin(inc)
    cw, sw = math.cos(argp), math.sin(argp)
    return np.array([
        [co * cw - so * sw * ci, -co * sw - so * cw * ci, so * si],
        [so * cw + co * sw * ci, -so * sw + co * cw * ci, -co * si],
        [sw * si,                cw * si,                 ci],
    ])


def rv_to_elements(r: np.ndarray, v: np.ndarray) -> OrbitalElements:
    """Osculating quasi-nonsingular elements of an inertial state."""
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    rn = np.linalg.norm(r)
    h = np.cross(r, v)
    hn = np.linalg.norm(h)
    inc = math.acos(np.clip(h[2] / hn, -1.0, 1.0))
    node = np.array([-h[1], h[0], 0.0])
    nn = np.linalg.norm(node)
    raan = math.atan2(node[1], node[0]) if nn > 0.0 else 0.0
    e_vec = np.cross(v, h) / MU_EARTH - r / rn
    e = np.linalg.norm(e_vec)
    energy = v @ v / 2.0 - MU_EARTH / rn
    a = -MU_EARTH / (2.0 * energy)

    # Argument of latitude of the position (from ascending node, in-plane).
    node_u = node / nn
    m_u = np.cross(h / hn, node_u)
    theta_lat = math.atan2(r @ m_u, r @ node_u)
    if e > 1e-12:
        argp = math.atan2(e_vec @ m_u, e_vec @ node_u)
        true_anom = theta_lat - argp
        ecc_anom = math.atan2(math.sqrt(1.0 - e * e) * math.sin(true_anom),
                              e + math.cos(true_anom))
        mean_anom = ecc_anom - e * math.sin(ecc_anom)
    else:
        argp = 0.0
        mean_anom = theta_lat
    return OrbitalElements(a=a, nu=mean_anom + argp,
                           ex=e * math.cos(argp), ey=e * math.sin(argp),
                           i=inc, raan=raan)


def servicer_elements(oe_t: OrbitalElements, roe: RoeState) -> OrbitalElements:
    """Servicer elements realizing a given ROE state about the target."""
    a_s = oe_t.a * (1.0 + roe.da)
    i_s = oe_t.i + roe.dix
    raan_s = oe_t.raan + roe.diy / math.sin(oe_t.i)
    ex_s = oe_t.ex + roe.dex
    ey_s = oe_t.ey + roe.dey
    nu_s = oe_t.nu + roe.dlambda - (raan_s - oe_t.raan) * math.cos(oe_t.i)
    return OrbitalElements(a=a_s, nu=nu_s, ex=ex_s, ey=ey_s, i=i_s, raan=raan_s)


def relative_roe(oe_t: OrbitalElements, oe_s: OrbitalElements) -> np.ndarray:
    """Quasi-nonsingular ROE of a servicer relative to the target."""
    d_raan = _wrap_pi(oe_s.raan - oe_t.raan)
    return np.array([
        (oe_s.a - oe_t.a) / oe_t.a,
        _wrap_pi(oe_s.nu - oe_t.nu) + d_raan * math.cos(oe_t.i),
        oe_s.ex - oe_t.ex,
        oe_s.ey - oe_t.ey,
        oe_s.i - oe_t.i,
        d_raan * math.sin(oe_t.i),
    ])


def _wrap_pi(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def rtn_basis(r: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rows are the radial, tangential, normal unit vectors."""
    rhat = r / np.linalg.norm(r)
    h = np.cross(r, v)
    nhat = h / np.linalg.norm(h)
    that = np.cross(nhat, rhat)
    return np.vstack([rhat, that, nhat])


def relative_rtn(r_t, v_t, r_s, v_s) -> RtnState:
    """Rotating-frame relative state of the servicer about the target."""
    basis = rtn_basis(r_t, v_t)
    dr_eci = np.asarray(r_s) - np.asarray(r_t)
    dv_eci = np.asarray(v_s) - np.asarray(v_t)
    omega = np.cross(r_t, v_t) / (np.linalg.norm(r_t) ** 2)
    dr = basis @ dr_eci
    dv = basis @ (dv_eci - np.cross(omega, dr_eci))
    return RtnState(dr, dv)


def _gravity(y: np.ndarray) -> np.ndarray:
    out = np.empty(12)
    for k in (0, 6):
        r = y[k:k + 3]
        out[k:k + 3] = y[k + 3:k + 6]
        out[k + 3:k + 6] = -MU_EARTH * r / np.linalg.norm(r) ** 3
    return out


def _rk4_span(y: np.ndarray, duration: float, h_max: float) -> np.ndarray:
    if duration <= 0.0:
        return y
    steps = max(1, math.ceil(duration / h_max))
    h = duration / steps
    for _ in range(steps):
        k1 = _gravity(y)
        k2 = _gravity(y + 0.5 * h * k1)
        k3 = _gravity(y + 0.5 * h * k2)
        k4 = _gravity(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


@dataclass
class TwoBodyResult:
    times: np.ndarray
    rtn: list[RtnState]
    target_rv: list[tuple[np.ndarray, np.ndarray]]
    servicer_rv: list[tuple[np.ndarray, np.ndarray]]

    def positions(self) -> np.ndarray:
        return np.array([s.dr for s in self.rtn])


def propagate_two_body(oe_target: OrbitalElements, roe0: RoeState,
                       impulses: list[tuple[float, np.ndarray]],
                       t_eval, max_step: float | None = None) -> TwoBodyResult:
    """Integrate both spacecraft and sample the nonlinear RTN relative state.

    Parameters
    ----------
    impulses : list of ``(time [s], dv_rtn [m/s])``
        Applied to the servicer as instantaneous velocity changes expressed
        in its own instantaneous RTN frame.
    t_eval : array of sample times [s], non-decreasing, starting at >= 0.
    max_step : RK4 step bound; must not exceed ``period / 2000``.
    """
    period = orbital_period(oe_target)
    limit = period / 2000.0
    if max_step is None:
        max_step = limit
    if max_step > limit * (1.0 + 1e-12):
        raise ValueError(f"integrator step {max_step:.3f}s exceeds "
                         f"period/2000 = {limit:.3f}s")

    t_eval = np.atleast_1d(np.asarray(t_eval, dtype=float))
    if np.any(np.diff(t_eval) < 0.0) or (t_eval.size and t_eval[0] < 0.0):
        raise ValueError("evaluation times must be non-decreasing and >= 0")

    r_t, v_t = elements_to_rv(oe_target)
    r_s, v_s = elements_to_rv(servicer_elements(oe_target, roe0))
    y = np.concatenate([r_t, v_t, r_s, v_s])

    # Event queue: impulses and sample times, processed in time order.
    events = sorted([(float(t), "imp", np.asarray(dv, dtype=float))
                     for t, dv in impulses], key=lambda e: e[0])
    out_rtn: list[RtnState] = []
    out_t: list[tuple[np.ndarray, np.ndarray]] = []
    out_s: list[tuple[np.ndarray, np.ndarray]] = []

    t_now = 0.0
    ei = 0
    for t_sample in t_eval:
        while ei < len(events) and events[ei][0] <= t_sample + 1e-12:
            t_imp, _, dv = events[ei]
            y = _rk4_span(y, t_imp - t_now, max_step)
            t_now = t_imp
            basis = rtn_basis(y[6:9], y[9:12])
            y[9:12] = y[9:12] + basis.T @ dv
            ei += 1
        y = _rk4_span(y, t_sample - t_now, max_step)
        t_now = t_sample
        out_rtn.append(relative_rtn(y[0:3], y[3:6], y[6:9], y[9:12]))
        out_t.append((y[0:3].copy(), y[3:6].copy()))
        out_s.append((y[6:9].copy(), y[9:12].copy()))

    return TwoBodyResult(times=t_eval, rtn=out_rtn, target_rv=out_t,
                         servicer_rv=out_s)


def specific_energy(r: np.ndarray, v: np.ndarray) -> float:
    return float(v @ v / 2.0 - MU_EARTH / np.linalg.norm(r))


def osculating_roe(r_t, v_t, r_s, v_s) -> np.ndarray:
    """Osculating ROE of a servicer/target inertial state pair."""
    return relative_roe(rv_to_elements(r_t, v_t), rv_to_elements(r_s, v_s))
