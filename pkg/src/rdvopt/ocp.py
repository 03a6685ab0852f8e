"""Rendezvous optimal control problems as conic program data.

Three problems share the same impulsive ROE dynamics and fuel objective
(sum of delta-v norms):

* ``TPBVP``     - boundary value problem from the initial state to the
                  docking condition, no path constraints.
* ``CVX``       - adds the zero-velocity pre-docking waypoint and the
                  approach-cone second-order-cone constraints.
* ``NONCONVEX`` - the CVX constraints plus the keep-out-zone, handled by
                  linearizing the ellipsoid constraint around a reference
                  trajectory together with a trust region; this is the
                  subproblem form consumed by :mod:`rdvopt.scp`.

Programs are assembled in scaled units (meter-scaled ROE states, mm/s
controls) so that all matrix coefficients are within a few orders of
magnitude of unity; extraction undoes the scaling.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dynamics import (OrbitalElements, RoeState, control_matrix,
                       mean_motion, orbital_period, psi_map,
                       psi_inverse_apply, stm)
from .socp import ConicProgram, SolverSolution

# Conservative tightening of linearized keep-out-zone rows (scaled units,
# order 1e-6 relative): keeps the true quadratic constraint satisfied under
# solver-tolerance-level violations of the linear rows.
KOZ_MARGIN = 2e-6

CONTROL_SCALE = 1e-3  # program controls are in mm/s; physical unit is m/s


class ProblemKind(str, enum.Enum):
    TPBVP = "tpbvp"
    CVX = "cvx"
    NONCONVEX = "nonconvex"


@dataclass(frozen=True)
class KozEllipsoid:
    """Axis-aligned keep-out ellipsoid, principal semi-axes in meters."""

    semiaxes: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.semiaxes, dtype=float).reshape(3)
        if np.any(s <= 0.0):
            raise ValueError("keep-out-zone semi-axes must be positive")
        object.__setattr__(self, "semiaxes", s)

    @property
    def scaling_selector(self) -> np.ndarray:
        """The 3x6 matrix ``[diag(1/r), 0]`` acting on an RTN state."""
        return np.hstack([np.diag(1.0 / self.semiaxes), np.zeros((3, 3))])


@dataclass(frozen=True)
class Scenario:
    """One rendezvous instance; geometry per the simulation parameter table."""

    oe0: OrbitalElements
    roe0: np.ndarray          # dimensionless ROE at t1
    n_steps: int              # N
    horizon: float            # [s]
    n_wp: int                 # waypoint node index (1-based)
    dr_wp: np.ndarray         # waypoint RTN position [m]
    dr_dp: np.ndarray         # docking port RTN position [m]
    n_ac: np.ndarray          # approach axis unit vector
    gamma_ac: float           # cone half-angle [rad]
    koz_semiaxes: np.ndarray  # (radial, tangential, normal) [m]

    def __post_init__(self):
        object.__setattr__(self, "roe0", np.asarray(self.roe0, dtype=float).reshape(6))
        for name in ("dr_wp", "dr_dp", "n_ac", "koz_semiaxes"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float).reshape(3))
        if not (1 <= self.n_wp <= self.n_steps):
            raise ValueError("waypoint index must lie in [1, N]")
        if abs(np.linalg.norm(self.n_ac) - 1.0) > 1e-9:
            raise ValueError("approach axis must be a unit vector")
        if not (0.0 < self.gamma_ac < math.pi / 2.0):
            raise ValueError("cone half-angle must be in (0, pi/2)")
        if np.any(self.koz_semiaxes <= 0.0):
            raise ValueError("keep-out-zone semi-axes must be positive")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def times(self) -> np.ndarray:
        """Node times t_1..t_{N+1}, with t_1 = 0."""
        return np.arange(self.n_steps + 1) * self.dt

    def oe_at(self, t: float) -> OrbitalElements:
        return self.oe0.after(t)

    @property
    def koz(self) -> KozEllipsoid:
        return KozEllipsoid(self.koz_semiaxes)


@dataclass
class TrajectoryRecord:
    """Time grid, states, controls, and the to-go conditioning sequences."""

    times: np.ndarray     # (N+1,)
    states: np.ndarray    # (N+1, 6) dimensionless ROE
    controls: np.ndarray  # (N, 3) [m/s]
    rtg: np.ndarray       # (N,) reward-to-go [m/s], non-positive
    ctg: np.ndarray       # (N,) constraint-to-go counts

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        n = self.times.size - 1
        self.states = np.asarray(self.states, dtype=float).reshape(n + 1, 6)
        self.controls = np.asarray(self.controls, dtype=float).reshape(n, 3)
        self.rtg = np.asarray(self.rtg, dtype=float).reshape(n)
        self.ctg = np.asarray(self.ctg, dtype=np.int64).reshape(n)

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    def total_cost(self) -> float:
        """Sum of impulse norms [m/s]."""
        return float(np.sum(np.linalg.norm(self.controls, axis=1)))

    @classmethod
    def from_states_controls(cls, scn: Scenario, states: np.ndarray,
                             controls: np.ndarray,
                             kind: ProblemKind = ProblemKind.NONCONVEX
                             ) -> "TrajectoryRecord":
        rtg = reward_to_go_values(controls)
        if kind == ProblemKind.TPBVP:
            ctg = np.zeros(np.asarray(controls).shape[0], dtype=np.int64)
        else:
            ctg = constraint_to_go_values(scn, states)
        return cls(times=scn.times(), states=states, controls=controls,
                   rtg=rtg, ctg=ctg)


def reward_to_go_values(controls: np.ndarray) -> np.ndarray:
    """Negative suffix sums of impulse norms, exact telescoping recurrence."""
    controls = np.asarray(controls, dtype=float)
    n = controls.shape[0]
    norms = np.linalg.norm(controls, axis=1)
    rtg = np.empty(n)
    if n:
        rtg[n - 1] = -norms[n - 1]
        for i in range(n - 2, -1, -1):
            rtg[i] = rtg[i + 1] - norms[i]
    return rtg


def koz_value(state: RoeState | np.ndarray, oe: OrbitalElements,
              koz: KozEllipsoid) -> float:
    """Quadratic keep-out metric; >= 1 means outside or on the ellipsoid."""
    roe = state.as_array() if isinstance(state, RoeState) else np.asarray(state, dtype=float)
    chi = psi_map(oe) @ roe
    return float(np.sum((chi[:3] / koz.semiaxes) ** 2))


def constraint_indicator(state, oe: OrbitalElements, scn: Scenario,
                         t_index: int) -> int:
    """1 iff the node is inside the keep-out window and strictly inside it."""
    if not (1 <= t_index <= scn.n_steps):
        raise ValueError("time index out of range")
    if t_index > scn.n_wp:
        return 0
    return int(koz_value(state, oe, scn.koz) < 1.0)


def constraint_to_go_values(scn: Scenario, states: np.ndarray) -> np.ndarray:
    """Suffix sums of keep-out-zone violation indicators over nodes 1..N."""
    states = np.asarray(states, dtype=float)
    model = ScenarioModel(scn)
    q = model.koz_values(states)
    viol = np.zeros(scn.n_steps, dtype=np.int64)
    idx = np.arange(1, scn.n_steps + 1)
    viol[(idx <= scn.n_wp)] = (q[: scn.n_wp] < 1.0).astype(np.int64)
    return np.cumsum(viol[::-1])[::-1]


def reward_to_go(traj: TrajectoryRecord) -> np.ndarray:
    return reward_to_go_values(traj.controls)


def constraint_to_go(traj: TrajectoryRecord, scn: Scenario) -> np.ndarray:
    return constraint_to_go_values(scn, traj.states)


def approach_cone_params(scn: Scenario, t_index: int):
    """Second-order-cone data ``||A roe + b|| <= c' roe + d`` at a node."""
    if not (scn.n_wp <= t_index <= scn.n_steps):
        raise ValueError(f"approach cone applies on [{scn.n_wp}, {scn.n_steps}]")
    t = (t_index - 1) * scn.dt
    psi = psi_map(scn.oe_at(t))
    d_sel = np.hstack([np.eye(3), np.zeros((3, 3))])
    a_mat = d_sel @ psi
    b_vec = -scn.dr_dp
    cosg = math.cos(scn.gamma_ac)
    c_vec = (scn.n_ac @ a_mat) / cosg
    d_val = -(scn.n_ac @ scn.dr_dp) / cosg
    return a_mat, b_vec, c_vec, d_val


class ScenarioModel:
    """Precomputed per-node matrices for one scenario (internal cache)."""

    def __init__(self, scn: Scenario):
        self.scn = scn
        n = scn.n_steps
        a = scn.oe0.a
        self.a = a
        self.n_mean = mean_motion(scn.oe0)
        dt = scn.dt
        ts = scn.times()
        self.phi = stm(scn.oe0, dt)
        self.b_mats = np.stack([control_matrix(scn.oe_at(t)) for t in ts[:-1]])
        self.psi = np.stack([psi_map(scn.oe_at(t)) for t in ts])
        self.psi_tilde = self.psi / a          # meter-scaled state -> [m; m/s]
        e_sel = scn.koz.scaling_selector
        self.e_psi_tilde = np.einsum("ij,njk->nik", e_sel, self.psi_tilde)
        # dynamics control gain in scaled units: x~' = Phi x~ + gain v~ [mm/s]
        self.gain = a * CONTROL_SCALE * np.einsum("ij,njk->nik", self.phi, self.b_mats)
        d_sel = np.hstack([np.eye(3), np.zeros((3, 3))])
        self.cone_a = np.einsum("ij,njk->nik", d_sel, self.psi_tilde)
        cosg = math.cos(scn.gamma_ac)
        self.cone_c = np.einsum("i,nij->nj", scn.n_ac, self.cone_a) / cosg
        self.cone_d = -float(scn.n_ac @ scn.dr_dp) / cosg

    def koz_quadratic(self, node: int) -> np.ndarray:
        """6x6 PSD matrix of the keep-out quadratic in meter-scaled ROE."""
        ep = self.e_psi_tilde[node]
        return ep.T @ ep

    def koz_values(self, states: np.ndarray) -> np.ndarray:
        """Keep-out metric q at every node of a dimensionless state history."""
        scaled = self.a * np.asarray(states, dtype=float)
        img = np.einsum("nij,nj->ni", self.e_psi_tilde[: scaled.shape[0]], scaled)
        return np.sum(img ** 2, axis=1)

    def dock_target_roe(self) -> np.ndarray:
        chi = np.concatenate([self.scn.dr_dp, np.zeros(3)])
        return psi_inverse_apply(self.scn.oe_at(self.scn.times()[-1]), chi)


def _csr(rows, cols, data, shape) -> sp.csr_matrix:
    return sp.csr_matrix((data, (rows, cols)), shape=shape)


def build_problem(scn: Scenario, kind: ProblemKind,
                  ref_states: np.ndarray | None = None,
                  zeta: float | None = None,
                  model: ScenarioModel | None = None) -> ConicProgram:
    """Assemble a rendezvous problem as a conic program.

    Variable layout: meter-scaled states ``x(t_1..t_{N+1})`` (6 each),
    controls in mm/s ``v(t_1..t_N)`` (3 each), then the per-node epigraph
    variables for the impulse norms.  The objective value is the total
    delta-v in mm/s.

    For ``NONCONVEX`` a reference trajectory (dimensionless states,
    ``(N+1, 6)``) and a trust radius ``zeta`` [m] are required.
    """
    model = model or ScenarioModel(scn)
    n_t = scn.n_steps
    nx = 6 * (n_t + 1)
    nv = 3 * n_t
    n_vars = nx + nv + n_t

    def x_idx(i):  # node i, 1-based
        return 6 * (i - 1) + np.arange(6)

    def v_idx(i):
        return nx + 3 * (i - 1) + np.arange(3)

    def s_idx(i):
        return nx + nv + (i - 1)

    rows, cols, data, beq = [], [], [], []
    row0 = 0

    def add_rows(r, c, d, rhs):
        nonlocal row0
        rows.append(np.asarray(r) + row0)
        cols.append(np.asarray(c))
        data.append(np.asarray(d, dtype=float))
        beq.append(np.asarray(rhs, dtype=float))
        row0 += len(rhs)

    eye6 = np.eye(6)
    r6 = np.repeat(np.arange(6), 6)
    c6 = np.tile(np.arange(6), 6)
    r63 = np.repeat(np.arange(6), 3)
    c63 = np.tile(np.arange(3), 6)

    # dynamics: x_{i+1} - Phi x_i - gain_i v_i = 0
    phi = model.phi
    for i in range(1, n_t + 1):
        add_rows(np.concatenate([np.arange(6), r6, r63]),
                 np.concatenate([x_idx(i + 1), x_idx(i)[c6], v_idx(i)[c63]]),
                 np.concatenate([np.ones(6), -phi.ravel(),
                                 -model.gain[i - 1].ravel()]),
                 np.zeros(6))

    # initial state
    add_rows(np.arange(6), x_idx(1), np.ones(6), model.a * scn.roe0)

    vel_scale = np.concatenate([np.ones(3), np.full(3, 1.0 / model.n_mean)])

    if kind == ProblemKind.TPBVP:
        target = model.a * model.dock_target_roe()
        add_rows(np.arange(6), x_idx(n_t + 1), np.ones(6), target)
    else:
        psi_wp = model.psi_tilde[scn.n_wp - 1] * vel_scale[:, None]
        add_rows(r6, x_idx(scn.n_wp)[c6], psi_wp.ravel(),
                 np.concatenate([scn.dr_wp, np.zeros(3)]))
        psi_f = model.psi_tilde[n_t] * vel_scale[:, None]
        add_rows(r6, x_idx(n_t + 1)[c6], psi_f.ravel(),
                 np.concatenate([scn.dr_dp, np.zeros(3)]))

    a_eq = _csr(np.concatenate(rows), np.concatenate(cols),
                np.concatenate(data), (row0, n_vars))
    b_eq = np.concatenate(beq)

    blocks: list[tuple[sp.csr_matrix, np.ndarray]] = []

    # impulse-norm epigraphs (s_i, v_i) in SOC
    for i in range(1, n_t + 1):
        g = _csr(np.arange(4), np.concatenate([[s_idx(i)], v_idx(i)]),
                 np.ones(4), (4, n_vars))
        blocks.append((g, np.zeros(4)))

    if kind in (ProblemKind.CVX, ProblemKind.NONCONVEX):
        for i in range(scn.n_wp, n_t + 1):
            node = i - 1
            g = _csr(np.concatenate([np.zeros(6, dtype=int),
                                     np.repeat(np.arange(1, 4), 6)]),
                     np.tile(x_idx(i), 4),
                     np.concatenate([model.cone_c[node], model.cone_a[node].ravel()]),
                     (4, n_vars))
            h = np.concatenate([[model.cone_d], -scn.dr_dp])
            blocks.append((g, h))

    if kind == ProblemKind.NONCONVEX:
        if ref_states is None or zeta is None:
            raise ValueError("the linearized problem needs a reference "
                             "trajectory and a trust radius")
        ref = np.asarray(ref_states, dtype=float)
        if ref.shape != (n_t + 1, 6):
            raise ValueError("reference trajectory shape mismatch")
        ref_scaled = model.a * ref
        for i in range(1, scn.n_wp + 1):
            node = i - 1
            m_q = model.koz_quadratic(node)
            a_vec = m_q @ ref_scaled[node]
            qbar = float(ref_scaled[node] @ a_vec)
            if qbar <= 0.0:
                raise ValueError("keep-out linearization reference at the origin")
            b_val = math.sqrt(qbar)
            g = _csr(np.zeros(6, dtype=int), x_idx(i), a_vec, (2, n_vars))
            blocks.append((g, np.array([-(b_val + KOZ_MARGIN), 0.0])))
        for i in range(1, scn.n_wp + 1):
            g = _csr(np.arange(1, 7), x_idx(i), np.ones(6), (7, n_vars))
            h = np.concatenate([[zeta], -ref_scaled[i - 1]])
            blocks.append((g, h))

    c = np.zeros(n_vars)
    c[nx + nv:] = 1.0
    return ConicProgram(c=c, a_eq=a_eq, b_eq=b_eq, soc_blocks=blocks,
                        n_vars=n_vars)


def extract_trajectory(scn: Scenario, sol: SolverSolution,
                       kind: ProblemKind = ProblemKind.NONCONVEX,
                       model: ScenarioModel | None = None) -> TrajectoryRecord:
    """Recover the physical trajectory from an optimal program solution."""
    model = model or ScenarioModel(scn)
    n_t = scn.n_steps
    nx = 6 * (n_t + 1)
    states = sol.primal[:nx].reshape(n_t + 1, 6) / model.a
    controls = sol.primal[nx:nx + 3 * n_t].reshape(n_t, 3) * CONTROL_SCALE
    return TrajectoryRecord.from_states_controls(scn, states, controls, kind)


def solution_cost(traj: TrajectoryRecord) -> float:
    """Total impulse cost [m/s], recomputed from the extracted controls."""
    return traj.total_cost()
