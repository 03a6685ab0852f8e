"""Sequential convex programming loop for the keep-out-zone problem.

Each iteration linearizes the keep-out-zone constraint around the current
reference trajectory, adds a second-order-cone trust region, solves the
convex subproblem, and shrinks the trust radius by a fixed exponential
factor.  The loop stops on

    (k = K)  or  (zeta_k <= zeta_K  and  J_{k-1} - J_k < J_tol),

evaluated literally; with the nominal configuration (zeta shrinking from
200 m to 1 m over K = 20) the radius first reaches its floor after the
final iteration, so termination is always by the iteration cap and the
``Converged``/``MaxIters`` distinction is carried by the cost clause.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import OrbitalElements, RoeState, psi_map
from .ocp import (KozEllipsoid, ProblemKind, Scenario, ScenarioModel,
                  TrajectoryRecord, build_problem, extract_trajectory)
from .socp import SolverStatus, Tolerances, solve

# Subproblem solves run tighter than the general default so that returned
# trajectories meet the meter-scale equality and keep-out residual checks.
SCP_SOLVER_TOL = Tolerances(feastol=3e-9, gap_abs=1e-9, gap_rel=1e-8)


@dataclass(frozen=True)
class ScpConfig:
    max_iters: int = 20        # K
    zeta_init: float = 200.0   # [m]
    zeta_final: float = 1.0    # [m]
    cost_tol: float = 1e-6     # [m/s]

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("at least one iteration is required")
        if not (self.zeta_init >= self.zeta_final > 0.0):
            raise ValueError("trust radii must satisfy zeta_init >= zeta_final > 0")
        if self.cost_tol <= 0.0:
            raise ValueError("cost tolerance must be positive")


@dataclass
class ScpResult:
    trajectory: TrajectoryRecord | None
    iterations: int
    cost_history: np.ndarray        # J_k [m/s], NaN for infeasible iterations
    status: str                     # Converged | MaxIters | Infeasible
    per_iteration_times: np.ndarray
    zeta_history: np.ndarray
    solver_statuses: list[str]

    @property
    def final_cost(self) -> float:
        finite = self.cost_history[np.isfinite(self.cost_history)]
        return float(finite[-1]) if finite.size else math.nan


def linearize_koz(ref_state: RoeState | np.ndarray, oe: OrbitalElements,
                  koz: KozEllipsoid) -> tuple[np.ndarray, float]:
    """Halfspace ``a' roe >= b`` that implies the quadratic keep-out bound.

    The row is the gradient of the keep-out quadratic at the reference and
    the offset its square root, so any point satisfying the halfspace has
    keep-out value at least one (Cauchy-Schwarz on the induced inner
    product).
    """
    roe = ref_state.as_array() if isinstance(ref_state, RoeState) else \
        np.asarray(ref_state, dtype=float).reshape(6)
    psi = psi_map(oe)
    e_psi = koz.scaling_selector @ psi
    m_q = e_psi.T @ e_psi
    a_vec = m_q @ roe
    qbar = float(roe @ a_vec)
    if qbar <= 0.0:
        raise ValueError("linearization reference sits at the target origin")
    return a_vec, math.sqrt(qbar)


def shrink(zeta_k: float, cfg: ScpConfig) -> float:
    """One exponential trust-region update."""
    if zeta_k <= 0.0:
        raise ValueError("trust radius must be positive")
    return (cfg.zeta_final / cfg.zeta_init) ** (1.0 / cfg.max_iters) * zeta_k


def should_stop(k: int, zeta_k: float, costs, cfg: ScpConfig) -> bool:
    """Literal stopping rule; the cost clause needs two finite entries."""
    if k >= cfg.max_iters:
        return True
    if zeta_k > cfg.zeta_final:
        return False
    if len(costs) < 2:
        return False
    decrease = costs[-2] - costs[-1]
    return bool(decrease < cfg.cost_tol)  # False when either entry is NaN


def solve_scp(scn: Scenario, warm_start: TrajectoryRecord, cfg: ScpConfig,
              solver_tol: Tolerances = SCP_SOLVER_TOL,
              model: ScenarioModel | None = None) -> ScpResult:
    """Run the full SCP from a warm-start reference trajectory.

    The warm start contributes only its state history (the first
    linearization reference); its controls are re-optimized.  The result is
    ``Infeasible`` only when no iteration produced a feasible subproblem
    solution, matching the benchmark's notion of an unsolvable instance.
    """
    model = model or ScenarioModel(scn)
    states = np.asarray(warm_start.states, dtype=float)
    if states.shape != (scn.n_steps + 1, 6):
        raise ValueError("warm start does not match the scenario grid")

    ref = states
    zeta = cfg.zeta_init
    costs: list[float] = []
    zetas: list[float] = []
    times: list[float] = []
    statuses: list[str] = []
    feasible: TrajectoryRecord | None = None

    k = 0
    while True:
        k += 1
        zetas.append(zeta)
        t0 = time.perf_counter()
        prog = build_problem(scn, ProblemKind.NONCONVEX, ref_states=ref,
                             zeta=zeta, model=model)
        sol = solve(prog, solver_tol)
        times.append(time.perf_counter() - t0)
        statuses.append(sol.status.value)
        if sol.status == SolverStatus.OPTIMAL:
            traj = extract_trajectory(scn, sol, ProblemKind.NONCONVEX, model=model)
            costs.append(traj.total_cost())
            ref = traj.states
            feasible = traj
        else:
            costs.append(math.nan)
        if should_stop(k, zeta, costs, cfg):
            break
        zeta = shrink(zeta, cfg)

    if feasible is None:
        status = "Infeasible"
    elif len(costs) >= 2 and math.isfinite(costs[-2]) and math.isfinite(costs[-1]) \
            and (costs[-2] - costs[-1]) < cfg.cost_tol:
        status = "Converged"
    else:
        status = "MaxIters"

    return ScpResult(trajectory=feasible, iterations=k,
                     cost_history=np.array(costs),
                     status=status,
                     per_iteration_times=np.array(times),
                     zeta_history=np.array(zetas),
                     solver_statuses=statuses)


def write_result_csv(result: ScpResult, path) -> None:
    """One row per SCP iteration: k, zeta, cost, solver status, wall time."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "zeta_m", "cost_mps", "solver_status", "wall_time_s"])
        for k in range(result.iterations):
            writer.writerow([k + 1,
                             format(result.zeta_history[k], ".17g"),
                             format(result.cost_history[k], ".17g"),
                             result.solver_statuses[k],
                             format(result.per_iteration_times[k], ".6f")])
