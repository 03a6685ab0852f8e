"""Self-contained second-order cone program solver.

Solves programs with a linear objective, linear equalities, and
second-order cone blocks:

    minimize    c' x
    subject to  A x = b
                (G_j x + h_j) in SOC_dj   for each block j,

where ``SOC_d = {w in R^d : ||w[1:]|| <= w[0]}``.

The algorithm is a Mehrotra-style predictor-corrector primal-dual
interior-point method on the homogeneous self-dual embedding with
Nesterov-Todd scaling, so infeasibility is certified rather than timed
out.  Cone blocks whose trailing rows are structurally zero encode plain
halfspaces; they are routed through a nonnegative-orthant path internally,
which avoids the degenerate dual direction a zero SOC row would create.
Linear algebra goes through a sparse LU factorization of the
quasi-definite KKT system with one step of iterative refinement; the
factorization cost stays linear in the trajectory length for the banded
programs produced by :mod:`rdvopt.ocp`.

Duals follow the sign convention ``c - A' y - sum_j G_j' z_j = 0`` with
``z_j`` in the (self-dual) cone, so weak duality reads
``c' x - (b' y - sum_j h_j' z_j) = sum_j z_j' w_j >= 0``.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_REG = 1e-11          # static KKT regularization; removed by refinement
_STEP_BACK = 0.99     # fraction-to-boundary
_MIN_STEP = 1e-11     # stall threshold on the combined step
_RESCUE_STEP = 1e-7   # below this, retry the iteration with heavy centering


class SolverStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass(frozen=True)
class Tolerances:
    feastol: float = 1e-8     # relative primal/dual feasibility
    gap_abs: float = 1e-8
    gap_rel: float = 1e-8
    infeas_tol: float = 1e-8  # normalized certificate residual
    max_iters: int = 200


@dataclass
class ConicProgram:
    """Conic program data; matrices may be dense or ``scipy.sparse``."""

    c: np.ndarray
    a_eq: object
    b_eq: np.ndarray
    soc_blocks: list[tuple[object, np.ndarray]]
    n_vars: int

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.c.size != self.n_vars:
            raise ValueError("objective length does not match n_vars")
        self.a_eq = sp.csr_matrix(self.a_eq, dtype=float) if not sp.issparse(self.a_eq) \
            else self.a_eq.tocsr().astype(float)
        if self.a_eq.shape != (self.b_eq.size, self.n_vars):
            raise ValueError("equality system dimensions are inconsistent")
        blocks = []
        for g, h in self.soc_blocks:
            g = sp.csr_matrix(g, dtype=float) if not sp.issparse(g) else g.tocsr().astype(float)
            h = np.asarray(h, dtype=float).reshape(-1)
            if g.shape != (h.size, self.n_vars):
                raise ValueError("cone block dimensions are inconsistent")
            if h.size < 2:
                raise ValueError("cone blocks must have dimension >= 2")
            blocks.append((g, h))
        if not blocks:
            raise ValueError("at least one cone block is required")
        self.soc_blocks = blocks
        for arr in [self.c, self.b_eq, self.a_eq.data] + \
                [np.concatenate([g.data, h]) for g, h in blocks]:
            if arr.size and not np.all(np.isfinite(arr)):
                raise ValueError("program data must be finite")

    @property
    def n_eq(self) -> int:
        return self.b_eq.size

    @property
    def block_dims(self) -> list[int]:
        return [h.size for _, h in self.soc_blocks]


@dataclass
class Residuals:
    primal_feas: float
    dual_feas: float
    gap: float


@dataclass
class SolverSolution:
    status: SolverStatus
    primal: np.ndarray | None
    dual_eq: np.ndarray | None
    dual_soc: list[np.ndarray] | None
    objective: float
    dual_objective: float
    residuals: Residuals
    iterations: int
    # Farkas certificate (y, z_stacked) for PrimalInfeasible, normalized to
    # b'y + h'z = -1; primal ray x for DualInfeasible with c'x = -1.
    certificate: tuple[np.ndarray, np.ndarray] | None = None
    ray: np.ndarray | None = None


@dataclass
class KktReport:
    primal_residual: float
    dual_residual: float
    complementarity: float
    primal_cone_violation: float
    dual_cone_violation: float

    @property
    def max_residual(self) -> float:
        return max(self.primal_residual, self.dual_residual,
                   self.complementarity, self.primal_cone_violation,
                   self.dual_cone_violation)


# ---------------------------------------------------------------------------
# Cone system: a nonnegative-orthant head of dimension l followed by SOC
# blocks.  Cone variables are stored in one flat array; SOC blocks of equal
# dimension are processed together as (nb, d) matrices.


class _ConeSystem:
    def __init__(self, l: int, soc_dims: list[int]):
        self.l = l
        self.soc_dims = list(soc_dims)
        self.m = l + sum(soc_dims)
        starts = l + np.cumsum([0] + self.soc_dims[:-1]) if self.soc_dims else np.array([], dtype=int)
        self.soc_start = np.asarray(starts, dtype=int)
        self.groups = {}
        for d in sorted(set(self.soc_dims)):
            idx = [np.arange(off, off + d)
                   for off, dd in zip(self.soc_start, self.soc_dims) if dd == d]
            self.groups[d] = np.array(idx)
        self.degree = l + len(self.soc_dims)

    def identity(self) -> np.ndarray:
        e = np.zeros(self.m)
        e[:self.l] = 1.0
        if self.soc_dims:
            e[self.soc_start] = 1.0
        return e

    def min_margin(self, u: np.ndarray) -> float:
        m0 = float(np.min(u[:self.l])) if self.l else np.inf
        for d, idx in self.groups.items():
            ub = u[idx]
            m0 = min(m0, float(np.min(ub[:, 0] - np.linalg.norm(ub[:, 1:], axis=1))))
        return m0

    def push_interior(self, u: np.ndarray) -> np.ndarray:
        m0 = self.min_margin(u)
        if m0 <= 0.0:
            u = u.copy()
            shift = 1.0 - m0
            u[:self.l] += shift
            if self.soc_dims:
                u[self.soc_start] += shift
        return u

    def jprod(self, u, v) -> np.ndarray:
        out = np.empty_like(u)
        out[:self.l] = u[:self.l] * v[:self.l]
        for d, idx in self.groups.items():
            ub, vb = u[idx], v[idx]
            out[idx[:, 0]] = np.sum(ub * vb, axis=1)
            rest = ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
            out[idx[:, 1:].ravel()] = rest.ravel()
        return out

    def jsolve(self, lam, d_vec) -> np.ndarray:
        """Solve lam o x = d per block."""
        out = np.empty_like(d_vec)
        out[:self.l] = d_vec[:self.l] / lam[:self.l]
        for d, idx in self.groups.items():
            lb, db = lam[idx], d_vec[idx]
            det = lb[:, 0] ** 2 - np.sum(lb[:, 1:] ** 2, axis=1)
            x0 = (lb[:, 0] * db[:, 0] - np.sum(lb[:, 1:] * db[:, 1:], axis=1)) / det
            rest = (db[:, 1:] - x0[:, None] * lb[:, 1:]) / lb[:, :1]
            out[idx[:, 0]] = x0
            out[idx[:, 1:].ravel()] = rest.ravel()
        return out

    def step_to_boundary(self, u, du) -> float:
        """Largest alpha with u + alpha*du in the cone for all blocks."""
        alpha = np.inf
        if self.l:
            neg = du[:self.l] < 0.0
            if np.any(neg):
                alpha = float(np.min(-u[:self.l][neg] / du[:self.l][neg]))
        for d, idx in self.groups.items():
            ub, db = u[idx], du[idx]
            # roots of det(u + t du) = c2 t^2 + 2 c1 t + c0 along each block
            c2 = db[:, 0] ** 2 - np.sum(db[:, 1:] ** 2, axis=1)
            c1 = ub[:, 0] * db[:, 0] - np.sum(ub[:, 1:] * db[:, 1:], axis=1)
            c0 = np.maximum(ub[:, 0] ** 2 - np.sum(ub[:, 1:] ** 2, axis=1), 0.0)
            disc = c1 ** 2 - c2 * c0
            sq = np.sqrt(np.maximum(disc, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                qv = np.where(c1 <= 0.0, -c1 + sq, -c1 - sq)
                r1 = np.where(np.abs(c2) > 0.0, qv / c2, np.inf)
                r2 = np.where(np.abs(qv) > 0.0, c0 / qv, np.inf)
                lin = -c0 / (2.0 * c1)
            has_roots = (np.abs(c2) > 0.0) & (disc >= 0.0)
            roots = np.stack([np.where(has_roots, r1, np.inf),
                              np.where(has_roots, r2, np.inf),
                              np.where((c2 == 0.0) & (c1 < 0.0), lin, np.inf)])
            valid = np.isfinite(roots) & (roots > 0.0) & \
                (ub[None, :, 0] + roots * db[None, :, 0] >= -1e-14)
            roots = np.where(valid, roots, np.inf)
            alpha = min(alpha, float(np.min(roots)) if roots.size else np.inf)
        return float(alpha)


class _Scaling:
    """Nesterov-Todd scaling with W z = W^{-1} s = lambda."""

    def __init__(self, cones: _ConeSystem, s: np.ndarray, z: np.ndarray):
        self.cones = cones
        l = cones.l
        if l:
            sl, zl = s[:l], z[:l]
            if np.any(sl <= 0.0) or np.any(zl <= 0.0) or \
                    not (np.all(np.isfinite(sl)) and np.all(np.isfinite(zl))):
                raise FloatingPointError("orthant iterate left the interior")
            self.w_lp = np.sqrt(sl / zl)
        else:
            self.w_lp = np.empty(0)
        self.wbar = {}
        self.eta = {}
        for d, idx in cones.groups.items():
            sb, zb = s[idx], z[idx]
            det_s = sb[:, 0] ** 2 - np.sum(sb[:, 1:] ** 2, axis=1)
            det_z = zb[:, 0] ** 2 - np.sum(zb[:, 1:] ** 2, axis=1)
            if np.any(~np.isfinite(det_s)) or np.any(~np.isfinite(det_z)) or \
                    np.any(det_s <= 0.0) or np.any(det_z <= 0.0):
                raise FloatingPointError("cone iterate left the interior")
            sbar = sb / np.sqrt(det_s)[:, None]
            zbar = zb / np.sqrt(det_z)[:, None]
            gamma = np.sqrt((1.0 + np.sum(sbar * zbar, axis=1)) / 2.0)
            w = sbar.copy()
            w[:, 0] += zbar[:, 0]
            w[:, 1:] -= zbar[:, 1:]
            w /= (2.0 * gamma)[:, None]
            self.wbar[d] = w
            self.eta[d] = (det_s / det_z) ** 0.25

    @classmethod
    def unit(cls, cones: _ConeSystem) -> "_Scaling":
        obj = cls.__new__(cls)
        obj.cones = cones
        obj.w_lp = np.ones(cones.l)
        obj.wbar = {d: np.tile(np.eye(1, d, 0)[0], (idx.shape[0], 1))
                    for d, idx in cones.groups.items()}
        obj.eta = {d: np.ones(idx.shape[0]) for d, idx in cones.groups.items()}
        return obj

    def _apply(self, u: np.ndarray, inverse: bool) -> np.ndarray:
        out = np.empty_like(u)
        l = self.cones.l
        out[:l] = u[:l] / self.w_lp if inverse else u[:l] * self.w_lp
        for d, idx in self.cones.groups.items():
            w = self.wbar[d]
            eta = self.eta[d]
            ub = u[idx]
            sgn = -1.0 if inverse else 1.0
            w1u = np.sum(w[:, 1:] * ub[:, 1:], axis=1)
            r0 = w[:, 0] * ub[:, 0] + sgn * w1u
            coeff = sgn * ub[:, 0] + w1u / (1.0 + w[:, 0])
            rest = ub[:, 1:] + coeff[:, None] * w[:, 1:]
            scale = (1.0 / eta) if inverse else eta
            out[idx[:, 0]] = scale * r0
            out[idx[:, 1:].ravel()] = (scale[:, None] * rest).ravel()
        return out

    def mul(self, u: np.ndarray) -> np.ndarray:
        return self._apply(u, inverse=False)

    def inv_mul(self, u: np.ndarray) -> np.ndarray:
        return self._apply(u, inverse=True)


class _KktSystem:
    """Sparse KKT factorization with a fixed symbolic pattern.

        [ dI    A'        G'    ] [dx]
        [ A    -dI        0     ] [dy]
        [ G     0   -W^2 - dI   ] [dz]
    """

    def __init__(self, a_eq: sp.csr_matrix, g: sp.csr_matrix, cones: _ConeSystem):
        n = a_eq.shape[1]
        p = a_eq.shape[0]
        m = g.shape[0]
        self.n, self.p, self.m = n, p, m
        self.cones = cones

        a_coo = a_eq.tocoo()
        g_coo = g.tocoo()
        rows = [a_coo.row + n, a_coo.col, g_coo.row + n + p, g_coo.col,
                np.arange(n), np.arange(n, n + p)]
        cols = [a_coo.col, a_coo.row + n, g_coo.col, g_coo.row + n + p,
                np.arange(n), np.arange(n, n + p)]
        self._fixed_data = np.concatenate([
            a_coo.data, a_coo.data, g_coo.data, g_coo.data,
            np.full(n, _REG), np.full(p, -_REG)])
        reg = [np.zeros(a_coo.nnz), np.zeros(a_coo.nnz),
               np.zeros(g_coo.nnz), np.zeros(g_coo.nnz),
               np.full(n, _REG), np.full(p, -_REG)]

        # orthant part: diagonal entries
        base_lp = n + p + np.arange(cones.l)
        rows.append(base_lp)
        cols.append(base_lp)
        reg.append(np.full(cones.l, -_REG))
        # SOC part: one dense d x d tile per block
        w_rows, w_cols, w_reg = [], [], []
        for d, idx in cones.groups.items():
            base = idx + n + p
            rr = np.repeat(base, d, axis=1).reshape(idx.shape[0], d, d)
            cc = np.tile(base[:, None, :], (1, d, 1))
            w_rows.append(rr.ravel())
            w_cols.append(cc.ravel())
            diag_tile = np.zeros((d, d))
            np.fill_diagonal(diag_tile, -_REG)
            w_reg.append(np.tile(diag_tile.ravel(), idx.shape[0]))
        if w_rows:
            rows.append(np.concatenate(w_rows))
            cols.append(np.concatenate(w_cols))
            reg.append(np.concatenate(w_reg))
        self._scaling_size = cones.l + sum(
            idx.shape[0] * d * d for d, idx in cones.groups.items())

        rows_all = np.concatenate(rows)
        cols_all = np.concatenate(cols)
        self._reg_data = np.concatenate(reg)

        nnz = rows_all.size
        tagger = sp.coo_matrix((np.arange(1, nnz + 1, dtype=float),
                                (rows_all, cols_all)),
                               shape=(n + p + m,) * 2).tocsc()
        if tagger.nnz != nnz:
            raise ValueError("duplicate entries in KKT pattern")
        self._perm = tagger.data.astype(np.int64) - 1
        self._indices = tagger.indices
        self._indptr = tagger.indptr
        self._shape = (n + p + m, n + p + m)
        self._lu = None
        self._k_true = None

    def factor(self, scaling: _Scaling) -> None:
        parts = [-(scaling.w_lp ** 2)]
        for d, idx in self.cones.groups.items():
            w = scaling.wbar[d]
            eta2 = (scaling.eta[d] ** 2)[:, None, None]
            tiles = 2.0 * np.einsum("bi,bj->bij", w, w)
            diag = np.arange(d)
            jdiag = np.ones(d)
            jdiag[1:] = -1.0
            tiles[:, diag, diag] -= jdiag
            tiles *= -eta2
            parts.append(tiles.ravel())
        w_data = np.concatenate(parts) if parts else np.empty(0)
        if not np.all(np.isfinite(w_data)):
            raise FloatingPointError("non-finite scaling data")
        true_data = np.concatenate([self._fixed_data - self._reg_data[:self._fixed_data.size],
                                    w_data])
        all_data = true_data + self._reg_data
        self._k_true = sp.csc_matrix((true_data[self._perm], self._indices,
                                      self._indptr), shape=self._shape)
        k_reg = sp.csc_matrix((all_data[self._perm], self._indices,
                               self._indptr), shape=self._shape)
        self._lu = spla.splu(k_reg)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(rhs)
        # one refinement pass against the unregularized matrix
        x += self._lu.solve(rhs - self._k_true @ x)
        return x


def _max_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


# ---------------------------------------------------------------------------
# presolve: remove variables fixed by singleton equality rows (single pass)


@dataclass
class _Stacked:
    """Internal stacked view of a program: one matrix for all cone rows."""

    c: np.ndarray
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    g: sp.csr_matrix          # spec sign: (g x + h) in cone
    h: np.ndarray
    dims: list[int]


@dataclass
class _Presolved:
    stacked: _Stacked
    g_full: sp.csr_matrix     # stacked cone rows of the original program
    fixed_vals: np.ndarray
    fixed_mask: np.ndarray
    keep_rows: np.ndarray
    fix_row_of_var: dict
    offset: float
    early: SolverSolution | None = None


def _certificate_solution(prog: ConicProgram, y: np.ndarray) -> SolverSolution:
    z = np.zeros(sum(prog.block_dims))
    return SolverSolution(
        status=SolverStatus.PRIMAL_INFEASIBLE, primal=None, dual_eq=None,
        dual_soc=None, objective=np.nan, dual_objective=np.inf,
        residuals=Residuals(np.inf, 0.0, np.inf), iterations=0,
        certificate=(y, z))


def _presolve(prog: ConicProgram) -> _Presolved:
    a = prog.a_eq.tocsr()
    n, p = prog.n_vars, prog.n_eq
    dims = prog.block_dims
    g_full = sp.vstack([g for g, _ in prog.soc_blocks], format="csr")
    h_full = np.concatenate([h for _, h in prog.soc_blocks])

    nnz_per_row = np.diff(a.indptr)
    fixed_vals = np.full(n, np.nan)
    fixed_mask = np.zeros(n, dtype=bool)
    fix_row_of_var: dict[int, int] = {}
    drop_rows = np.zeros(p, dtype=bool)
    for i in np.nonzero(nnz_per_row == 1)[0]:
        j = int(a.indices[a.indptr[i]])
        coef = float(a.data[a.indptr[i]])
        if coef == 0.0:
            continue
        val = prog.b_eq[i] / coef
        if fixed_mask[j]:
            if abs(val - fixed_vals[j]) > 1e-12 * max(1.0, abs(val)):
                i0 = fix_row_of_var[j]
                coef0 = float(a[i0, j])
                y = np.zeros(p)
                y[i0], y[i] = coef, -coef0
                y /= -(prog.b_eq @ y)
                return _Presolved(None, g_full, fixed_vals, fixed_mask,
                                  ~drop_rows, fix_row_of_var, 0.0,
                                  early=_certificate_solution(prog, y))
            drop_rows[i] = True
            continue
        fixed_vals[j] = val
        fixed_mask[j] = True
        fix_row_of_var[j] = i
        drop_rows[i] = True

    if not fixed_mask.any():
        stacked = _Stacked(prog.c, a, prog.b_eq, g_full, h_full, dims)
        return _Presolved(stacked, g_full, fixed_vals, fixed_mask,
                          ~drop_rows, fix_row_of_var, 0.0)

    keep_vars = ~fixed_mask
    keep_rows = ~drop_rows
    xf = np.where(fixed_mask, fixed_vals, 0.0)
    a_keep = a[keep_rows]
    b_red = prog.b_eq[keep_rows] - a_keep @ xf
    a_red = a_keep[:, keep_vars].tocsr()
    empty = np.diff(a_red.indptr) == 0
    if empty.any():
        bad = np.abs(b_red[empty]) > 1e-9 * max(1.0, _max_norm(prog.b_eq))
        if bad.any():
            row_local = np.nonzero(empty)[0][np.nonzero(bad)[0][0]]
            i_glob = np.nonzero(keep_rows)[0][row_local]
            y = np.zeros(p)
            y[i_glob] = 1.0
            row = a.getrow(i_glob)
            for jj, coef in zip(row.indices, row.data):
                if fixed_mask[jj]:
                    rj = fix_row_of_var[jj]
                    y[rj] = -coef / float(a[rj, jj])
            y /= -(prog.b_eq @ y)
            return _Presolved(None, g_full, fixed_vals, fixed_mask, keep_rows,
                              fix_row_of_var, 0.0,
                              early=_certificate_solution(prog, y))
        keep_idx = np.nonzero(keep_rows)[0][~empty]
        keep_rows = np.zeros(p, dtype=bool)
        keep_rows[keep_idx] = True
        a_red = a[keep_rows][:, keep_vars].tocsr()
        b_red = prog.b_eq[keep_rows] - a[keep_rows] @ xf

    stacked = _Stacked(prog.c[keep_vars], a_red, b_red,
                       g_full[:, keep_vars].tocsr(), h_full + g_full @ xf,
                       dims)
    return _Presolved(stacked, g_full, fixed_vals, fixed_mask, keep_rows,
                      fix_row_of_var, float(prog.c @ xf))


def solve(prog: ConicProgram, tol: Tolerances | None = None,
          verbose: bool = False) -> SolverSolution:
    """Solve a conic program with certified optimality or infeasibility."""
    tol = tol or Tolerances()
    pre = _presolve(prog)
    if pre.early is not None:
        return pre.early
    sol = _solve_core(pre.stacked, tol, verbose=verbose)
    return _lift_solution(prog, pre, sol)


def _lift_solution(prog: ConicProgram, pre: _Presolved,
                   sol: SolverSolution) -> SolverSolution:
    if not pre.fixed_mask.any():
        return sol
    n, p = prog.n_vars, prog.n_eq
    keep_vars = ~pre.fixed_mask
    a = prog.a_eq.tocsr()

    def lift_dual_rows(y_red, z_stacked, c_term):
        y = np.zeros(p)
        y[pre.keep_rows] = y_red
        gz = pre.g_full.T @ z_stacked
        aty = prog.a_eq.T @ y
        for j, rj in pre.fix_row_of_var.items():
            coef = float(a[rj, j])
            y[rj] = (c_term[j] - aty[j] - gz[j]) / coef
        return y

    if sol.status == SolverStatus.OPTIMAL:
        x = np.where(pre.fixed_mask, pre.fixed_vals, 0.0)
        x[keep_vars] = sol.primal
        z_stacked = np.concatenate(sol.dual_soc)
        y = lift_dual_rows(sol.dual_eq, z_stacked, prog.c)
        return SolverSolution(
            status=sol.status, primal=x, dual_eq=y, dual_soc=sol.dual_soc,
            objective=sol.objective + pre.offset,
            dual_objective=sol.dual_objective + pre.offset,
            residuals=sol.residuals, iterations=sol.iterations)
    if sol.status == SolverStatus.PRIMAL_INFEASIBLE and sol.certificate is not None:
        y_red, z = sol.certificate
        # Farkas duals use the convention A'y + G'z = 0.
        y = lift_dual_rows(y_red, z, np.zeros(n))
        return SolverSolution(
            status=sol.status, primal=None, dual_eq=None, dual_soc=None,
            objective=np.nan, dual_objective=np.inf,
            residuals=sol.residuals, iterations=sol.iterations,
            certificate=(y, z))
    if sol.status == SolverStatus.DUAL_INFEASIBLE and sol.ray is not None:
        x = np.zeros(n)
        x[keep_vars] = sol.ray
        return SolverSolution(
            status=sol.status, primal=None, dual_eq=None, dual_soc=None,
            objective=-np.inf, dual_objective=np.nan,
            residuals=sol.residuals, iterations=sol.iterations, ray=x)
    if sol.primal is not None:
        x = np.where(pre.fixed_mask, pre.fixed_vals, 0.0)
        x[keep_vars] = sol.primal
        sol.primal = x
        sol.dual_eq = None
        sol.dual_soc = None
    return sol


def _solve_core(st: _Stacked, tol: Tolerances,
                verbose: bool = False) -> SolverSolution:
    n, p = st.c.size, st.b_eq.size
    dims = st.dims

    # Route halfspace-like blocks (trailing rows structurally zero) through
    # the orthant; everything else stays a second-order cone block.
    row_nnz = np.diff(st.g.indptr)
    starts = np.cumsum([0] + dims[:-1])
    is_lp = np.zeros(len(dims), dtype=bool)
    for k, (r0, d) in enumerate(zip(starts, dims)):
        if row_nnz[r0 + 1:r0 + d].sum() == 0 and not np.any(st.h[r0 + 1:r0 + d]):
            is_lp[k] = True
    lp_blocks = np.nonzero(is_lp)[0]
    soc_blocks_idx = np.nonzero(~is_lp)[0]
    l = lp_blocks.size
    soc_dims = [dims[k] for k in soc_blocks_idx]
    cones = _ConeSystem(l, soc_dims)
    m = cones.m

    # internal row order: one row per orthant block, then SOC block rows;
    # spec_row[i] is the originating row in the stacked program
    spec_row = np.concatenate(
        [starts[lp_blocks]] +
        [np.arange(starts[k], starts[k] + dims[k]) for k in soc_blocks_idx]
    ).astype(int) if len(dims) else np.empty(0, dtype=int)
    g_cat = st.g[spec_row]
    h_std = st.h[spec_row]
    g_std = (-g_cat).tocsr()
    a_eq = st.a_eq
    c = st.c
    b = st.b_eq

    kkt = _KktSystem(a_eq, g_std, cones)
    nu = cones.degree + 1

    kkt.factor(_Scaling.unit(cones))
    u = kkt.solve(np.concatenate([np.zeros(n), b, h_std]))
    x = u[:n]
    s = cones.push_interior(-u[n + p:])
    u = kkt.solve(np.concatenate([-c, np.zeros(p), np.zeros(m)]))
    y = u[n:n + p]
    z = cones.push_interior(u[n + p:])
    tau, kappa = 1.0, 1.0

    norm_b = _max_norm(b)
    norm_h = _max_norm(h_std)
    norm_c = _max_norm(c)

    best = None
    status = SolverStatus.NUMERICAL_FAILURE
    iters = 0

    for iters in range(1, tol.max_iters + 1):
        rx = a_eq.T @ y + g_std.T @ z + c * tau
        ry = -(a_eq @ x) + b * tau
        rz = s + g_std @ x - h_std * tau
        rtau = kappa + c @ x + b @ y + h_std @ z

        xt = x / tau
        st = s / tau
        yt = y / tau
        zt = z / tau
        pres = max(_max_norm(a_eq @ xt - b) / (1.0 + norm_b),
                   _max_norm(g_std @ xt + st - h_std) / (1.0 + norm_h))
        dres = _max_norm(a_eq.T @ yt + g_std.T @ zt + c) / (1.0 + norm_c)
        p_obj = float(c @ xt)
        d_obj = float(-(b @ yt + h_std @ zt))
        gap = float(st @ zt)
        relgap = gap / max(1.0, abs(p_obj))

        metric = max(pres, dres, min(gap, relgap))
        if best is None or metric < best[0]:
            best = (metric, xt.copy(), yt.copy(), zt.copy(), st.copy(),
                    Residuals(pres, dres, gap), p_obj, d_obj)
        if verbose:
            print(f"  it {iters:3d}: pres={pres:.2e} dres={dres:.2e} "
                  f"gap={gap:.2e} tau={tau:.2e} kappa={kappa:.2e} "
                  f"margins s={cones.min_margin(s):.2e} z={cones.min_margin(z):.2e}")

        if pres <= tol.feastol and dres <= tol.feastol and \
                (gap <= tol.gap_abs or relgap <= tol.gap_rel):
            status = SolverStatus.OPTIMAL
            break

        by_hz = float(b @ y + h_std @ z)
        if by_hz < 0.0:
            pinf = _max_norm(a_eq.T @ y + g_std.T @ z) / (-by_hz)
            if pinf <= tol.infeas_tol * max(1.0, norm_c):
                status = SolverStatus.PRIMAL_INFEASIBLE
                break
        cx = float(c @ x)
        if cx < 0.0:
            dinf = max(_max_norm(a_eq @ x), _max_norm(g_std @ x + s)) / (-cx)
            if dinf <= tol.infeas_tol * max(1.0, norm_b, norm_h):
                status = SolverStatus.DUAL_INFEASIBLE
                break

        mu = (float(s @ z) + tau * kappa) / nu

        try:
            scaling = _Scaling(cones, s, z)
            kkt.factor(scaling)
        except (FloatingPointError, RuntimeError):
            status = SolverStatus.NUMERICAL_FAILURE
            break
        lam = scaling.mul(z)
        lam_sq = cones.jprod(lam, lam)

        u1 = kkt.solve(np.concatenate([-c, b, h_std]))
        psi1 = float(c @ u1[:n] + b @ u1[n:n + p] + h_std @ u1[n + p:])

        def direction(sigma, corr_sz, corr_tk):
            beta = 1.0 - sigma
            dsc_rhs = sigma * mu * cones.identity() - lam_sq
            if corr_sz is not None:
                dsc_rhs = dsc_rhs - corr_sz
            dsc = cones.jsolve(lam, dsc_rhs)
            dkc = sigma * mu - tau * kappa - corr_tk
            rhs = np.concatenate([-beta * rx, beta * ry,
                                  -beta * rz - scaling.mul(dsc)])
            u2 = kkt.solve(rhs)
            psi2 = float(c @ u2[:n] + b @ u2[n:n + p] + h_std @ u2[n + p:])
            dtau_ = (-beta * rtau - dkc / tau - psi2) / (psi1 - kappa / tau)
            dxyz = u2 + dtau_ * u1
            dz_ = dxyz[n + p:]
            # recover ds from the slack equation rather than through W twice;
            # this keeps the cone residual contracting cleanly at endgame
            ds_ = -beta * rz - g_std @ dxyz[:n] + h_std * dtau_
            dkap_ = (dkc - kappa * dtau_) / tau
            return dxyz[:n], dxyz[n:n + p], dz_, ds_, dtau_, dkap_

        dx_a, dy_a, dz_a, ds_a, dtau_a, dkap_a = direction(0.0, None, 0.0)
        alpha_a = min(cones.step_to_boundary(s, ds_a),
                      cones.step_to_boundary(z, dz_a))
        if dtau_a < 0.0:
            alpha_a = min(alpha_a, -tau / dtau_a)
        if dkap_a < 0.0:
            alpha_a = min(alpha_a, -kappa / dkap_a)
        alpha_a = min(alpha_a, 1.0)
        mu_aff = (float((s + alpha_a * ds_a) @ (z + alpha_a * dz_a))
                  + (tau + alpha_a * dtau_a) * (kappa + alpha_a * dkap_a)) / nu
        sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3

        corr = cones.jprod(scaling.inv_mul(ds_a), scaling.mul(dz_a))
        dx, dy, dz, ds, dtau, dkap = direction(sigma, corr, dtau_a * dkap_a)

        def bounded_step(ds_, dz_, dtau_, dkap_):
            a_ = min(cones.step_to_boundary(s, ds_),
                     cones.step_to_boundary(z, dz_))
            if dtau_ < 0.0:
                a_ = min(a_, -tau / dtau_)
            if dkap_ < 0.0:
                a_ = min(a_, -kappa / dkap_)
            return min(_STEP_BACK * a_, 1.0)

        alpha = bounded_step(ds, dz, dtau, dkap)
        if alpha <= _RESCUE_STEP:
            # boundary crash: fall back to a heavily centered step
            dx, dy, dz, ds, dtau, dkap = direction(0.9, corr, dtau_a * dkap_a)
            alpha = bounded_step(ds, dz, dtau, dkap)
        if not np.isfinite(alpha) or alpha <= _MIN_STEP:
            status = SolverStatus.NUMERICAL_FAILURE
            break

        x += alpha * dx
        y += alpha * dy
        z += alpha * dz
        s += alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkap

    def unshuffle(z_int: np.ndarray) -> list[np.ndarray]:
        """Map internal (orthant + SOC) duals back to the original blocks."""
        z_spec = np.zeros(sum(dims))
        z_spec[spec_row] = z_int
        return np.split(z_spec, np.cumsum(dims)[:-1])

    if status == SolverStatus.OPTIMAL:
        _, xt, yt, zt, st, res, p_obj, d_obj = best
        return SolverSolution(status=status, primal=xt, dual_eq=-yt,
                              dual_soc=unshuffle(zt), objective=p_obj,
                              dual_objective=d_obj, residuals=res,
                              iterations=iters)
    if status == SolverStatus.PRIMAL_INFEASIBLE:
        scale = -(float(b @ y + h_std @ z))
        res = Residuals(np.inf, 0.0, np.inf)
        return SolverSolution(status=status, primal=None, dual_eq=None,
                              dual_soc=None, objective=np.nan,
                              dual_objective=np.inf, residuals=res,
                              iterations=iters,
                              certificate=(-y / scale,
                                           np.concatenate(unshuffle(z / scale))))
    if status == SolverStatus.DUAL_INFEASIBLE:
        ray = x / (-(float(c @ x)))
        res = Residuals(0.0, np.inf, np.inf)
        return SolverSolution(status=status, primal=None, dual_eq=None,
                              dual_soc=None, objective=-np.inf,
                              dual_objective=np.nan, residuals=res,
                              iterations=iters, ray=ray)
    metric, xt, yt, zt, st, res, p_obj, d_obj = best
    return SolverSolution(status=SolverStatus.NUMERICAL_FAILURE, primal=xt,
                          dual_eq=-yt, dual_soc=unshuffle(zt),
                          objective=p_obj, dual_objective=d_obj,
                          residuals=res, iterations=iters)


def verify_kkt(prog: ConicProgram, sol: SolverSolution) -> KktReport:
    """Recompute optimality residuals from scratch (no solver internals)."""
    if sol.status != SolverStatus.OPTIMAL:
        raise ValueError("verify_kkt requires an Optimal solution")
    x, y = sol.primal, sol.dual_eq
    z_list = sol.dual_soc
    primal_eq = _max_norm(prog.a_eq @ x - prog.b_eq) / (1.0 + _max_norm(prog.b_eq))
    dual_vec = prog.c - prog.a_eq.T @ y
    comp = 0.0
    cone_p = 0.0
    cone_d = 0.0
    for (g, h), z in zip(prog.soc_blocks, z_list):
        w = g @ x + h
        dual_vec -= g.T @ z
        comp += float(z @ w)
        cone_p = max(cone_p, np.linalg.norm(w[1:]) - w[0])
        cone_d = max(cone_d, np.linalg.norm(z[1:]) - z[0])
    dual_res = _max_norm(dual_vec) / (1.0 + _max_norm(prog.c))
    comp_rel = abs(comp) / max(1.0, abs(prog.c @ x))
    return KktReport(primal_residual=primal_eq, dual_residual=dual_res,
                     complementarity=comp_rel,
                     primal_cone_violation=max(0.0, cone_p),
                     dual_cone_violation=max(0.0, cone_d))


def verify_infeasibility_certificate(prog: ConicProgram,
                                     sol: SolverSolution) -> float:
    """Normalized Farkas-certificate residual; small means valid."""
    if sol.status != SolverStatus.PRIMAL_INFEASIBLE or sol.certificate is None:
        raise ValueError("solution carries no primal infeasibility certificate")
    y, z = sol.certificate
    vec = prog.a_eq.T @ y
    pos = 0
    cone_d = 0.0
    hz = 0.0
    for g, h in prog.soc_blocks:
        d = h.size
        zb = z[pos:pos + d]
        vec = vec + g.T @ zb
        cone_d = max(cone_d, np.linalg.norm(zb[1:]) - zb[0])
        hz += float(h @ zb)
        pos += d
    by_hz = float(prog.b_eq @ y) + hz
    # convention: certificate satisfies A'y + G'z = 0, z in K, b'y + h'z = -1
    return max(_max_norm(vec), max(0.0, cone_d), abs(by_hz + 1.0))


# ---------------------------------------------------------------------------
# plain-text dump/load, for bug reports and golden tests


def dump_text(prog: ConicProgram) -> str:
    """Serialize a program; decimal floats with round-trip precision."""
    out = io.StringIO()
    dims = prog.block_dims
    out.write(f"{prog.n_vars} {prog.n_eq} {len(dims)} "
              + " ".join(str(d) for d in dims) + "\n")

    def emit(arr):
        a = np.asarray(arr.todense() if sp.issparse(arr) else arr, dtype=float)
        out.write(" ".join(format(v, ".17g") for v in a.ravel()) + "\n")

    emit(prog.c)
    emit(prog.a_eq)
    emit(prog.b_eq)
    for g, h in prog.soc_blocks:
        emit(g)
        emit(h)
    return out.getvalue()


def load_text(text: str) -> ConicProgram:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    header = lines[0].split()
    n, p, k = int(header[0]), int(header[1]), int(header[2])
    dims = [int(v) for v in header[3:3 + k]]
    vals = [np.fromstring(ln, sep=" ") for ln in lines[1:]]
    c = vals[0]
    a_eq = vals[1].reshape(p, n)
    b_eq = vals[2]
    blocks = []
    pos = 3
    for d in dims:
        blocks.append((vals[pos].reshape(d, n), vals[pos + 1]))
        pos += 2
    return ConicProgram(c=c, a_eq=a_eq, b_eq=b_eq, soc_blocks=blocks, n_vars=n)
