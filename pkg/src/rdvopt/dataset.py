"""Scenario sampling, trajectory dataset generation, and serialization.

Scenarios are drawn per the simulation parameter table: the initial
relative orbit is randomized with relative eccentricity/inclination vector
phases near 90 degrees (which keeps the zero-control motion outside the
keep-out zone) and the horizon is uniform between one and three orbits.

Dataset files hold fixed-layout records (one structured-dtype element per
record) behind a small header, so reads and writes round-trip bit-exactly
and generation is reproducible regardless of worker count: record ``i`` is
a pure function of ``SeedSequence(master_seed, spawn_key=(i, attempt))``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import math
import multiprocessing
import struct
from dataclasses import dataclass

import numpy as np

from .dynamics import OrbitalElements, orbital_period
from .ocp import (ProblemKind, Scenario, ScenarioModel, TrajectoryRecord,
                  build_problem, extract_trajectory)
from .scp import ScpConfig, solve_scp
from .socp import SolverStatus, Tolerances, solve

_MAGIC = b"RVDSET01"
_VERSION = 1

KIND_CODES = {"tpbvp": 0, "rpod": 1, "rpod_cvx": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


@dataclass(frozen=True)
class SamplingRanges:
    """Meter-scaled initial-orbit sampling intervals.

    The relative eccentricity/inclination magnitudes are offsets above the
    radial/normal keep-out semi-axes, so sampled orbits clear the zone.
    """

    da_m: tuple[float, float] = (-5.0, 5.0)
    dlambda_m: tuple[float, float] = (-100.0, 100.0)
    de_offset_m: tuple[float, float] = (5.0, 30.0)
    di_offset_m: tuple[float, float] = (5.0, 30.0)
    phase_e_deg: tuple[float, float] = (85.0, 95.0)
    phase_i_deg: tuple[float, float] = (85.0, 95.0)
    horizon_orbits: tuple[float, float] = (1.0, 3.0)

    def __post_init__(self):
        for name in ("da_m", "dlambda_m", "de_offset_m", "di_offset_m",
                     "phase_e_deg", "phase_i_deg", "horizon_orbits"):
            lo, hi = getattr(self, name)
            if not (hi > lo):
                raise ValueError(f"degenerate sampling interval {name}")


def drifted_orbit_min_koz(roe_scaled: np.ndarray, base: Scenario,
                          samples: int = 720) -> float:
    """Min keep-out metric of the zero-control motion over one orbit.

    Uses the linear map rows directly; the relative semi-major axis makes
    the along-track center drift while the radial/normal projection is
    orbit-periodic.
    """
    from .dynamics import mean_motion  # local import to avoid cycle at import time

    n = mean_motion(base.oe0)
    period = orbital_period(base.oe0)
    t = np.linspace(0.0, period, samples)
    u = base.oe0.nu + n * t
    ada, adl0, adex, adey, adix, adiy = roe_scaled
    adl = adl0 - 1.5 * n * t * ada
    rr = ada - adex * np.cos(u) - adey * np.sin(u)
    rt = adl + 2.0 * adex * np.sin(u) - 2.0 * adey * np.cos(u)
    rn = adix * np.sin(u) - adiy * np.cos(u)
    kr, kt, kn = base.koz_semiaxes
    return float(np.min((rr / kr) ** 2 + (rt / kt) ** 2 + (rn / kn) ** 2))


def sample_scenario(seed, ranges: SamplingRanges, base: Scenario) -> Scenario:
    """Draw one randomized scenario; deterministic in the seed.

    ``seed`` may be an integer or a ``numpy.random.SeedSequence``.  Draws
    whose zero-control motion would graze the keep-out zone within one
    orbit are rejected and redrawn from the same stream, enforcing passive
    safety of the initial relative orbit.
    """
    rng = np.random.default_rng(seed)
    a = base.oe0.a
    for _ in range(1000):
        ada = rng.uniform(*ranges.da_m)
        adl = rng.uniform(*ranges.dlambda_m)
        ade = base.koz_semiaxes[0] + rng.uniform(*ranges.de_offset_m)
        adi = base.koz_semiaxes[2] + rng.uniform(*ranges.di_offset_m)
        phase_e = math.radians(rng.uniform(*ranges.phase_e_deg))
        phase_i = math.radians(rng.uniform(*ranges.phase_i_deg))
        horizon = rng.uniform(*ranges.horizon_orbits) * orbital_period(base.oe0)
        roe_scaled = np.array([
            ada,
            adl,
            ade * math.cos(phase_e),
            ade * math.sin(phase_e),
            adi * math.cos(phase_i),
            adi * math.sin(phase_i),
        ])
        if drifted_orbit_min_koz(roe_scaled, base) >= 1.0:
            return dataclasses.replace(base, roe0=roe_scaled / a,
                                       horizon=horizon)
    raise RuntimeError("no passively safe draw found; check sampling ranges")


# ---------------------------------------------------------------------------
# record layout


def record_dtype(n_steps: int) -> np.dtype:
    n = n_steps
    return np.dtype([
        ("oe0", "<f8", (6,)),
        ("roe0", "<f8", (6,)),
        ("horizon", "<f8"),
        ("n_wp", "<i8"),
        ("dr_wp", "<f8", (3,)),
        ("dr_dp", "<f8", (3,)),
        ("n_ac", "<f8", (3,)),
        ("gamma_ac", "<f8"),
        ("koz", "<f8", (3,)),
        ("times", "<f8", (n + 1,)),
        ("states", "<f8", (n + 1, 6)),
        ("controls", "<f8", (n, 3)),
        ("rtg", "<f8", (n,)),
        ("ctg", "<i8", (n,)),
        ("kind", "u1"),
        ("convex_cost", "<f8"),
        ("scp_cost", "<f8"),
        ("scp_iterations", "<i8"),
        ("cvx_violations", "<i8"),
        ("excluded", "u1"),
        ("seed_index", "<i8"),
    ])


def schema_hash(n_steps: int) -> bytes:
    text = f"v{_VERSION}|N{n_steps}|" + repr(record_dtype(n_steps).descr)
    return hashlib.sha256(text.encode()).digest()


def _fill_record(rec, scn: Scenario, traj: TrajectoryRecord, kind: str,
                 convex_cost: float, scp_cost: float, scp_iterations: int,
                 cvx_violations: int, excluded: bool, seed_index: int) -> None:
    rec["oe0"] = scn.oe0.as_array()
    rec["roe0"] = scn.roe0
    rec["horizon"] = scn.horizon
    rec["n_wp"] = scn.n_wp
    rec["dr_wp"] = scn.dr_wp
    rec["dr_dp"] = scn.dr_dp
    rec["n_ac"] = scn.n_ac
    rec["gamma_ac"] = scn.gamma_ac
    rec["koz"] = scn.koz_semiaxes
    rec["times"] = traj.times
    rec["states"] = traj.states
    rec["controls"] = traj.controls
    rec["rtg"] = traj.rtg
    rec["ctg"] = traj.ctg
    rec["kind"] = KIND_CODES[kind]
    rec["convex_cost"] = convex_cost
    rec["scp_cost"] = scp_cost
    rec["scp_iterations"] = scp_iterations
    rec["cvx_violations"] = cvx_violations
    rec["excluded"] = 1 if excluded else 0
    rec["seed_index"] = seed_index


@dataclass
class DatasetFile:
    """In-memory view of a dataset file (header + structured records)."""

    kind: str
    n_steps: int
    records: np.ndarray

    def __len__(self) -> int:
        return self.records.shape[0]

    def scenario(self, i: int) -> Scenario:
        r = self.records[i]
        oe = OrbitalElements(*r["oe0"].tolist())
        return Scenario(oe0=oe, roe0=r["roe0"].copy(),
                        n_steps=self.n_steps, horizon=float(r["horizon"]),
                        n_wp=int(r["n_wp"]), dr_wp=r["dr_wp"].copy(),
                        dr_dp=r["dr_dp"].copy(), n_ac=r["n_ac"].copy(),
                        gamma_ac=float(r["gamma_ac"]), koz_semiaxes=r["koz"].copy())

    def trajectory(self, i: int) -> TrajectoryRecord:
        r = self.records[i]
        return TrajectoryRecord(times=r["times"].copy(), states=r["states"].copy(),
                                controls=r["controls"].copy(), rtg=r["rtg"].copy(),
                                ctg=r["ctg"].copy())

    def write(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IBQI", _VERSION, KIND_CODES[self.kind],
                                 len(self), self.n_steps))
            fh.write(schema_hash(self.n_steps))
            fh.write(self.records.tobytes())

    @classmethod
    def read(cls, path) -> "DatasetFile":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise ValueError(f"not a dataset file: {path}")
            version, kind_code, count, n_steps = struct.unpack("<IBQI", fh.read(17))
            if version != _VERSION:
                raise ValueError(f"unsupported dataset version {version}")
            stored_hash = fh.read(32)
            if stored_hash != schema_hash(n_steps):
                raise ValueError("dataset schema hash mismatch")
            dt = record_dtype(n_steps)
            payload = fh.read(count * dt.itemsize)
            records = np.frombuffer(payload, dtype=dt, count=count).copy()
        return cls(kind=KIND_NAMES[kind_code], n_steps=n_steps, records=records)

    def split(self, fraction: float, seed: int) -> tuple["DatasetFile", "DatasetFile"]:
        """Deterministic shuffled split: (train, test), disjoint, exhaustive."""
        if len(self) == 0:
            raise ValueError("cannot split an empty dataset")
        if not (0.0 < fraction < 1.0):
            raise ValueError("split fraction must lie in (0, 1)")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_train = int(round(fraction * len(self)))
        train = self.records[np.sort(perm[:n_train])].copy()
        test = self.records[np.sort(perm[n_train:])].copy()
        return (DatasetFile(self.kind, self.n_steps, train),
                DatasetFile(self.kind, self.n_steps, test))

    def write_csv(self, path) -> None:
        """Step-by-step CSV export for inspection (one row per time step)."""
        cols = ("record,step,time_s,da,dlambda,dex,dey,dix,diy,"
                "dv_r_mps,dv_t_mps,dv_n_mps,rtg_mps,ctg\n")
        with open(path, "w") as fh:
            fh.write(cols)
            for i in range(len(self)):
                r = self.records[i]
                n = self.n_steps
                for j in range(n):
                    state = ",".join(format(v, ".17g") for v in r["states"][j])
                    ctrl = ",".join(format(v, ".17g") for v in r["controls"][j])
                    fh.write(f"{i},{j + 1},{r['times'][j]:.6f},{state},{ctrl},"
                             f"{format(r['rtg'][j], '.17g')},{r['ctg'][j]}\n")


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenerationReport:
    kind: str
    requested: int
    generated: int
    discarded_infeasible_cvx: int
    excluded_scp_infeasible: int
    convex_cost_stats: tuple[float, float, float]   # min, mean, max [m/s]
    final_cost_stats: tuple[float, float, float]
    violation_counts: dict[int, int]                # C_cvx(t1) histogram

    def render(self) -> str:
        out = io.StringIO()
        out.write(f"dataset kind:        {self.kind}\n")
        out.write(f"records requested:   {self.requested}\n")
        out.write(f"records generated:   {self.generated}\n")
        out.write(f"cvx-infeasible draws discarded: {self.discarded_infeasible_cvx}\n")
        out.write(f"scp-infeasible records excluded: {self.excluded_scp_infeasible}\n")
        cmin, cmean, cmax = self.convex_cost_stats
        out.write(f"convex cost [m/s]:   min {cmin:.6f}  mean {cmean:.6f}  max {cmax:.6f}\n")
        fmin, fmean, fmax = self.final_cost_stats
        out.write(f"final cost [m/s]:    min {fmin:.6f}  mean {fmean:.6f}  max {fmax:.6f}\n")
        out.write("constraint-to-go at t1 histogram (convex solution):\n")
        for key in sorted(self.violation_counts):
            out.write(f"  C={key}: {self.violation_counts[key]}\n")
        return out.getvalue()


_TPBVP_TOL = Tolerances(feastol=3e-9, gap_abs=1e-9, gap_rel=1e-8)
_MAX_ATTEMPTS = 20


def _generate_one(args):
    """Worker body: one record from its per-index seed stream."""
    (master_seed, index, kind, base, ranges, scp_cfg) = args
    discards = 0
    for attempt in range(_MAX_ATTEMPTS):
        seed = np.random.SeedSequence(master_seed, spawn_key=(index, attempt))
        scn = sample_scenario(seed, ranges, base)
        model = ScenarioModel(scn)
        if kind == "tpbvp":
            sol = solve(build_problem(scn, ProblemKind.TPBVP, model=model),
                        _TPBVP_TOL)
            if sol.status != SolverStatus.OPTIMAL:
                discards += 1
                continue
            traj = extract_trajectory(scn, sol, ProblemKind.TPBVP, model=model)
            cost = traj.total_cost()
            return (index, discards, 0, scn, traj, None, cost, cost, 0, 0, False)
        sol = solve(build_problem(scn, ProblemKind.CVX, model=model), _TPBVP_TOL)
        if sol.status != SolverStatus.OPTIMAL:
            discards += 1
            continue
        cvx_traj = extract_trajectory(scn, sol, ProblemKind.CVX, model=model)
        cvx_cost = cvx_traj.total_cost()
        cvx_viol = int(cvx_traj.ctg[0])
        result = solve_scp(scn, cvx_traj, scp_cfg, model=model)
        if result.trajectory is None:
            # keep the scenario; flag the record so training skips it
            return (index, discards, 1, scn, cvx_traj, cvx_traj, cvx_cost,
                    math.nan, result.iterations, cvx_viol, True)
        return (index, discards, 0, scn, result.trajectory, cvx_traj,
                cvx_cost, result.final_cost, result.iterations, cvx_viol, False)
    raise RuntimeError(f"record {index}: no feasible scenario in "
                       f"{_MAX_ATTEMPTS} attempts")


def generate_dataset(kind: str, count: int, master_seed: int, base: Scenario,
                     ranges: SamplingRanges | None = None,
                     scp_cfg: ScpConfig | None = None,
                     jobs: int = 1):
    """Generate a dataset deterministically; returns datasets and a report.

    For ``tpbvp`` returns ``(dataset, report)``.  For ``rpod`` returns
    ``(dataset, cvx_dataset, report)`` where the second file holds the
    convex-relaxation trajectories of the same scenarios (stored for
    ablations; training uses the first).
    """
    if kind not in ("tpbvp", "rpod"):
        raise ValueError("dataset kind must be 'tpbvp' or 'rpod'")
    ranges = ranges or SamplingRanges()
    scp_cfg = scp_cfg or ScpConfig()
    tasks = [(master_seed, i, kind, base, ranges, scp_cfg) for i in range(count)]
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            results = pool.map(_generate_one, tasks, chunksize=4)
    else:
        results = [_generate_one(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    dt = record_dtype(base.n_steps)
    records = np.zeros(count, dtype=dt)
    cvx_records = np.zeros(count, dtype=dt) if kind == "rpod" else None
    discards = 0
    excluded = 0
    viol_hist: dict[int, int] = {}
    for (index, disc, excl, scn, traj, cvx_traj, cvx_cost, final_cost,
         iters, cvx_viol, flag) in results:
        discards += disc
        excluded += excl
        _fill_record(records[index], scn, traj, kind, cvx_cost,
                     final_cost if math.isfinite(final_cost) else cvx_cost,
                     iters, cvx_viol, flag, index)
        if cvx_records is not None:
            _fill_record(cvx_records[index], scn, cvx_traj, "rpod_cvx",
                         cvx_cost, final_cost if math.isfinite(final_cost)
                         else cvx_cost, iters, cvx_viol, flag, index)
        viol_hist[cvx_viol] = viol_hist.get(cvx_viol, 0) + 1

    def stats(values):
        v = np.asarray(values, dtype=float)
        v = v[np.isfinite(v)]
        if v.size == 0:
            return (math.nan,) * 3
        return (float(v.min()), float(v.mean()), float(v.max()))

    report = GenerationReport(
        kind=kind, requested=count, generated=count,
        discarded_infeasible_cvx=discards, excluded_scp_infeasible=excluded,
        convex_cost_stats=stats(records["convex_cost"]),
        final_cost_stats=stats(records["scp_cost"]),
        violation_counts=viol_hist)
    ds = DatasetFile(kind=kind, n_steps=base.n_steps, records=records)
    if kind == "rpod":
        return ds, DatasetFile(kind="rpod_cvx", n_steps=base.n_steps,
                               records=cvx_records), report
    return ds, report
