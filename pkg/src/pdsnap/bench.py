"""Global-step timing and trajectory comparison.

Only the global solve is timed: the sparse back-substitution for the full
model, the r.h.s. projection plus ``k x k`` solve for the reduced one.  Per
frame the solve times of all alternations are summed; the first
``warmup`` frames are discarded and the median of the rest is reported.
"""

from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .mesh import lumped_mass_matrix
from .reduced import initial_reduced_state, reduce_system, reduced_step
from .solver import (
    DivergenceError, SolverConfig, assemble_global, build_constraints, initial_state, step,
)

__all__ = [
    "BenchRow",
    "BenchReport",
    "CSV_HEADER",
    "WIDE_COLUMNS",
    "compare_trajectories",
    "run_full",
    "run_reduced",
    "run_bench",
    "null_probe",
]

CSV_VERSION = 1
CSV_HEADER = ("basis", "kind", "fullGlobal_ms", "redGlobal_ms", "global_relative",
              "traj_relerr", "stable", "flags")
WIDE_COLUMNS = {"pca": "podPosGlobal_relative", "splocs": "splocsPosGlobal_relative",
                "external": "lbsPosGlobal_relative"}
WARMUP = 5
MIN_MEASURED = 20
NOISY_RATIO = 0.5


def compare_trajectories(a, b):
    """Errors of trajectory ``b`` against reference ``a`` (both (F, n, 3)).

    Returns a dict with ``per_frame`` relative L2 errors, their ``max`` and
    the relative Frobenius error over the whole trajectory.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    diff = (a - b).reshape(len(a), -1)
    ref = a.reshape(len(a), -1)
    ref_norm = np.linalg.norm(ref, axis=1)
    per_frame = np.linalg.norm(diff, axis=1) / np.where(ref_norm > 0, ref_norm, 1.0)
    total = np.linalg.norm(ref)
    return {
        "per_frame": per_frame,
        "max": float(per_frame.max()) if len(per_frame) else 0.0,
        "frobenius": float(np.linalg.norm(diff) / total) if total > 0 else 0.0,
    }


def null_probe(runs=1001):
    """Median ns reported for an empty timed region."""
    samples = np.empty(runs)
    for i in range(runs):
        t0 = time.perf_counter_ns()
        samples[i] = time.perf_counter_ns() - t0
    return float(np.median(samples))


def _frame_stats(frame_ns, warmup):
    measured = np.asarray(frame_ns[warmup:], float) / 1e6
    med = float(np.median(measured))
    noisy = bool(measured.std() > NOISY_RATIO * med)
    return med, noisy


def run_full(mesh, config: SolverConfig, frames, constraints=None, mass=None):
    """Full run of ``frames`` steps; returns (positions (frames+1, n, 3),
    per-frame global-solve ns)."""
    constraints = constraints if constraints is not None else build_constraints(mesh, config)
    mass = mass if mass is not None else lumped_mass_matrix(mesh, config.density)
    system = assemble_global(mesh, mass, constraints, config.dt)
    state = initial_state(mesh, config)
    traj = [state.q]
    frame_ns = []
    for _ in range(frames):
        t = []
        state = step(state, system, constraints, config, timings=t)
        traj.append(state.q)
        frame_ns.append(sum(t))
    return np.array(traj), frame_ns, system


def run_reduced(mesh, config: SolverConfig, basis, frames, system, constraints,
                residuals=None):
    """Reduced run from the projected initial state.  Raises
    :class:`DivergenceError` on NaN."""
    rsys = reduce_system(system, basis)
    st0 = initial_state(mesh, config)
    state = initial_reduced_state(rsys, st0.q, st0.v)
    traj = [state.q]
    frame_ns = []
    for _ in range(frames):
        t = []
        state = reduced_step(state, rsys, constraints, config, timings=t, residuals=residuals)
        traj.append(state.q)
        frame_ns.append(sum(t))
    return np.array(traj), frame_ns


@dataclass
class BenchRow:
    basis: int
    kind: str
    fullGlobal_ms: float
    redGlobal_ms: float
    global_relative: float
    traj_relerr: float
    stable: bool
    flags: str = ""

    def as_csv(self):
        return [str(self.basis), self.kind, repr(self.fullGlobal_ms), repr(self.redGlobal_ms),
                repr(self.global_relative), repr(self.traj_relerr), str(int(self.stable)),
                self.flags]


@dataclass
class BenchReport:
    rows: list
    metadata: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow(r.as_csv())
        meta = dict(self.metadata, csv_version=CSV_VERSION, header=list(CSV_HEADER))
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_wide_csv(self, path):
        """One row per basis size, one ``*PosGlobal_relative`` column per kind."""
        kinds = [k for k in WIDE_COLUMNS if any(r.kind == k for r in self.rows)]
        sizes = sorted({r.basis for r in self.rows})
        table = {(r.basis, r.kind): r.global_relative for r in self.rows}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["basis"] + [WIDE_COLUMNS[k] for k in kinds])
            for k in sizes:
                w.writerow([k] + [repr(table[(k, kind)]) if (k, kind) in table else "" for kind in kinds])

    def relative(self, kind):
        """``{k: global_relative}`` for one basis kind."""
        return {r.basis: r.global_relative for r in self.rows if r.kind == kind}


def run_bench(mesh, config: SolverConfig, bases, sizes, frames=25, warmup=WARMUP, log=None):
    """Time full vs reduced global steps for every basis truncated to each size.

    ``bases`` is a sequence of :class:`~pdsnap.bases.Basis`; sizes larger than
    a basis are skipped.
    """
    bases = list(bases)
    if not bases:
        raise ValueError("need at least one basis")
    if frames - warmup < MIN_MEASURED:
        raise ValueError(f"need at least {warmup + MIN_MEASURED} frames for timing")
    constraints = build_constraints(mesh, config)
    mass = lumped_mass_matrix(mesh, config.density)
    full, full_ns, system = run_full(mesh, config, frames, constraints, mass)
    full_ms, full_noisy = _frame_stats(full_ns, warmup)
    rows = []
    for basis in bases:
        for k in sizes:
            if k > basis.k:
                continue
            b = basis.truncate(k)
            flags = []
            try:
                traj, red_ns = run_reduced(mesh, config, b, frames, system, constraints)
            except DivergenceError:
                rows.append(BenchRow(k, basis.kind, full_ms, float("nan"), float("nan"),
                                     float("nan"), False, "diverged"))
                continue
            red_ms, red_noisy = _frame_stats(red_ns, warmup)
            if full_noisy or red_noisy:
                flags.append("noisy")
            err = compare_trajectories(full, traj)["frobenius"]
            row = BenchRow(k, basis.kind, full_ms, red_ms, red_ms / full_ms, err, True,
                           ";".join(flags))
            rows.append(row)
            if log is not None:
                log(f"{basis.kind:>8} k={k:<4d} full {full_ms:.4f} ms  reduced {red_ms:.4f} ms  "
                    f"relative {row.global_relative:.4f}  traj err {err:.3e}")
    meta = {
        "machine": platform.machine(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "solver_backend": system.backend,
        "config_hash": config.config_hash(),
        "n_vertices": mesh.n_vertices,
        "frames": frames,
        "warmup": warmup,
    }
    return BenchReport(rows, meta)
