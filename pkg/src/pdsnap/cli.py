"""Command line front end: ``pdsnap <command> [options]``.

Exit codes: 0 success, 1 runtime failure (divergence, degenerate basis),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import glob
import os
import random
import sys
import time
import warnings

import numpy as np

from . import bases as bases_mod
from . import snapshots as snaps
from .bench import compare_trajectories, run_bench
from .mesh import MeshFormatError, MeshValidationError, export_frame, load_mesh, lumped_mass_matrix
from .reduced import (
    IllConditionedBasisError, initial_reduced_state, reduce_system, reduced_step,
)
from .solver import (
    ConfigError, DivergenceError, SolverConfig, assemble_global, build_constraints,
    initial_state, load_config, objective, step,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@contextlib.contextmanager
def _no_rng(active):
    """Make every common RNG entry point raise while active."""
    if not active:
        yield
        return

    def forbidden(*_a, **_k):
        raise RuntimeError("--seedless: random number generation was requested")

    targets = [(np.random, name) for name in ("default_rng", "seed", "rand", "randn", "random",
                                               "normal", "uniform", "RandomState")]
    targets += [(random, name) for name in ("random", "seed", "uniform", "randint", "shuffle")]
    saved = [(mod, name, getattr(mod, name)) for mod, name in targets]
    try:
        for mod, name, _ in saved:
            setattr(mod, name, forbidden)
        yield
    finally:
        for mod, name, fn in saved:
            setattr(mod, name, fn)


def _config(args):
    cfg = load_config(args.config) if args.config else SolverConfig()
    if args.allow_unconstrained:
        from dataclasses import replace

        cfg = replace(cfg, constraints=replace(cfg.constraints, allow_unconstrained=True))
    if getattr(args, "frames", None) is not None:
        from dataclasses import replace

        cfg = replace(cfg, frames=args.frames)
    return cfg


def _mesh(path):
    if path is None:
        raise UsageError("--mesh is required")
    base, ext = os.path.splitext(path)
    probe = base + ".node" if ext in (".node", ".ele") else path
    if not os.path.exists(probe):
        raise UsageError(f"mesh not found: {path}")
    return load_mesh(path)


def _out_dir(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _frame_path(out, i, fmt):
    return os.path.join(out, f"frame_{i:05d}.{fmt}")


def cmd_simulate(args):
    cfg = _config(args)
    mesh = _mesh(args.mesh)
    out = _out_dir(args, "run_full")
    constraints = build_constraints(mesh, cfg)
    mass = lumped_mass_matrix(mesh, cfg.density)
    system = assemble_global(mesh, mass, constraints, cfg.dt)
    state = initial_state(mesh, cfg)
    rows = []
    t_start = time.perf_counter()
    for i in range(cfg.frames):
        t0 = time.perf_counter()
        obj = float("nan")
        if i:
            trace = []
            state = step(state, system, constraints, cfg, trace=trace)
            obj = trace[-1]
        wall = (time.perf_counter() - t0) * 1e3
        if i % cfg.stride == 0:
            export_frame(mesh, state.q, _frame_path(out, i, args.format), args.format)
        rows.append((i, obj, wall))
        if args.verbose and i:
            print(f"frame {i:5d}  objective {obj:.10e}  {wall:.2f} ms")
    _write_rows(os.path.join(out, "summary.csv"), ("frame", "objective", "wall_ms"), rows)
    total = time.perf_counter() - t_start
    print(f"simulated {cfg.frames} frames ({mesh.n_vertices} vertices, backend "
          f"{system.backend}) in {total:.3f} s; frames written to {out}")
    return EXIT_OK


def cmd_snapshot(args):
    cfg = _config(args)
    mesh = _mesh(args.mesh)
    stride = args.stride or cfg.stride
    if args.strict_stride and stride > cfg.frames:
        raise UsageError(f"stride {stride} exceeds the frame count {cfg.frames}")
    s = snaps.record(mesh, cfg, frames=cfg.frames, stride=stride)
    s = snaps.mass_weight(snaps.center(s), lumped_mass_matrix(mesh, cfg.density))
    path = args.archive or os.path.join(_out_dir(args, "."), "snapshots.pdss")
    snaps.save(s, path)
    print(f"n={s.n} T={s.T} norm={s.norm:.10e} -> {path}")
    return EXIT_OK


def cmd_basis(args):
    cfg = _config(args)
    mesh = _mesh(args.mesh)
    s = snaps.load(args.archive)
    mass = lumped_mass_matrix(mesh, cfg.density)
    if not (s.centered and s.mass_weighted):
        s = snaps.mass_weight(s if s.centered else snaps.center(s), mass)
    degenerate = False
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            if args.kind == "pca":
                b = bases_mod.build_pca_basis(s, args.K, args.d_min, args.d_max, mass, mesh)
            else:
                b = bases_mod.build_splocs_basis(
                    s, args.K, args.d_min, args.d_max, args.lam, mass, mesh,
                    rho=args.rho, iters=args.admm_iters, outer=args.outer,
                )
        except bases_mod.DegenerateBasisError as exc:
            degenerate = str(exc)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if degenerate:
        print(f"warning: degenerate basis ({degenerate}); nothing saved", file=sys.stderr)
        return EXIT_RUNTIME
    norms = b.residual_norms
    print(f"initial        residual {norms[0]:.10e}")
    for i, r in enumerate(norms[1:], start=1):
        print(f"component {i:4d} residual {r:.10e}")
    path = args.output or os.path.join(_out_dir(args, "."), f"{args.kind}.pdba")
    bases_mod.save_basis(b, path)
    flags = ",".join(b.warnings) or "none"
    print(f"saved {b.kind} basis k={b.k} (n={b.n}, warnings: {flags}) -> {path}")
    return EXIT_OK


def cmd_reduce(args):
    cfg = _config(args)
    mesh = _mesh(args.mesh)
    basis = bases_mod.load_basis(args.basis)
    if basis.n != mesh.n_vertices:
        raise UsageError(f"basis has {basis.n} rows but the mesh has {mesh.n_vertices} vertices")
    out = _out_dir(args, "run_reduced")
    constraints = build_constraints(mesh, cfg)
    mass = lumped_mass_matrix(mesh, cfg.density)
    system = assemble_global(mesh, mass, constraints, cfg.dt)
    rsys = reduce_system(system, basis)
    st0 = initial_state(mesh, cfg)
    state = initial_reduced_state(rsys, st0.q, st0.v)
    rows = []
    stable = True
    for i in range(cfg.frames):
        res = []
        if i:
            try:
                state = reduced_step(state, rsys, constraints, cfg, residuals=res)
            except DivergenceError as exc:
                print(f"diverged: {exc}", file=sys.stderr)
                stable = False
                break
        if i % cfg.stride == 0:
            export_frame(mesh, state.q, _frame_path(out, i, args.format), args.format)
        rows.append((i, max(res) if res else 0.0))
    _write_rows(os.path.join(out, "summary.csv"), ("frame", "reduced_residual"), rows)
    worst = max(r for _, r in rows) if rows else 0.0
    print(f"reduced run k={basis.k}: {len(rows)} frames, max solve residual {worst:.3e}, "
          f"stable={str(stable).lower()}")
    return EXIT_OK if stable else EXIT_RUNTIME


def cmd_bench(args):
    cfg = _config(args)
    mesh = _mesh(args.mesh)
    if not args.basis:
        raise UsageError("bench needs at least one --basis archive")
    loaded = [bases_mod.load_basis(p) for p in args.basis]
    for p, b in zip(args.basis, loaded):
        if b.n != mesh.n_vertices:
            raise UsageError(f"{p}: basis has {b.n} rows, mesh has {mesh.n_vertices} vertices")
    out = _out_dir(args, ".")
    report = run_bench(mesh, cfg, loaded, args.sizes, frames=args.bench_frames, log=print)
    path = os.path.join(out, "bench.csv")
    report.write_csv(path)
    report.write_wide_csv(os.path.join(out, "bench_wide.csv"))
    print(f"wrote {len(report.rows)} rows -> {path}")
    return EXIT_OK


def _load_run(path):
    files = sorted(glob.glob(os.path.join(path, "frame_*.obj"))) or sorted(
        glob.glob(os.path.join(path, "frame_*.ply")))
    if not files:
        raise UsageError(f"no frame files in {path}")
    return np.array([load_mesh(f).vertices for f in files])


def cmd_compare(args):
    a, b = _load_run(args.run_a), _load_run(args.run_b)
    if a.shape != b.shape:
        raise UsageError(f"runs differ in shape: {a.shape} vs {b.shape}")
    rep = compare_trajectories(a, b)
    print(f"frames={len(a)} max_rel={rep['max']:.6e} frobenius_rel={rep['frobenius']:.6e}")
    if args.csv:
        _write_rows(args.csv, ("frame", "relative_l2"), list(enumerate(rep["per_frame"])))
    return EXIT_OK


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _common_flags(suppress):
    # the copy attached to subcommands must not overwrite values given before them
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="solver config (JSON)", **kw)
    common.add_argument("--out", help="output directory", **kw)
    common.add_argument("--seedless", action="store_true",
                        help="fail if anything asks for random numbers", **kw)
    common.add_argument("--allow-unconstrained", action="store_true",
                        help="permit an empty constraint set", **kw)
    return common


def build_parser():
    p = argparse.ArgumentParser(prog="pdsnap", parents=[_common_flags(False)],
                                description="Projective dynamics with snapshot bases.")
    common = _common_flags(True)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="full-order run")
    s.add_argument("--mesh")
    s.add_argument("--frames", type=int)
    s.add_argument("--format", choices=("obj", "ply"), default="obj")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("snapshot", parents=[common], help="record a snapshot archive")
    s.add_argument("--mesh")
    s.add_argument("--frames", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--archive", help="output archive path")
    s.add_argument("--strict-stride", action="store_true",
                   help="reject stride > frames instead of keeping frame 0 only")
    s.set_defaults(func=cmd_snapshot)

    s = sub.add_parser("basis", parents=[common], help="build a PCA or SPLOCS basis")
    s.add_argument("--archive", required=True)
    s.add_argument("--mesh")
    s.add_argument("--kind", choices=("pca", "splocs"), default="pca")
    s.add_argument("-K", "--K", type=int, default=20)
    s.add_argument("--d-min", type=float, default=2.0, help="support radius (edge lengths)")
    s.add_argument("--d-max", type=float, default=6.0, help="support cutoff (edge lengths)")
    s.add_argument("--lam", type=float, default=0.1, help="SPLOCS sparsity strength")
    s.add_argument("--rho", type=float, default=10.0)
    s.add_argument("--admm-iters", type=int, default=100)
    s.add_argument("--outer", type=int, default=5)
    s.add_argument("--output", help="basis archive path")
    s.set_defaults(func=cmd_basis)

    s = sub.add_parser("reduce", parents=[common], help="reduced run with a basis archive")
    s.add_argument("--mesh")
    s.add_argument("--basis", required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--format", choices=("obj", "ply"), default="obj")
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("bench", parents=[common], help="global-step timing report")
    s.add_argument("--mesh")
    s.add_argument("--basis", nargs="*", default=[])
    s.add_argument("--sizes", type=int, nargs="+", default=[10, 50, 100, 200])
    s.add_argument("--bench-frames", type=int, default=25)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("compare", parents=[common], help="compare two frame directories")
    s.add_argument("run_a")
    s.add_argument("run_b")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _no_rng(args.seedless):
            return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, MeshFormatError, MeshValidationError,
            snaps.ArchiveError, bases_mod.BasisArchiveError, snaps.SnapshotStateError) as exc:
        print(f"pdsnap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, IllConditionedBasisError) as exc:
        print(f"pdsnap {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
