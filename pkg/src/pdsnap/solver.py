"""Full-order projective dynamics.

Each frame minimises

    1/(2 dt^2) ||M^(1/2) (q - s)||^2 + sum_j w_j/2 ||S_j q - p_j(q)||^2

by alternating constraint projections (local step) with a solve of the
prefactored system ``A = M/dt^2 + sum_j w_j S_j^T S_j`` (global step).
Constraint families are stored as stacked sparse selectors so the local
step and the r.h.s. assembly are vectorised.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .mesh import Mesh, MassMatrix, tet_volumes

try:  # optional CHOLMOD backend
    from sksparse.cholmod import cholesky as _cholmod_cholesky
except ImportError:  # pragma: no cover - depends on environment
    _cholmod_cholesky = None

__all__ = [
    "ConfigError",
    "SolverError",
    "DivergenceError",
    "SolverConfig",
    "ConstraintConfig",
    "Constraint",
    "ConstraintSet",
    "SimState",
    "PrefactoredSystem",
    "load_config",
    "build_constraints",
    "project_constraint",
    "assemble_global",
    "inertia_target",
    "step",
    "objective",
    "initial_state",
    "gravity_force",
    "simulate",
]

KINDS = ("tet_strain", "edge_spring", "anchor")


class ConfigError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


class DivergenceError(SolverError):
    """Non-finite positions appeared during a solve."""

    def __init__(self, frame, iteration):
        self.frame = frame
        self.iteration = iteration
        super().__init__(f"simulation diverged at frame {frame}, iteration {iteration}")


@dataclass(frozen=True)
class ConstraintConfig:
    tet_strain: Optional[float] = None  # stiffness; weight = stiffness * rest volume
    edge_spring: Optional[float] = None
    anchor_weight: float = 1e6
    anchors: tuple = ()
    allow_unconstrained: bool = False


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1.0 / 60.0
    iterations: int = 10
    gravity: tuple = (0.0, -9.81, 0.0)
    density: float = 1000.0
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    frames: int = 100
    stride: int = 1
    initial_velocity: tuple = (0.0, 0.0, 0.0)
    initial_angular_velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if int(self.iterations) < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.density > 0:
            raise ConfigError("density must be positive")
        if int(self.stride) < 1:
            raise ConfigError("stride must be >= 1")
        if len(self.gravity) != 3:
            raise ConfigError("gravity must be a 3-vector")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "constraints"}
        c = self.constraints
        d["constraints"] = {
            "tet_strain": c.tet_strain,
            "edge_spring": c.edge_spring,
            "anchor_weight": c.anchor_weight,
            "anchors": list(c.anchors),
            "allow_unconstrained": c.allow_unconstrained,
        }
        return json.loads(json.dumps(d))

    def config_hash(self):
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(source):
    """Build a :class:`SolverConfig` from a JSON file path or a dict.

    Keys: ``dt``, ``iterations``, ``gravity``, ``density``, ``frames``,
    ``stride``, ``initial_velocity``, ``initial_angular_velocity`` and a
    ``constraints`` table with ``tet_strain`` / ``edge_spring`` stiffness,
    ``anchors`` (vertex list), ``anchor_weight``, ``allow_unconstrained``.
    """
    if isinstance(source, (str, Path)):
        try:
            with open(source) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    else:
        raw = dict(source)
    raw = dict(raw)
    cons = dict(raw.pop("constraints", {}) or {})
    known = set(SolverConfig.__dataclass_fields__) - {"constraints"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    c_known = set(ConstraintConfig.__dataclass_fields__)
    if set(cons) - c_known:
        raise ConfigError(f"unknown constraint keys: {sorted(set(cons) - c_known)}")
    cons["anchors"] = tuple(int(a) for a in cons.get("anchors", ()))
    for key in ("gravity", "initial_velocity", "initial_angular_velocity"):
        if key in raw:
            raw[key] = tuple(float(x) for x in raw[key])
    return SolverConfig(constraints=ConstraintConfig(**cons), **raw)


# -- constraints ------------------------------------------------------------


@dataclass(frozen=True)
class Constraint:
    """One projective constraint.

    ``selector`` is the dense ``rows x len(indices)`` block of ``S_j``
    restricted to ``indices``; ``rest`` holds the rest data (``D_m^-1`` for
    tets, the rest length for edges, the target point for anchors).
    """

    kind: str
    indices: tuple
    weight: float
    rest: np.ndarray
    selector: np.ndarray

    def select(self, q):
        return self.selector @ np.asarray(q)[list(self.indices)]


def _tet_selector_blocks(Dm_inv):
    # S_j q = D_m^-T D_s^T = F^T ; D_s^T rows are x_i - x_0
    G = np.array([[-1.0, 1.0, 0.0, 0.0], [-1.0, 0.0, 1.0, 0.0], [-1.0, 0.0, 0.0, 1.0]])
    return np.einsum("mji,jk->mik", Dm_inv, G)  # (m, 3, 4)


@numba.njit(cache=True)
def _polar_newton(F, out):  # pragma: no cover - compiled
    """Orthogonal polar factor by scaled Newton iteration, one 3x3 per row.

    Rows with det(F) not clearly positive are marked with NaN and left to
    the SVD path (the nearest rotation then needs the reflection fix).
    """
    for m in range(F.shape[0]):
        a, b, c = F[m, 0, 0], F[m, 0, 1], F[m, 0, 2]
        d, e, f = F[m, 1, 0], F[m, 1, 1], F[m, 1, 2]
        g, h, i = F[m, 2, 0], F[m, 2, 1], F[m, 2, 2]
        fro = a * a + b * b + c * c + d * d + e * e + f * f + g * g + h * h + i * i
        det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
        if not det > 1e-6 * fro**1.5:
            out[m, 0, 0] = np.nan
            continue
        for it in range(50):
            # inverse transpose = cofactor matrix / det
            A, B, C = e * i - f * h, f * g - d * i, d * h - e * g
            D, E, Fc = c * h - b * i, a * i - c * g, b * g - a * h
            G, H, I = b * f - c * e, c * d - a * f, a * e - b * d
            det = a * A + b * B + c * C
            gam = 1.0
            if it < 6:
                fy = A * A + B * B + C * C + D * D + E * E + Fc * Fc + G * G + H * H + I * I
                fx = a * a + b * b + c * c + d * d + e * e + f * f + g * g + h * h + i * i
                gam = math.sqrt(math.sqrt(fy / fx) / abs(det))
            s1, s2 = 0.5 * gam, 0.5 / (gam * det)
            na, nb, nc = s1 * a + s2 * A, s1 * b + s2 * B, s1 * c + s2 * C
            nd, ne, nf = s1 * d + s2 * D, s1 * e + s2 * E, s1 * f + s2 * Fc
            ng, nh, ni = s1 * g + s2 * G, s1 * h + s2 * H, s1 * i + s2 * I
            diff = (abs(na - a) + abs(nb - b) + abs(nc - c) + abs(nd - d) + abs(ne - e)
                    + abs(nf - f) + abs(ng - g) + abs(nh - h) + abs(ni - i))
            a, b, c, d, e, f, g, h, i = na, nb, nc, nd, ne, nf, ng, nh, ni
            if diff < 1e-14:
                break
        out[m, 0, 0], out[m, 0, 1], out[m, 0, 2] = a, b, c
        out[m, 1, 0], out[m, 1, 1], out[m, 1, 2] = d, e, f
        out[m, 2, 0], out[m, 2, 1], out[m, 2, 2] = g, h, i


def _nearest_rotation_svd(F):
    U, _, Vt = np.linalg.svd(F)
    det = np.linalg.det(U @ Vt)
    U = U.copy()
    U[..., :, 2] *= np.where(det < 0, -1.0, 1.0)[..., None]
    return U @ Vt


def _nearest_rotation(F):
    """Rotation closest to each 3x3 in Frobenius norm (reflection-corrected)."""
    F = np.ascontiguousarray(F, dtype=np.float64)
    out = np.empty_like(F)
    _polar_newton(F, out)
    bad = np.isnan(out[:, 0, 0])
    if bad.any():
        finite = np.isfinite(F).all(axis=(1, 2))
        fix = bad & finite
        if fix.any():
            out[fix] = _nearest_rotation_svd(F[fix])
    return out


def _edge_projection(offsets, rest_len, fallback):
    """offsets: (m, 3) = (q_a - q_b)/2 ; returns rescaled offsets."""
    norm = np.linalg.norm(offsets, axis=1)
    safe = norm > 0
    direction = np.where(safe[:, None], offsets / np.where(safe, norm, 1.0)[:, None], fallback)
    return 0.5 * rest_len[:, None] * direction


class ConstraintSet:
    """All constraints of a simulation, grouped by family.

    Rows of the stacked selector are ordered tets, then edges, then anchors;
    projections and the r.h.s. reduction always follow this order.
    """

    def __init__(self, n, tets=None, tet_weights=None, Dm_inv=None, edges=None,
                 edge_weights=None, rest_lengths=None, edge_dirs=None, anchors=None,
                 anchor_weights=None, anchor_targets=None):
        self.n = int(n)
        self.tets = np.zeros((0, 4), np.int64) if tets is None else np.asarray(tets, np.int64)
        self.tet_weights = np.asarray(tet_weights if tet_weights is not None else [], float)
        self.Dm_inv = np.zeros((0, 3, 3)) if Dm_inv is None else np.asarray(Dm_inv, float)
        self.edges = np.zeros((0, 2), np.int64) if edges is None else np.asarray(edges, np.int64)
        self.edge_weights = np.asarray(edge_weights if edge_weights is not None else [], float)
        self.rest_lengths = np.asarray(rest_lengths if rest_lengths is not None else [], float)
        self.edge_dirs = np.zeros((len(self.edges), 3)) if edge_dirs is None else np.asarray(edge_dirs, float)
        self.anchors = np.zeros(0, np.int64) if anchors is None else np.asarray(anchors, np.int64)
        self.anchor_weights = np.asarray(anchor_weights if anchor_weights is not None else [], float)
        self.anchor_targets = (np.zeros((0, 3)) if anchor_targets is None
                               else np.asarray(anchor_targets, float).reshape(-1, 3))
        for w in (self.tet_weights, self.edge_weights, self.anchor_weights):
            if np.any(w < 0):
                raise ConfigError("constraint weights must be nonnegative")
        self._build_selector()

    def _build_selector(self):
        rows, cols, vals = [], [], []
        r0 = 0
        mt = len(self.tets)
        if mt:
            blocks = _tet_selector_blocks(self.Dm_inv)
            rr = r0 + np.arange(mt)[:, None, None] * 3 + np.arange(3)[None, :, None]
            rows.append(np.broadcast_to(rr, blocks.shape).ravel())
            cols.append(np.broadcast_to(self.tets[:, None, :], blocks.shape).ravel())
            vals.append(blocks.ravel())
            r0 += 3 * mt
        me = len(self.edges)
        if me:
            blk = np.array([[0.5, -0.5], [-0.5, 0.5]])
            rr = r0 + np.arange(me)[:, None, None] * 2 + np.arange(2)[None, :, None]
            shape = (me, 2, 2)
            rows.append(np.broadcast_to(rr, shape).ravel())
            cols.append(np.broadcast_to(self.edges[:, None, :], shape).ravel())
            vals.append(np.broadcast_to(blk, shape).ravel())
            r0 += 2 * me
        ma = len(self.anchors)
        if ma:
            rows.append(r0 + np.arange(ma))
            cols.append(self.anchors)
            vals.append(np.ones(ma))
            r0 += ma
        self.n_rows = r0
        if rows:
            S = sparse.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(r0, self.n),
            )
        else:
            S = sparse.coo_matrix((0, self.n))
        self.S = S.tocsr()
        self.row_weights = np.concatenate([
            np.repeat(self.tet_weights, 3),
            np.repeat(self.edge_weights, 2),
            self.anchor_weights,
        ]) if r0 else np.zeros(0)
        self.St_W = (self.S.T @ sparse.diags(self.row_weights)).tocsr()
        mt, me = 3 * len(self.tets), 2 * len(self.edges)
        self._S_tet = self.S[:mt]
        self._S_edge = self.S[mt : mt + me]

    def __len__(self):
        return len(self.tets) + len(self.edges) + len(self.anchors)

    def __getitem__(self, j):
        if j < 0:
            j += len(self)
        mt, me = len(self.tets), len(self.edges)
        if j < mt:
            return Constraint("tet_strain", tuple(self.tets[j]), float(self.tet_weights[j]),
                              self.Dm_inv[j], _tet_selector_blocks(self.Dm_inv[j:j + 1])[0])
        j -= mt
        if j < me:
            return Constraint("edge_spring", tuple(self.edges[j]), float(self.edge_weights[j]),
                              np.array(self.rest_lengths[j]),
                              np.array([[0.5, -0.5], [-0.5, 0.5]]))
        j -= me
        if j < len(self.anchors):
            return Constraint("anchor", (int(self.anchors[j]),), float(self.anchor_weights[j]),
                              self.anchor_targets[j].copy(), np.ones((1, 1)))
        raise IndexError(j)

    def weighted_gram(self):
        """sum_j w_j S_j^T S_j as a sparse matrix."""
        return (self.St_W @ self.S).tocsc()

    def project(self, q):
        """Stacked projections p_j(q), shape (n_rows, 3), in selector row order."""
        out = []
        if len(self.tets):
            Ft = (self._S_tet @ q).reshape(-1, 3, 3)
            out.append(_nearest_rotation(Ft).reshape(-1, 3))
        if len(self.edges):
            off = self._S_edge @ q
            half = _edge_projection(off[0::2], self.rest_lengths, self.edge_dirs)
            p = np.empty_like(off)
            p[0::2] = half
            p[1::2] = -half
            out.append(p)
        if len(self.anchors):
            out.append(self.anchor_targets)
        return np.concatenate(out, axis=0) if out else np.zeros((0, 3))

    def energy(self, q, P=None):
        """sum_j w_j/2 ||S_j q - p_j||^2 with p_j = p_j(q) unless given."""
        if self.n_rows == 0:
            return 0.0
        if P is None:
            P = self.project(q)
        d = self.S @ q - P
        return 0.5 * float(np.sum(self.row_weights[:, None] * d * d))

    def rhs(self, P):
        """sum_j w_j S_j^T p_j."""
        if self.n_rows == 0:
            return np.zeros((self.n, 3))
        return self.St_W @ P

    def translated(self, offset):
        """Copy with anchor targets shifted by ``offset``."""
        out = ConstraintSet.__new__(ConstraintSet)
        out.__dict__.update(self.__dict__)
        out.anchor_targets = self.anchor_targets + np.asarray(offset, float)
        return out


def build_constraints(mesh: Mesh, settings=None, **overrides):
    """Constraint families for ``mesh`` with rest data taken from its vertices.

    ``settings`` is a :class:`ConstraintConfig` (or a :class:`SolverConfig`, whose
    ``constraints`` field is used).  Tet-strain weights are the stiffness
    times the rest volume.
    """
    if isinstance(settings, SolverConfig):
        settings = settings.constraints
    settings = replace(settings or ConstraintConfig(), **overrides)
    x = mesh.vertices
    n = mesh.n_vertices
    kw = {}
    if settings.tet_strain is not None and mesh.is_volumetric:
        tets = mesh.tets
        Dm = np.stack([x[tets[:, i]] - x[tets[:, 0]] for i in (1, 2, 3)], axis=-1)
        vol = np.abs(tet_volumes(x, tets))
        kw.update(tets=tets, Dm_inv=np.linalg.inv(Dm), tet_weights=settings.tet_strain * vol)
    elif settings.tet_strain is not None:
        raise ConfigError("tet_strain constraints need a volumetric mesh")
    if settings.edge_spring is not None:
        e = mesh.edges
        d = x[e[:, 0]] - x[e[:, 1]]
        L = np.linalg.norm(d, axis=1)
        kw.update(edges=e, rest_lengths=L, edge_dirs=d / L[:, None],
                  edge_weights=np.full(len(e), float(settings.edge_spring)))
    if settings.anchors:
        a = np.asarray(settings.anchors, np.int64)
        if a.min() < 0 or a.max() >= n:
            raise ConfigError(f"anchor vertex outside [0, {n})")
        kw.update(anchors=a, anchor_targets=x[a], anchor_weights=np.full(len(a), settings.anchor_weight))
    cs = ConstraintSet(n, **kw)
    if len(cs) == 0 and not settings.allow_unconstrained:
        raise ConfigError("empty constraint set; pass allow_unconstrained to run without constraints")
    return cs


def project_constraint(c: Constraint, q):
    """Projection of a single constraint onto its manifold.

    Returns the rotation ``R^T`` (tet), the 2x3 rescaled midpoint offsets
    (edge), or the 1x3 target point (anchor), in the row layout of
    ``c.select(q)``.
    """
    q = np.asarray(q, float)
    if c.kind == "tet_strain":
        return _nearest_rotation(c.select(q)[None])[0]
    if c.kind == "edge_spring":
        off = c.select(q)
        ab = q[c.indices[0]] - q[c.indices[1]]
        fallback = ab / np.linalg.norm(ab) if np.any(ab) else np.array([1.0, 0.0, 0.0])
        half = _edge_projection(off[:1], np.atleast_1d(c.rest), fallback[None])[0]
        return np.stack([half, -half])
    if c.kind == "anchor":
        return np.asarray(c.rest, float).reshape(1, 3)
    raise ValueError(f"unknown constraint kind {c.kind!r}")


# -- global system ------------------------------------------------------------


class _Factor:
    """Sparse SPD factorisation; CHOLMOD when available, SuperLU otherwise."""

    def __init__(self, A):
        self.backend = None
        if _cholmod_cholesky is not None:
            try:
                self._f = _cholmod_cholesky(A.tocsc())
                self.backend = "cholmod"
            except Exception as exc:  # CholmodNotPositiveDefiniteError
                raise SolverError(f"global matrix is not SPD: {exc}") from exc
        else:
            # symmetric ordering, no pivoting: LDL^T-equivalent for SPD A
            self._f = spla.splu(
                A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
            self.backend = "superlu"

    def solve(self, b):
        if self.backend == "cholmod":
            return self._f(b)
        return self._f.solve(b)


class PrefactoredSystem:
    """``A = M/dt^2 + sum_j w_j S_j^T S_j`` and its one-time factorisation."""

    def __init__(self, A, mass, dt):
        self.A = sparse.csc_matrix(A)
        self.mass = mass
        self.dt = float(dt)
        self.factor = _Factor(self.A)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def backend(self):
        return self.factor.backend

    def solve(self, b):
        b = np.asarray(b, float)
        if len(b) == 0:
            return b.copy()
        return np.asarray(self.factor.solve(b))


def assemble_global(mesh, mass: MassMatrix, constraints: ConstraintSet, dt):
    if not dt > 0:
        raise ConfigError("dt must be positive")
    n = mass.n
    A = sparse.diags(mass.diag / dt**2, format="csc")
    if constraints.n_rows:
        A = A + constraints.weighted_gram()
    A = sparse.csc_matrix(0.5 * (A + A.T))
    A.sort_indices()
    return PrefactoredSystem(A, mass, dt)


# -- time stepping ------------------------------------------------------------


@dataclass(frozen=True)
class SimState:
    q: np.ndarray
    v: np.ndarray
    frame: int = 0


def initial_state(mesh, config: SolverConfig):
    """Rest positions with a rigid initial velocity field (linear + spin about
    the centroid)."""
    q = mesh.vertices.copy()
    w = np.asarray(config.initial_angular_velocity, float)
    v = np.broadcast_to(np.asarray(config.initial_velocity, float), q.shape).copy()
    v += np.cross(w, q - q.mean(axis=0))
    return SimState(q, v, 0)


def inertia_target(state: SimState, f_ext, mass: MassMatrix, dt):
    """Implicit-Euler predictor ``q + dt v + dt^2 M^-1 f_ext``."""
    acc = np.asarray(f_ext, float) / mass.diag[:, None]
    return state.q + dt * state.v + dt**2 * acc


def gravity_force(mass: MassMatrix, gravity):
    return mass.diag[:, None] * np.asarray(gravity, float)[None, :]


def objective(q, s, mass: MassMatrix, constraints: ConstraintSet, dt):
    """Per-frame energy at ``q`` with projections evaluated at ``q``."""
    d = np.asarray(q) - s
    inertial = float(np.sum(mass.diag[:, None] * d * d)) / (2.0 * dt**2)
    return inertial + constraints.energy(q)


def step(state: SimState, system: PrefactoredSystem, constraints: ConstraintSet,
         config: SolverConfig, f_ext=None, trace: Optional[list] = None,
         timings: Optional[list] = None):
    """Advance one frame with ``config.iterations`` local/global alternations.

    If ``trace`` is a list, the objective at the initial iterate and after
    each alternation is appended to it.  ``timings`` receives the wall time
    (ns) of every global solve.
    """
    dt = system.dt
    mass = system.mass
    if f_ext is None:
        f_ext = gravity_force(mass, config.gravity)
    s = inertia_target(state, f_ext, mass, dt)
    frame = state.frame + 1
    if not np.all(np.isfinite(s)):
        raise DivergenceError(frame, 0)
    inertial_rhs = mass.diag[:, None] * s / dt**2
    q = s
    if trace is not None:
        trace.append(objective(q, s, mass, constraints, dt))
    for it in range(int(config.iterations)):
        P = constraints.project(q)
        b = inertial_rhs + constraints.rhs(P)
        if timings is None:
            q = system.solve(b)
        else:
            t0 = time.perf_counter_ns()
            q = system.solve(b)
            timings.append(time.perf_counter_ns() - t0)
        if not np.all(np.isfinite(q)):
            raise DivergenceError(frame, it)
        if trace is not None:
            trace.append(objective(q, s, mass, constraints, dt))
        if constraints.n_rows == 0:
            break  # projection-free: one solve is the exact minimiser
    v = (q - state.q) / dt
    return SimState(q, v, frame)


def simulate(mesh, config: SolverConfig, constraints=None, frames=None, callback=None):
    """Run ``frames`` frames (frame 0 is the initial state) and return the
    positions array of shape (frames, n, 3)."""
    frames = config.frames if frames is None else int(frames)
    if constraints is None:
        constraints = build_constraints(mesh, config)
    mass = _mass_for(mesh, config)
    system = assemble_global(mesh, mass, constraints, config.dt)
    state = initial_state(mesh, config)
    out = np.empty((frames, mesh.n_vertices, 3))
    for i in range(frames):
        if i:
            state = step(state, system, constraints, config)
        out[i] = state.q
        if callback is not None:
            callback(state)
    return out


def _mass_for(mesh, config):
    from .mesh import lumped_mass_matrix

    return lumped_mass_matrix(mesh, config.density)
