"""Reduced projective dynamics: the global step restricted to ``mean + span(U)``.

Positions are ``q = mean_shape + U z``.  Substituting into the global system
and projecting with ``U^T`` gives the dense ``k x k`` system

    (U^T A U) z = U^T (b - A mean_shape).

The local step still runs on the lifted full-space positions.  When the
basis carries sparse generator columns ``G`` with ``U = G R^-1`` the solve
is carried out in ``G`` coordinates (same span, same trajectory) so the
per-frame r.h.s. projection is a sparse product.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla
from scipy import sparse

from .bases import Basis
from .solver import (
    DivergenceError, PrefactoredSystem, SolverConfig, SolverError, gravity_force,
    inertia_target, objective,
)

__all__ = [
    "IllConditionedBasisError",
    "ReducedSystem",
    "ReducedState",
    "reduce_system",
    "reduced_step",
    "lift",
    "project_positions",
    "initial_reduced_state",
]

COND_LIMIT = 1e12
# use sparse products when the generator is at most this dense
_SPARSE_DENSITY = 0.25


class IllConditionedBasisError(SolverError):
    def __init__(self, k, cond):
        self.k = k
        self.cond = cond
        super().__init__(f"reduced matrix for k={k} is numerically singular (cond ~ {cond:.3g})")


class ReducedSystem:
    """Projected global matrix and its dense Cholesky factor.

    Attributes
    ----------
    E : (k, k) ndarray
        ``U^T A U`` in the basis' own coordinates.
    basis, system
        The basis and the full prefactored system it was built from.
    """

    def __init__(self, system: PrefactoredSystem, basis: Basis):
        if basis.n != system.n:
            raise ValueError(f"basis has {basis.n} rows, system has {system.n}")
        self.system = system
        self.basis = basis
        A = system.A
        U = basis.U
        E = U.T @ (A @ U)
        self.E = 0.5 * (E + E.T)
        cond = np.linalg.cond(self.E) if basis.k else 1.0
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise IllConditionedBasisError(basis.k, cond)

        G, R = basis.generator_pair()
        if sparse.issparse(G) and G.nnz <= _SPARSE_DENSITY * G.shape[0] * G.shape[1]:
            self.G = sparse.csc_matrix(G)
            self.Gt = sparse.csr_matrix(G.T)
        else:
            self.G = np.asfortranarray(G.toarray() if sparse.issparse(G) else G)
            self.Gt = np.ascontiguousarray(self.G.T)
        self.R = R
        Eg = self.Gt @ (A @ self.G)
        Eg = np.asarray(Eg.toarray() if sparse.issparse(Eg) else Eg)
        self.E_gen = 0.5 * (Eg + Eg.T)
        try:
            self._chol = sla.cho_factor(self.E_gen, lower=False)
        except np.linalg.LinAlgError:
            raise IllConditionedBasisError(basis.k, np.inf) from None
        self.offset = np.asarray(self.Gt @ (A @ basis.mean_shape))
        mass = system.mass
        Mg = self.Gt @ (mass.diag[:, None] * _dense(self.G))
        self._mass_chol = sla.cho_factor(0.5 * (Mg + Mg.T), lower=False)

    @property
    def k(self):
        return self.basis.k

    def solve_generator(self, b):
        """Global solve for the full r.h.s. ``b``; returns generator coordinates.

        This is the timed reduced global step: sparse projection plus the
        dense k x k back-substitution.
        """
        y = self.Gt @ b - self.offset
        return sla.cho_solve(self._chol, y)

    def to_basis(self, zg):
        return self.R @ zg

    def lift_generator(self, zg):
        return self.basis.mean_shape + self.G @ zg

    def project_generator(self, q):
        """M-orthogonal projection of ``q - mean`` in generator coordinates."""
        d = self.system.mass.diag[:, None] * (q - self.basis.mean_shape)
        return sla.cho_solve(self._mass_chol, self.Gt @ d)


def _dense(G):
    return G.toarray() if sparse.issparse(G) else G


def reduce_system(system: PrefactoredSystem, basis: Basis):
    return ReducedSystem(system, basis)


@dataclass(frozen=True)
class ReducedState:
    """Reduced coordinates ``z`` (k x 3, basis coordinates), full-space
    velocities and the cached lifted positions."""

    z: np.ndarray
    v: np.ndarray
    q: np.ndarray
    frame: int = 0


def lift(state_or_z, basis: Basis):
    z = state_or_z.z if isinstance(state_or_z, ReducedState) else np.asarray(state_or_z)
    return basis.mean_shape + basis.U @ z


def project_positions(q, basis: Basis, mass):
    """Basis coordinates of the M-orthogonal projection of ``q - mean``."""
    sq = mass.sqrt()[:, None]
    return np.linalg.lstsq(sq * basis.U, sq * (np.asarray(q) - basis.mean_shape), rcond=None)[0]


def initial_reduced_state(rsys: ReducedSystem, q, v, frame=0):
    """Project a full state into the subspace (positions M-orthogonally,
    velocities kept as given)."""
    zg = rsys.project_generator(np.asarray(q, float))
    return ReducedState(rsys.to_basis(zg), np.asarray(v, float).copy(), rsys.lift_generator(zg), frame)


def reduced_step(state: ReducedState, rsys: ReducedSystem, constraints, config: SolverConfig,
                 f_ext=None, trace: Optional[list] = None, residuals: Optional[list] = None,
                 timings: Optional[list] = None):
    """One frame of reduced projective dynamics.

    ``trace`` collects the objective at the lifted iterates; ``residuals``
    collects ``max|E z - U^T b'| / max|U^T b'|`` per alternation and
    ``timings`` the wall time (ns) of every reduced global solve.
    """
    system = rsys.system
    mass = system.mass
    dt = system.dt
    if f_ext is None:
        f_ext = gravity_force(mass, config.gravity)
    s = inertia_target(state, f_ext, mass, dt)
    frame = state.frame + 1
    if not np.all(np.isfinite(s)):
        raise DivergenceError(frame, 0)
    inertial_rhs = mass.diag[:, None] * s / dt**2
    zg = rsys.project_generator(s)
    q = rsys.lift_generator(zg)
    if trace is not None:
        trace.append(objective(q, s, mass, constraints, dt))
    for it in range(int(config.iterations)):
        P = constraints.project(q)
        b = inertial_rhs + constraints.rhs(P)
        if timings is None:
            zg = rsys.solve_generator(b)
        else:
            t0 = time.perf_counter_ns()
            zg = rsys.solve_generator(b)
            timings.append(time.perf_counter_ns() - t0)
        q = rsys.lift_generator(zg)
        if not (np.all(np.isfinite(zg)) and np.all(np.isfinite(q))):
            raise DivergenceError(frame, it)
        if trace is not None:
            trace.append(objective(q, s, mass, constraints, dt))
        if residuals is not None:
            U = rsys.basis.U
            rhs = U.T @ b - U.T @ (system.A @ rsys.basis.mean_shape)
            res = rsys.E @ rsys.to_basis(zg) - rhs
            residuals.append(float(np.abs(res).max() / max(np.abs(rhs).max(), 1e-300)))
        if constraints.n_rows == 0:
            break
    v = (q - state.q) / dt
    return ReducedState(rsys.to_basis(zg), v, q, frame)
