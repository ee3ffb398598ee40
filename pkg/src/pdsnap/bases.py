"""Reduction bases from snapshots: localized mass-weighted PCA and SPLOCS.

Both builders work on centred, mass-weighted snapshots.  The residual is
kept as an ``(n, 3, T)`` array; a basis column is a scalar field over the
vertices applied identically to x, y and z.

PCA columns are M-orthonormalised at the end.  The localized (sparse)
columns are kept alongside as ``generator`` with ``U = generator @ inv(transform)``,
``transform`` upper triangular, so the reduced solver can work with the
sparse columns directly.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg as sla
from scipy import sparse

from .mesh import MassMatrix, Mesh, graph_distances
from .snapshots import SnapshotSet, SnapshotStateError

__all__ = [
    "SupportMap",
    "Basis",
    "DegenerateComponentError",
    "DegenerateBasisError",
    "DegenerateBasisWarning",
    "RankExhaustedWarning",
    "largest_deformation_vertex",
    "support_map",
    "extract_local_component",
    "deflate",
    "build_pca_basis",
    "build_splocs_basis",
    "reconstruction_error",
    "save_basis",
    "load_basis",
]

KIND_CODES = {"pca": 0, "splocs": 1, "external": 2}
MAGIC = b"PDBA"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")

# residual considered exhausted below this fraction of the initial norm
EXHAUSTED_RTOL = 1e-9
# columns whose Gram-Schmidt remainder falls below this fraction are dependent
DEPENDENT_RTOL = 1e-8
# global l1 floor added to the SPLOCS locality weights
LAMBDA_FLOOR = 1e-3


class DegenerateComponentError(ValueError):
    """A localized component vanished (residual has no energy inside the support)."""


class DegenerateBasisError(ValueError):
    """Sparsification removed every component."""


class DegenerateBasisWarning(UserWarning):
    pass


class RankExhaustedWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class SupportMap:
    """Linear falloff from 1 (within ``d_min``) to 0 (beyond ``d_max``).

    Radii are in units of the mesh's mean edge length.
    """

    center: int
    d_min: float
    d_max: float
    weights: np.ndarray
    distances: np.ndarray


def support_map(mesh: Mesh, center, d_min, d_max):
    if not 0 <= d_min < d_max:
        raise ValueError(f"need 0 <= d_min < d_max, got {d_min}, {d_max}")
    h = mesh.mean_edge_length
    d = graph_distances(mesh, center, limit=d_max * h) / h
    w = np.clip((d_max - d) / (d_max - d_min), 0.0, 1.0)
    w[d <= d_min] = 1.0
    w[~np.isfinite(d)] = 0.0
    return SupportMap(int(center), float(d_min), float(d_max), w, d)


def largest_deformation_vertex(residual, atol=0.0):
    """Vertex whose residual 3-vector reaches the largest norm over all
    frames (lowest index on ties), or ``None`` when the residual is zero."""
    r = np.asarray(residual)
    peak = np.sqrt(np.einsum("vct,vct->vt", r, r)).max(axis=1)
    v = int(np.argmax(peak))
    if not peak[v] > atol:
        return None
    return v


def extract_local_component(residual, v, smap: SupportMap):
    """Leading mode of the residual restricted to ``smap``.

    Returns the unit column ``u`` (length n, zero outside the support) and
    the coefficients ``(T, 3)`` that best fit the residual along ``u``.  The
    sign is fixed so the coefficients correlate positively with the
    trajectory of ``v``.
    """
    r = np.asarray(residual)
    n, _, T = r.shape
    X = r.reshape(n, 3 * T)
    seed = X[v]
    if not np.any(seed):
        raise ValueError(f"vertex {v} has a zero residual trajectory")
    sup = np.flatnonzero(smap.weights)
    WX = smap.weights[sup, None] * X[sup]
    if not np.any(WX):
        raise DegenerateComponentError(f"no residual energy inside the support of vertex {v}")
    _, _, Vt = np.linalg.svd(WX, full_matrices=False)
    c = Vt[0]
    if c @ seed < 0:
        c = -c
    u = np.zeros(n)
    u[sup] = smap.weights[sup] * (X[sup] @ c)
    norm = np.linalg.norm(u)
    if not norm > 0:
        raise DegenerateComponentError(f"component at vertex {v} vanished after localization")
    u /= norm
    coeffs = (u[sup] @ X[sup]).reshape(3, T).T
    return u, coeffs


def deflate(residual, u, coeffs):
    """``residual - u coeffs^T`` per coordinate (new array)."""
    return residual - u[:, None, None] * np.asarray(coeffs).T[None, :, :]


@dataclass(frozen=True, eq=False)
class Basis:
    U: np.ndarray
    mean_shape: np.ndarray
    kind: str = "pca"
    centers: np.ndarray = None
    d_min: np.ndarray = None
    d_max: np.ndarray = None
    mass_fingerprint: bytes = b"\0" * 32
    warnings: tuple = ()
    generator: Optional[sparse.csc_matrix] = None
    transform: Optional[np.ndarray] = None
    residual_norms: Optional[np.ndarray] = None

    def __post_init__(self):
        U = np.asarray(self.U, float)
        if U.ndim != 2:
            raise ValueError("U must be an n x k matrix")
        k = U.shape[1]
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "mean_shape", np.asarray(self.mean_shape, float).reshape(-1, 3))
        for name, fill, dt in (("centers", -1, np.int64), ("d_min", np.nan, float), ("d_max", np.nan, float)):
            val = getattr(self, name)
            val = np.full(k, fill, dtype=dt) if val is None else np.asarray(val, dtype=dt)
            object.__setattr__(self, name, val)
        if self.generator is not None:
            object.__setattr__(self, "generator", sparse.csc_matrix(self.generator))

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def k(self):
        return self.U.shape[1]

    def truncate(self, k):
        """Leading ``k`` columns (nested for PCA: the transform is triangular)."""
        if not 1 <= k <= self.k:
            raise ValueError(f"cannot truncate a {self.k}-column basis to {k}")
        gen = None if self.generator is None else self.generator[:, :k]
        tr = None if self.transform is None else self.transform[:k, :k]
        return replace(self, U=self.U[:, :k], centers=self.centers[:k], d_min=self.d_min[:k],
                       d_max=self.d_max[:k], generator=gen, transform=tr)

    def generator_pair(self):
        """``(G, R)`` with ``U = G R^-1``; falls back to ``(U, I)``."""
        if self.generator is None:
            return self.U, np.eye(self.k)
        R = np.eye(self.k) if self.transform is None else self.transform
        return self.generator, R


def _cgs2(G, rtol=DEPENDENT_RTOL):
    """Gram-Schmidt with one re-orthogonalisation pass (CGS2).

    Returns ``Q`` (orthonormal), upper-triangular ``R`` and the kept column
    indices, with ``G[:, kept] = Q R``.  Columns whose remainder drops below
    ``rtol`` of their norm are treated as dependent and skipped.
    """
    n, k = G.shape
    Q = np.zeros((n, k))
    R = np.zeros((k, k))
    kept = []
    for j in range(k):
        w = np.array(G[:, j], dtype=float)
        g_norm = np.linalg.norm(w)
        m = len(kept)
        r = np.zeros(m)
        for _ in range(2):
            h = Q[:, :m].T @ w
            w -= Q[:, :m] @ h
            r += h
        nrm = np.linalg.norm(w)
        if not nrm > rtol * g_norm:
            continue
        R[:m, m] = r
        R[m, m] = nrm
        Q[:, m] = w / nrm
        kept.append(j)
    m = len(kept)
    return Q[:, :m], R[:m, :m], np.asarray(kept, dtype=np.int64)


def _check_input(s: SnapshotSet, mass: MassMatrix, mesh: Mesh, K):
    if not (s.centered and s.mass_weighted):
        raise SnapshotStateError("bases are built from centered, mass-weighted snapshots")
    if K < 1:
        raise ValueError("component count must be >= 1")
    if not (mass.n == s.n == mesh.n_vertices):
        raise ValueError("mesh, mass and snapshots disagree on the vertex count")


def _local_pca(s, K, d_min, d_max, mesh):
    R = s.data.copy()
    r0 = np.linalg.norm(R)
    cols, centers, norms, coeffs = [], [], [r0], []
    exhausted = False
    for _ in range(K):
        if not norms[-1] > EXHAUSTED_RTOL * r0:
            exhausted = True
            break
        v = largest_deformation_vertex(R)
        if v is None:
            exhausted = True
            break
        smap = support_map(mesh, v, d_min, d_max)
        u, c = extract_local_component(R, v, smap)
        R = deflate(R, u, c)
        rn = np.linalg.norm(R)
        # orthogonal rank-one projection never increases the norm
        assert rn <= norms[-1] * (1 + 1e-12) + 1e-300, "deflation increased the residual"
        norms.append(rn)
        cols.append(u)
        centers.append(v)
        coeffs.append(c)
    G = np.column_stack(cols) if cols else np.zeros((s.n, 0))
    return G, np.asarray(centers, np.int64), np.asarray(norms), exhausted


def build_pca_basis(s: SnapshotSet, K, d_min, d_max, mass: MassMatrix, mesh: Mesh,
                    orthonormalize=True):
    """Greedy localized PCA in the mass-weighted space.

    Repeats: pick the largest-deformation vertex, build its support map,
    extract the local leading mode, deflate.  The columns are then
    orthonormalised (Euclidean in weighted space, i.e. M-orthonormal after
    un-weighting) and mapped back by ``M^-1/2``.
    """
    _check_input(s, mass, mesh, K)
    Gw, centers, norms, exhausted = _local_pca(s, K, d_min, d_max, mesh)
    notes = []
    if Gw.shape[1] == 0:
        raise DegenerateBasisError("snapshots carry no deformation")
    inv_sqrt = 1.0 / mass.sqrt()
    if orthonormalize:
        Q, Rt, kept = _cgs2(Gw)
        Gw, centers = Gw[:, kept], centers[kept]
        U = Q * inv_sqrt[:, None]
    else:
        Rt = np.eye(Gw.shape[1])
        U = Gw * inv_sqrt[:, None]
    if exhausted or U.shape[1] < K:
        notes.append("rank_exhausted")
        warnings.warn(
            f"requested {K} components, snapshots support {U.shape[1]}", RankExhaustedWarning,
            stacklevel=2,
        )
    G = sparse.csc_matrix(Gw * inv_sqrt[:, None])
    G.eliminate_zeros()
    k = U.shape[1]
    return Basis(
        U=U, mean_shape=s.mean_shape, kind="pca", centers=centers,
        d_min=np.full(k, d_min), d_max=np.full(k, d_max),
        mass_fingerprint=mass.fingerprint(), warnings=tuple(notes),
        generator=G, transform=Rt, residual_norms=norms,
    )


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _coefficients(C, X):
    """Least-squares coefficients of X on the columns of C (zero columns get 0)."""
    W = np.zeros((C.shape[1], X.shape[1]))
    live = np.flatnonzero(np.any(C, axis=0))
    if len(live):
        W[live] = np.linalg.lstsq(C[:, live], X, rcond=None)[0]
    return W


def _rescale(C, W, Y):
    """Coefficient rows to max magnitude 1; components absorb the scale."""
    s = np.abs(W).max(axis=1)
    s[s == 0] = 1.0
    return C * s, W / s[:, None], Y * s


def build_splocs_basis(s: SnapshotSet, K, d_min, d_max, lam, mass: MassMatrix, mesh: Mesh,
                       rho=10.0, iters=100, outer=5, tol=1e-6, floor=LAMBDA_FLOOR):
    """Sparse localized components initialised from the localized PCA loop.

    Minimises ``||X - C W||_F^2 + lam * sum_k sum_v L_k(v) |C_k(v)|`` over
    components ``C`` (n x K) and coefficients ``W`` (K x 3T), where
    ``L_k = 1 - support_k + floor`` and ``C_k`` is forced to zero beyond
    ``d_max`` of its centre.  The C-step is ADMM with a soft-thresholded
    splitting variable; the W-step is least squares followed by rescaling
    each coefficient row to max magnitude 1.
    """
    _check_input(s, mass, mesh, K)
    if lam < 0:
        raise ValueError("sparsity strength must be nonnegative")
    X = s.matrix()
    C, _, norms, exhausted = _local_pca(s, K, d_min, d_max, mesh)
    k = C.shape[1]
    if k == 0:
        raise DegenerateBasisError("snapshots carry no deformation")
    W = _coefficients(C, X)
    Y = np.zeros_like(C)
    C, W, Y = _rescale(C, W, Y)

    centers = np.argmax(np.abs(C), axis=0)
    Lam = np.empty_like(C)
    hard = np.zeros(C.shape, dtype=bool)
    for j, c in enumerate(centers):
        smap = support_map(mesh, int(c), d_min, d_max)
        Lam[:, j] = 1.0 - smap.weights + floor
        hard[:, j] = smap.weights == 0
    thresh = lam * Lam / rho
    Z = np.where(hard, 0.0, C)
    converged = False
    for _ in range(outer):
        H = np.linalg.inv(2.0 * W @ W.T + rho * np.eye(k))
        XW = 2.0 * X @ W.T
        for _ in range(iters):
            U = (XW + rho * (Z - Y)) @ H
            Z_old = Z
            Z = _soft_threshold(U + Y, thresh)
            Z[hard] = 0.0
            Y = Y + U - Z
            scale = max(np.linalg.norm(U), np.finfo(float).tiny)
            primal = np.linalg.norm(U - Z) / scale
            dual = rho * np.linalg.norm(Z - Z_old) / scale
            converged = primal <= tol and dual <= tol
            if converged:
                break
        W = _coefficients(Z, X)
        Z, W, Y = _rescale(Z, W, Y)

    notes = []
    if exhausted:
        notes.append("rank_exhausted")
    if not converged:
        notes.append("admm_not_converged")
    col_norm = np.linalg.norm(Z, axis=0)
    alive = col_norm > 1e-12 * max(col_norm.max(), np.finfo(float).tiny)
    if not alive.all():
        notes.append("degenerate_components")
        warnings.warn(
            f"sparsification removed {int((~alive).sum())} of {k} components",
            DegenerateBasisWarning, stacklevel=2,
        )
    if not alive.any():
        raise DegenerateBasisError("sparsification removed every component")
    Z = Z[:, alive]
    U = Z / mass.sqrt()[:, None]
    k = U.shape[1]
    G = sparse.csc_matrix(U)
    G.eliminate_zeros()
    return Basis(
        U=U, mean_shape=s.mean_shape, kind="splocs", centers=centers[alive],
        d_min=np.full(k, d_min), d_max=np.full(k, d_max),
        mass_fingerprint=mass.fingerprint(), warnings=tuple(notes),
        generator=G, transform=np.eye(k), residual_norms=norms,
    )


def reconstruction_error(b: Optional[Basis], s: SnapshotSet, mass: MassMatrix):
    """Relative Frobenius error of the M-orthogonal projection of the
    centred snapshots onto span(U).  ``b=None`` (empty basis) gives 1."""
    if s.mass_weighted or not s.centered:
        raise SnapshotStateError("expects centered, unweighted snapshots")
    X = s.matrix()
    if b is None or b.k == 0:
        return 1.0
    if b.n != s.n:
        raise ValueError(f"basis has {b.n} rows, snapshots have {s.n} vertices")
    sq = mass.sqrt()[:, None]
    Z = np.linalg.lstsq(sq * b.U, sq * X, rcond=None)[0]
    denom = np.linalg.norm(X)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(X - b.U @ Z) / denom)


# -- archive ------------------------------------------------------------------
#
# b"PDBA" | u32 version | u64 n | u64 k | u8 kind
# f64[n*k] U (column-major) | f64[n*3] mean_shape
# per component: i64 center, f64 d_min, f64 d_max
# 32-byte mass fingerprint
# u8 has_generator [ f64[k*k] transform (column-major),
#                    u64 nnz, i64[k+1] indptr, i64[nnz] indices, f64[nnz] data ]


def save_basis(b: Basis, path):
    parts = [_HEADER.pack(MAGIC, VERSION, b.n, b.k, KIND_CODES[b.kind])]
    parts.append(np.asarray(b.U, "<f8").tobytes(order="F"))
    parts.append(np.ascontiguousarray(b.mean_shape, "<f8").tobytes())
    meta = np.zeros(b.k, dtype=[("c", "<i8"), ("lo", "<f8"), ("hi", "<f8")])
    meta["c"], meta["lo"], meta["hi"] = b.centers, b.d_min, b.d_max
    parts.append(meta.tobytes())
    parts.append(bytes(b.mass_fingerprint).ljust(32, b"\0")[:32])
    if b.generator is None:
        parts.append(b"\0")
    else:
        G = sparse.csc_matrix(b.generator)
        G.sort_indices()
        R = np.eye(b.k) if b.transform is None else b.transform
        parts += [
            b"\1", np.asarray(R, "<f8").tobytes(order="F"),
            struct.pack("<Q", G.nnz), G.indptr.astype("<i8").tobytes(),
            G.indices.astype("<i8").tobytes(), G.data.astype("<f8").tobytes(),
        ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class BasisArchiveError(ValueError):
    pass


def load_basis(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, version, n, k, kind = _HEADER.unpack_from(blob)
    except struct.error:
        raise BasisArchiveError(f"{path}: truncated header") from None
    if magic != MAGIC:
        raise BasisArchiveError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BasisArchiveError(f"{path}: unsupported version {version}")
    kinds = {v: key for key, v in KIND_CODES.items()}
    if kind not in kinds:
        raise BasisArchiveError(f"{path}: unknown basis kind {kind}")
    off = _HEADER.size

    def take(count, dtype):
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(blob):
            raise BasisArchiveError(f"{path}: truncated payload")
        out = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += size
        return out

    U = take(n * k, "<f8").reshape(k, n).T.astype(float)
    mean = take(n * 3, "<f8").reshape(n, 3).astype(float)
    meta = take(k, [("c", "<i8"), ("lo", "<f8"), ("hi", "<f8")])
    fp = bytes(take(32, "u1"))
    has_gen = int(take(1, "u1")[0])
    G = R = None
    if has_gen:
        R = take(k * k, "<f8").reshape(k, k).T.astype(float)
        nnz = int(take(1, "<u8")[0])
        indptr = take(k + 1, "<i8").astype(np.int64)
        indices = take(nnz, "<i8").astype(np.int64)
        data = take(nnz, "<f8").astype(float)
        G = sparse.csc_matrix((data, indices, indptr), shape=(n, k))
    if off != len(blob):
        raise BasisArchiveError(f"{path}: trailing bytes")
    return Basis(
        U=U, mean_shape=mean, kind=kinds[kind], centers=meta["c"].astype(np.int64),
        d_min=meta["lo"].astype(float), d_max=meta["hi"].astype(float),
        mass_fingerprint=fp, generator=G, transform=R,
    )
