"""Mesh container, lumped masses, edge-graph distances and geometry I/O.

Supported formats
-----------------
* OBJ  (``v x y z`` / ``f i j k``, 1-based, ASCII)
* tet-pair  (TetGen-style ``.node`` + ``.ele``, 1-based)
* PLY  (ASCII, write and read of vertex/face elements)
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

__all__ = [
    "Mesh",
    "MassMatrix",
    "MeshFormatError",
    "MeshValidationError",
    "load_mesh",
    "lumped_mass_matrix",
    "graph_distances",
    "export_frame",
    "write_tet_pair",
    "box_tet_mesh",
    "tet_volumes",
]

# |signed volume| below this (relative to bbox diagonal cubed) is degenerate
_DEGENERATE_REL_VOL = 1e-14

_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# outward-facing when the tet has positive orientation
_TET_FACES = ((0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3))


class MeshFormatError(ValueError):
    """A geometry file does not parse under its declared format."""

    def __init__(self, path, line, msg):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


class MeshValidationError(ValueError):
    """Parsed mesh violates a structural invariant."""


def tet_volumes(vertices, tets):
    """Signed volumes of tetrahedra, ``det([x1-x0, x2-x0, x3-x0]) / 6``."""
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    x0 = vertices[tets[:, 0]]
    ds = np.stack([vertices[tets[:, i]] - x0 for i in (1, 2, 3)], axis=-1)
    return np.linalg.det(ds) / 6.0


def _triangle_areas(vertices, faces):
    a = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    b = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def _unique_edges(*pair_arrays):
    pairs = np.concatenate([p.reshape(-1, 2) for p in pair_arrays if len(p)], axis=0)
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return np.unique(pairs, axis=0)


def _boundary_faces(tets):
    """Faces referenced by exactly one tet, oriented outward."""
    if len(tets) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    faces = np.concatenate([tets[:, list(f)] for f in _TET_FACES], axis=0)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    keep = counts[inverse] == 1
    # preserve a deterministic order: tet index major, local face minor
    order = np.argsort(
        np.tile(np.arange(len(tets)), len(_TET_FACES)) * 4
        + np.repeat(np.arange(len(_TET_FACES)), len(tets)),
        kind="stable",
    )
    faces = faces[order]
    keep = keep[order]
    return faces[keep]


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simulation domain.

    ``tets`` may be empty (surface mesh) and ``faces`` may be empty (pure
    graph, e.g. for distance tests).  Edges are always derived from the
    elements and deduplicated; extra edges can be passed explicitly.
    For volumetric meshes ``faces`` defaults to the boundary surface.
    """

    vertices: np.ndarray
    tets: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.int64))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.tets, dtype=np.int64).reshape(-1, 4)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        e = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        n = len(v)
        for name, arr in (("tet", t), ("face", f), ("edge", e)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                bad = int(np.nonzero((arr < 0).any(1) | (arr >= n).any(1))[0][0])
                raise MeshValidationError(
                    f"{name} {bad} references a vertex outside [0, {n})"
                )
        if len(t):
            vol = tet_volumes(v, t)
            scale = np.ptp(v, axis=0).max() ** 3 if n else 1.0
            degenerate = np.abs(vol) <= _DEGENERATE_REL_VOL * max(scale, 1e-300)
            if degenerate.any():
                raise MeshValidationError(
                    f"tet {int(np.nonzero(degenerate)[0][0])} is degenerate (zero volume)"
                )
            if len(f) == 0:
                f = _boundary_faces(t)
        tet_pairs = t[:, np.array(_TET_EDGES)].reshape(-1, 2) if len(t) else t[:, :2]
        face_pairs = f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2) if len(f) else f[:, :2]
        e = _unique_edges(tet_pairs, face_pairs, e)
        for name, arr in (("vertices", v), ("tets", t), ("faces", f), ("edges", e)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def is_volumetric(self):
        return len(self.tets) > 0

    def edge_lengths(self, positions=None):
        x = self.vertices if positions is None else positions
        return np.linalg.norm(x[self.edges[:, 1]] - x[self.edges[:, 0]], axis=1)

    @property
    def mean_edge_length(self):
        if len(self.edges) == 0:
            return 1.0
        return float(self.edge_lengths().mean())

    def adjacency(self):
        """Symmetric sparse matrix of Euclidean edge lengths."""
        n = self.n_vertices
        w = self.edge_lengths()
        i, j = self.edges[:, 0], self.edges[:, 1]
        return sparse.csr_matrix(
            (np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(n, n),
        )

    def with_vertices(self, positions):
        """Same connectivity, new coordinates."""
        return Mesh(positions, self.tets, self.faces, self.edges)


@dataclass(frozen=True, eq=False)
class MassMatrix:
    """Lumped (diagonal) mass matrix; ``diag`` holds one mass per vertex."""

    diag: np.ndarray

    def __post_init__(self):
        d = np.array(self.diag, dtype=np.float64).reshape(-1)
        if not np.all(d > 0):
            raise MeshValidationError("every lumped mass must be strictly positive")
        d.setflags(write=False)
        object.__setattr__(self, "diag", d)

    @property
    def n(self):
        return len(self.diag)

    @property
    def total(self):
        return float(self.diag.sum())

    def sqrt(self):
        return np.sqrt(self.diag)

    def matrix(self):
        return sparse.diags(self.diag, format="csc")

    def fingerprint(self):
        """SHA-256 of the little-endian mass payload (32 raw bytes)."""
        import hashlib

        return hashlib.sha256(self.diag.astype("<f8").tobytes()).digest()


def lumped_mass_matrix(mesh, density=1.0):
    """Lump ``density * volume / 4`` (tets) or ``density * area / 3`` (faces)
    onto the element vertices.  Volumetric meshes ignore their faces."""
    if not density > 0:
        raise ValueError(f"density must be positive, got {density!r}")
    n = mesh.n_vertices
    if mesh.is_volumetric:
        share = np.abs(tet_volumes(mesh.vertices, mesh.tets)) / 4.0
        diag = np.bincount(mesh.tets.reshape(-1), weights=np.repeat(share, 4), minlength=n)
    elif len(mesh.faces):
        share = _triangle_areas(mesh.vertices, mesh.faces) / 3.0
        diag = np.bincount(mesh.faces.reshape(-1), weights=np.repeat(share, 3), minlength=n)
    else:
        raise ValueError("mass lumping needs at least one tet or one face")
    if np.any(diag <= 0):
        orphan = int(np.nonzero(diag <= 0)[0][0])
        raise MeshValidationError(f"vertex {orphan} belongs to no element and gets no mass")
    return MassMatrix(density * diag)


def graph_distances(mesh, source, limit=np.inf):
    """Dijkstra distances along mesh edges from ``source``.

    Unreachable vertices (and vertices farther than ``limit``) get ``inf``.
    """
    n = mesh.n_vertices
    if not 0 <= source < n:
        raise IndexError(f"source {source} outside [0, {n})")
    return csgraph.dijkstra(mesh.adjacency(), directed=False, indices=int(source), limit=limit)


# -- I/O -------------------------------------------------------------------


def _data_lines(path):
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _read_obj(path):
    verts, faces = [], []
    for lineno, tok in _data_lines(path):
        try:
            if tok[0] == "v":
                if len(tok) < 4:
                    raise ValueError("vertex needs three coordinates")
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                if len(idx) < 3:
                    raise ValueError("face needs at least three indices")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                faces.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1))
        except ValueError as exc:
            raise MeshFormatError(path, lineno, str(exc)) from None
    if not verts:
        raise MeshFormatError(path, 0, "no vertices")
    return Mesh(np.array(verts), faces=np.array(faces, dtype=np.int64).reshape(-1, 3))


def _read_counted(path, width, header_min):
    it = _data_lines(path)
    try:
        lineno, header = next(it)
    except StopIteration:
        raise MeshFormatError(path, 0, "empty file") from None
    try:
        if len(header) < header_min:
            raise ValueError("short header")
        count = int(header[0])
        rows = []
        for _ in range(count):
            lineno, tok = next(it)
            if len(tok) < width + 1:
                raise ValueError(f"expected {width + 1} fields, got {len(tok)}")
            rows.append(tok[1 : width + 1])
    except StopIteration:
        raise MeshFormatError(path, lineno + 1, "unexpected end of file") from None
    except ValueError as exc:
        raise MeshFormatError(path, lineno, str(exc)) from None
    return rows, lineno


def _read_tet_pair(path):
    base = os.path.splitext(str(path))[0]
    node_path, ele_path = base + ".node", base + ".ele"
    if not os.path.exists(ele_path):
        raise FileNotFoundError(ele_path)
    rows, _ = _read_counted(node_path, 3, 2)
    try:
        verts = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise MeshFormatError(node_path, 1, str(exc)) from None
    rows, _ = _read_counted(ele_path, 4, 2)
    try:
        tets = np.array(rows, dtype=np.int64) - 1
    except ValueError as exc:
        raise MeshFormatError(ele_path, 1, str(exc)) from None
    return Mesh(verts.reshape(-1, 3), tets=tets.reshape(-1, 4))


def _read_ply(path):
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError(path, 1, "missing 'ply' magic")
    nv = nf = None
    body = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            nv = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            nf = int(tok[2])
        elif tok and tok[0] == "format" and tok[1] != "ascii":
            raise MeshFormatError(path, i, "only ASCII PLY is supported")
        elif tok == ["end_header"]:
            body = i
            break
    if body is None or nv is None:
        raise MeshFormatError(path, len(lines), "incomplete header")
    try:
        verts = np.array([lines[body + i].split()[:3] for i in range(nv)], dtype=np.float64)
        faces = []
        for i in range(nf or 0):
            tok = [int(t) for t in lines[body + nv + i].split()]
            idx = tok[1 : 1 + tok[0]]
            faces.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1))
    except (ValueError, IndexError) as exc:
        raise MeshFormatError(path, body + 1, str(exc)) from None
    return Mesh(verts, faces=np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path, format=None):
    """Read a mesh.

    Parameters
    ----------
    path : path-like
        ``.obj``, ``.ply`` or either file of a ``.node``/``.ele`` pair.
    format : {"obj", "tet-pair", "ply"}, optional
        Inferred from the extension when omitted.
    """
    path = Path(path)
    if format is None:
        format = {
            ".obj": "obj", ".ply": "ply", ".node": "tet-pair", ".ele": "tet-pair"
        }.get(path.suffix.lower())
    if format == "tet-pair":
        return _read_tet_pair(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if format == "obj":
        return _read_obj(path)
    if format == "ply":
        return _read_ply(path)
    raise ValueError(f"unknown mesh format for {path} ({format!r})")


def _fmt(x):
    return "%.17g" % x


def export_frame(mesh, positions, path, format="obj"):
    """Write ``positions`` with the mesh's surface connectivity.

    Output is byte-deterministic: coordinates use 17 significant digits.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (mesh.n_vertices, 3):
        raise ValueError(
            f"positions have shape {positions.shape}, mesh needs ({mesh.n_vertices}, 3)"
        )
    out = []
    if format == "obj":
        out.extend("v %s %s %s" % tuple(map(_fmt, p)) for p in positions)
        out.extend("f %d %d %d" % tuple(f + 1) for f in mesh.faces)
    elif format == "ply":
        out += [
            "ply", "format ascii 1.0",
            f"element vertex {mesh.n_vertices}",
            "property double x", "property double y", "property double z",
            f"element face {len(mesh.faces)}",
            "property list uchar int vertex_indices", "end_header",
        ]
        out.extend("%s %s %s" % tuple(map(_fmt, p)) for p in positions)
        out.extend("3 %d %d %d" % tuple(f) for f in mesh.faces)
    else:
        raise ValueError(f"unsupported export format {format!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")


def write_tet_pair(mesh, base):
    """Write ``base.node`` / ``base.ele`` (1-based)."""
    base = os.path.splitext(str(base))[0]
    with open(base + ".node", "w", newline="\n") as fh:
        fh.write(f"{mesh.n_vertices} 3 0 0\n")
        for i, p in enumerate(mesh.vertices, start=1):
            fh.write("%d %s %s %s\n" % (i, *map(_fmt, p)))
    with open(base + ".ele", "w", newline="\n") as fh:
        fh.write(f"{len(mesh.tets)} 4 0\n")
        for i, t in enumerate(mesh.tets, start=1):
            fh.write("%d %d %d %d %d\n" % (i, *(t + 1)))
    return base + ".node"


def box_tet_mesh(nx, ny, nz, size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Regular grid of ``nx*ny*nz`` cells, each split into 6 positively
    oriented tets sharing the cell's main diagonal."""
    gx, gy, gz = (np.linspace(o, o + s, m + 1) for o, s, m in zip(origin, size, (nx, ny, nz)))
    X, Y, Z = np.meshgrid(gx, gy, gz, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    idx = np.arange(len(verts)).reshape(nx + 1, ny + 1, nz + 1)
    c = [idx[i : i + nx, j : j + ny, k : k + nz].ravel()
         for k in (0, 1) for j in (0, 1) for i in (0, 1)]
    # corners: bit0 -> +x, bit1 -> +y, bit2 -> +z; every path 0 -> 7 is one tet
    paths = ((1, 3), (1, 5), (2, 3), (2, 6), (4, 5), (4, 6))
    tets = []
    for a, b in paths:
        t = np.column_stack([c[0], c[a], c[b], c[7]])
        tets.append(t)
    tets = np.concatenate(tets)
    vol = tet_volumes(verts, tets)
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return Mesh(verts, tets=tets)
