"""Snapshot recording, mean-shape centering and mass weighting.

Frames are centred against the per-vertex temporal mean only.  There is
deliberately no rigid (Procrustes) alignment step: rotational motion stays
in the residuals the bases are fitted to.

Archive layout (little endian)::

    b"PDSS" | u32 version | u64 n | u64 T | u8 flags
    f64[n, 3, T] data   (vertex-major)
    f64[n, 3]    mean_shape
    f64[T]       timestamps

plus a JSON sidecar ``<path>.json`` with the same header fields.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .mesh import MassMatrix
from .solver import (
    SolverConfig, assemble_global, build_constraints, initial_state, step,
)

__all__ = [
    "SnapshotSet",
    "SnapshotStateError",
    "ArchiveError",
    "record",
    "center",
    "mass_weight",
    "save",
    "load",
]

MAGIC = b"PDSS"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")
_CENTERED, _WEIGHTED = 1, 2


class SnapshotStateError(RuntimeError):
    """A transformation was applied in the wrong centering/weighting state."""


class ArchiveError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SnapshotSet:
    """Recorded positions, ``data[v, c, t]`` for vertex v, coordinate c, frame t."""

    data: np.ndarray
    mean_shape: np.ndarray
    timestamps: np.ndarray
    centered: bool = False
    mass_weighted: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[1] != 3 or data.shape[2] < 1:
            raise ValueError(f"snapshot data must be (n, 3, T>=1), got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mean_shape", np.asarray(self.mean_shape, float).reshape(-1, 3))
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, float).reshape(-1))
        if len(self.timestamps) != data.shape[2] or len(self.mean_shape) != data.shape[0]:
            raise ValueError("timestamps / mean_shape do not match the data")

    @classmethod
    def from_frames(cls, frames, timestamps=None):
        """Build from a (T, n, 3) stack of positions."""
        frames = np.asarray(frames, float)
        T, n, _ = frames.shape
        ts = np.arange(T, dtype=float) if timestamps is None else timestamps
        return cls(np.ascontiguousarray(frames.transpose(1, 2, 0)), np.zeros((n, 3)), ts)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def T(self):
        return self.data.shape[2]

    def matrix(self):
        """The ``n x 3T`` snapshot matrix (coordinate blocks of T columns)."""
        return self.data.reshape(self.n, 3 * self.T)

    def frames(self):
        """Positions as (T, n, 3)."""
        return self.data.transpose(2, 0, 1)

    def select_frames(self, idx):
        return replace(self, data=self.data[:, :, idx], timestamps=self.timestamps[idx])

    @property
    def norm(self):
        return float(np.linalg.norm(self.data))


def record(mesh, config: SolverConfig, constraints=None, frames=None, stride=None):
    """Run the full solver and keep every ``stride``-th frame.

    Frame 0 is the initial state, so ``frames`` frames with stride ``s``
    give ``ceil(frames / s)`` snapshots.
    """
    from .mesh import lumped_mass_matrix

    frames = config.frames if frames is None else int(frames)
    stride = config.stride if stride is None else int(stride)
    if frames < 1:
        raise ValueError("need at least one frame")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if constraints is None:
        constraints = build_constraints(mesh, config)
    mass = lumped_mass_matrix(mesh, config.density)
    system = assemble_global(mesh, mass, constraints, config.dt)
    state = initial_state(mesh, config)
    keep = list(range(0, frames, stride))
    out = np.empty((mesh.n_vertices, 3, len(keep)))
    j = 0
    for i in range(keep[-1] + 1):
        if i:
            state = step(state, system, constraints, config)
        if i % stride == 0:
            out[:, :, j] = state.q
            j += 1
    ts = np.asarray(keep, float) * config.dt
    return SnapshotSet(out, np.zeros((mesh.n_vertices, 3)), ts)


def center(s: SnapshotSet, force=False):
    """Subtract the per-vertex temporal mean (no rotation fitting)."""
    if s.centered and not force:
        raise SnapshotStateError("snapshots are already centered")
    if s.mass_weighted:
        raise SnapshotStateError("center before mass weighting")
    mean = s.data.mean(axis=2)
    return replace(s, data=s.data - mean[:, :, None], mean_shape=s.mean_shape + mean, centered=True)


def mass_weight(s: SnapshotSet, mass: MassMatrix):
    """Scale every vertex row by ``sqrt(m_v)``."""
    if not s.centered:
        raise SnapshotStateError("mass weighting expects centered snapshots")
    if s.mass_weighted:
        raise SnapshotStateError("snapshots are already mass weighted")
    if mass.n != s.n:
        raise ValueError(f"mass has {mass.n} entries, snapshots have {s.n} vertices")
    return replace(s, data=s.data * mass.sqrt()[:, None, None], mass_weighted=True)


def unweight(s: SnapshotSet, mass: MassMatrix):
    if not s.mass_weighted:
        raise SnapshotStateError("snapshots are not mass weighted")
    return replace(s, data=s.data / mass.sqrt()[:, None, None], mass_weighted=False)


def save(s: SnapshotSet, path):
    flags = (_CENTERED if s.centered else 0) | (_WEIGHTED if s.mass_weighted else 0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, s.n, s.T, flags))
        fh.write(np.ascontiguousarray(s.data, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(s.mean_shape, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(s.timestamps, dtype="<f8").tobytes())
    meta = {
        "format": "PDSS", "version": VERSION, "n": s.n, "T": s.T,
        "centered": s.centered, "mass_weighted": s.mass_weighted,
        "dtype": "float64", "layout": "vertex-major (n, 3, T)",
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ArchiveError(f"{path}: truncated header")
    magic, version, n, T, flags = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ArchiveError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported version {version}")
    sizes = (n * 3 * T, n * 3, T)
    if len(blob) != _HEADER.size + 8 * sum(sizes):
        raise ArchiveError(f"{path}: truncated or oversized payload")
    arr = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    data, mean, ts = np.split(arr, np.cumsum(sizes)[:2])
    return SnapshotSet(
        data.reshape(n, 3, T), mean.reshape(n, 3), ts,
        centered=bool(flags & _CENTERED), mass_weighted=bool(flags & _WEIGHTED),
    )
