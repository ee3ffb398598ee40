# A rigid rotation, snapshotted without any rotation fitting.
# The mean-shape centering leaves the rotation in the data, so the basis has
# to carry it. A full-support basis needs two modes; localized supports need more.
import numpy as np

from pdsnap.bases import build_pca_basis, build_splocs_basis, reconstruction_error
from pdsnap.mesh import box_tet_mesh, lumped_mass_matrix
from pdsnap.snapshots import SnapshotSet, center, mass_weight

mesh = box_tet_mesh(12, 3, 3, size=(2.4, 0.6, 0.6))
mass = lumped_mass_matrix(mesh)
c = mesh.vertices.mean(axis=0)

frames = []
for a in np.linspace(0, np.pi / 2, 20):
    R = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    frames.append((mesh.vertices - c) @ R.T + c)
raw = center(SnapshotSet.from_frames(np.array(frames)))
X = mass_weight(raw, mass)

wide = build_pca_basis(X, 4, 1e6, 2e6, mass, mesh)      # supports cover the whole mesh
local = build_pca_basis(X, 24, 2.0, 6.0, mass, mesh)
sparse = build_splocs_basis(X, 24, 2.0, 6.0, 0.1, mass, mesh)

print("full support, k=%d: %.2e" % (wide.k, reconstruction_error(wide, raw, mass)))
print("local pca,   k=%d: %.2e" % (local.k, reconstruction_error(local, raw, mass)))
print("splocs,      k=%d: %.2e" % (sparse.k, reconstruction_error(sparse, raw, mass)))
