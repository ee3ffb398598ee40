# Time the global solve: full sparse factor against reduced dense solves.
# Writes bench.csv, bench.csv.json and bench_wide.csv into demos/out/.
from pathlib import Path

import numpy as np

from pdsnap.bases import build_pca_basis, build_splocs_basis
from pdsnap.bench import run_bench
from pdsnap.mesh import box_tet_mesh, lumped_mass_matrix
from pdsnap.snapshots import center, mass_weight, record
from pdsnap.solver import load_config

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

mesh = box_tet_mesh(20, 8, 8, size=(2.0, 0.8, 0.8))
anchors = np.flatnonzero(mesh.vertices[:, 0] == 0).tolist()
cfg = load_config({"dt": 0.01, "iterations": 5, "frames": 60,
                   "constraints": {"tet_strain": 5e5, "anchors": anchors}})
mass = lumped_mass_matrix(mesh, cfg.density)
X = mass_weight(center(record(mesh, cfg)), mass)

pca = build_pca_basis(X, 50, 2.0, 6.0, mass, mesh)
splocs = build_splocs_basis(X, 50, 2.0, 6.0, 0.1, mass, mesh, outer=2)

report = run_bench(mesh, cfg, [pca, splocs], [10, 25, 50], frames=30, log=print)
report.write_csv(out / "bench.csv")
report.write_wide_csv(out / "bench_wide.csv")
for kind in ("pca", "splocs"):
    print(kind, {k: round(v, 4) for k, v in report.relative(kind).items()})
