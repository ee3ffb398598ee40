"""Projective dynamics with snapshot-based reduced subspaces.

The modules follow the pipeline order:

* :mod:`pdsnap.mesh` - meshes, lumped masses, graph distances, file I/O
* :mod:`pdsnap.solver` - full-order local/global projective dynamics
* :mod:`pdsnap.snapshots` - recording, centering and mass weighting
* :mod:`pdsnap.bases` - localized mass-weighted PCA and SPLOCS bases
* :mod:`pdsnap.reduced` - the reduced global step
* :mod:`pdsnap.bench` - global-step timing and trajectory comparison
"""

from .bases import *  # noqa: F401,F403
from .bench import *  # noqa: F401,F403
from .mesh import *  # noqa: F401,F403
from .reduced import *  # noqa: F401,F403
from .snapshots import *  # noqa: F401,F403
from .solver import *  # noqa: F401,F403
from . import bases, bench, mesh, reduced, snapshots, solver

__version__ = "0.1.0"
