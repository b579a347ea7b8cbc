"""Wave equation FEM solver with L-inf(L2) a posteriori error bounds."""

from .mesh import (Domain, Forest, Mesh, MeshPairMaps, uniform_mesh, refine,
                   coarsen, pair_maps, overlay)
from .fem import (Coefficient, FeSpace, FeFunction, Field, fe_space,
                  assemble_mass, assemble_stiffness, l2_project,
                  discrete_elliptic, cross_mass, solve_spd, l2_norm,
                  SolverError)

__all__ = [
    "Domain", "Forest", "Mesh", "MeshPairMaps", "uniform_mesh", "refine",
    "coarsen", "pair_maps", "overlay",
    "Coefficient", "FeSpace", "FeFunction", "Field", "fe_space",
    "assemble_mass", "assemble_stiffness", "l2_project", "discrete_elliptic",
    "cross_mass", "solve_spd", "l2_norm", "SolverError",
]
