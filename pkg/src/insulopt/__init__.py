"""Optimal insulation eigenvalues with a lower film bound: P1 finite elements,
an energy-decreasing flow and convexity-constrained shape descent in 2D."""
from .errors import (
    DegenerateGeometry,
    GradientProbeFailure,
    InfeasibleParams,
    InsuloptError,
    InvalidArgument,
    InvalidDensity,
    InvalidMesh,
    InvalidWeight,
    MeshQualityFailure,
    NoConvergence,
)
from .fem import FESystem, fe_system, smallest_generalized_eig, solve_spd
from .flow import (
    EigenResult,
    FlowParams,
    eigenvalue_no_lower_bound,
    initial_field,
    neumann_mu2,
    robin_reference,
    run_flow,
    solve_eigenvalue,
)
from .geometry import (
    BoundaryGraph,
    ConvexPolygon,
    Mesh,
    boundary_trace,
    convexity_project,
    disk_mesh,
    make_regular_polygon,
    mesh_measures,
    refine,
    triangulate,
)
from .insulation import Density, InsulationParams, compute_c, optimal_density
from .scaling import rescale_params, scaled_eigenvalue
from .shape import ElasticityParams, ShapeParams, ShapeState, optimize

__all__ = [
    "BoundaryGraph", "ConvexPolygon", "DegenerateGeometry", "Density", "EigenResult",
    "ElasticityParams", "FESystem", "FlowParams", "GradientProbeFailure", "InfeasibleParams",
    "InsulationParams", "InsuloptError", "InvalidArgument", "InvalidDensity", "InvalidMesh",
    "InvalidWeight", "Mesh", "MeshQualityFailure", "NoConvergence", "ShapeParams", "ShapeState",
    "boundary_trace", "compute_c", "convexity_project", "disk_mesh", "eigenvalue_no_lower_bound",
    "fe_system", "initial_field", "make_regular_polygon", "mesh_measures", "neumann_mu2",
    "optimal_density", "optimize", "refine", "rescale_params", "robin_reference", "run_flow",
    "scaled_eigenvalue", "smallest_generalized_eig", "solve_eigenvalue", "solve_spd",
    "triangulate",
]
