"""Watertight triangle meshing of tubular surfaces defined implicitly by
a centerline tree with per-node radial lumen profiles.

The pipeline has three stages: spread particles evenly over the implicit
surface (``relaxation``), connect them into a triangle mesh
(``triangulation``), and validate the result (``metrics``).  ``synthetic``
provides analytic fixtures and ``formats``/``cli`` the file formats and
command-line driver.
"""

from .centerline import (
    BifurcationInfo,
    Branch,
    CenterlineNode,
    ClosestPoint,
    VesselTree,
    build_rmf_frames,
    closest_centerline_point,
    detect_bifurcations,
    implicit_signed_distance,
    radius_along_direction,
    resample_and_spline,
)
from .errors import (
    AxialDirection,
    CoincidentParticles,
    DegenerateBranch,
    DegenerateTriangle,
    EmptyTree,
    HasBifurcation,
    InvalidSpec,
    IoError,
    ParallelSeed,
    ParseError,
    SchemaError,
    TriangulationIncomplete,
    TubeMeshError,
    UnitError,
)
from .relaxation import (
    Particle,
    ParticleSystem,
    RelaxationParams,
    RelaxResult,
    StepStats,
    centerline_force,
    compress_magnitude,
    ideal_compress,
    neighbor_set,
    particle_normal,
    relax,
    relax_step,
    repel_force,
    seed_particles,
    update_balloon_radius,
)
from .metrics import (
    DistanceStats,
    MeshReport,
    mesh_report,
    mesh_surface_distance,
    quality_histogram,
    structured_reference_mesh,
    triangle_quality,
    uniformity_cv,
)
from .synthetic import ShapeSpec, generate
from .triangulation import (
    Neighborhood2D,
    TopologyReport,
    TriangleMesh,
    candidate_valid,
    insert_point,
    min_circumcircle,
    project_neighborhood,
    segments_intersect,
    self_intersections,
    topology_check,
    triangulate,
)

__version__ = "0.1.0"

__all__ = [
    "BifurcationInfo",
    "Branch",
    "CenterlineNode",
    "ClosestPoint",
    "VesselTree",
    "build_rmf_frames",
    "closest_centerline_point",
    "detect_bifurcations",
    "implicit_signed_distance",
    "radius_along_direction",
    "resample_and_spline",
    "Particle",
    "ParticleSystem",
    "RelaxationParams",
    "RelaxResult",
    "StepStats",
    "centerline_force",
    "compress_magnitude",
    "ideal_compress",
    "neighbor_set",
    "particle_normal",
    "relax",
    "relax_step",
    "repel_force",
    "seed_particles",
    "update_balloon_radius",
    "ShapeSpec",
    "generate",
    "DistanceStats",
    "MeshReport",
    "mesh_report",
    "mesh_surface_distance",
    "quality_histogram",
    "structured_reference_mesh",
    "triangle_quality",
    "uniformity_cv",
    "Neighborhood2D",
    "TopologyReport",
    "TriangleMesh",
    "candidate_valid",
    "insert_point",
    "min_circumcircle",
    "project_neighborhood",
    "segments_intersect",
    "self_intersections",
    "topology_check",
    "triangulate",
    "AxialDirection",
    "CoincidentParticles",
    "DegenerateBranch",
    "DegenerateTriangle",
    "EmptyTree",
    "HasBifurcation",
    "InvalidSpec",
    "IoError",
    "ParallelSeed",
    "ParseError",
    "SchemaError",
    "TriangulationIncomplete",
    "TubeMeshError",
    "UnitError",
]
