"""Mesh quality, surface accuracy, and point-cloud uniformity measures.

Quality is the longest-to-shortest edge ratio per triangle, 1.0 for the
equilateral ideal.  Accuracy is measured point-to-implicit-surface: each
triangle is sampled at its three vertices and barycenter and the absolute
signed distance is aggregated with area weights.  A structured reference
mesh swept directly from the centerline rings provides an independent
comparison surface for unbranched vessels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateTriangle, HasBifurcation
from .triangulation import TopologyReport, TriangleMesh, topology_check

_QUALITY_BIN_WIDTH = 0.1
_QUALITY_CAP = 5.0


def triangle_quality(tri) -> float:
    """Longest edge over shortest edge of one triangle.

    Parameters
    ----------
    tri : (3, 3) array-like
        Corner positions.

    Returns
    -------
    float
        Edge-length ratio, 1.0 for equilateral triangles.

    Raises
    ------
    DegenerateTriangle
        If the corners span (near-)zero area or a zero-length edge.
    """
    corners = np.asarray(tri, dtype=float).reshape(3, 3)
    edges = np.array([
        np.linalg.norm(corners[1] - corners[0]),
        np.linalg.norm(corners[2] - corners[1]),
        np.linalg.norm(corners[0] - corners[2]),
    ])
    area = 0.5 * np.linalg.norm(np.cross(corners[1] - corners[0],
                                         corners[2] - corners[0]))
    if edges.min() <= 1e-12 or area <= 1e-12:
        raise DegenerateTriangle("quality undefined for degenerate triangle")
    return float(edges.max() / edges.min())


@dataclass
class DistanceStats:
    """Area-weighted distance of mesh samples to the implicit surface."""

    mean: float
    max: float
    rms: float
    sample_count: int


def mesh_surface_distance(mesh: TriangleMesh, tree) -> DistanceStats:
    """Distance statistics between a mesh and the implicit surface.

    Every triangle contributes four samples (three vertices plus the
    barycenter), each weighted by the triangle area; the per-sample
    distance is the absolute implicit signed distance.  A mesh without
    triangles falls back to unweighted statistics over its vertices.
    """
    V = mesh.vertices
    tris = mesh.triangle_array()
    if len(tris) == 0:
        d = np.abs(tree.signed_distances(V))
        return DistanceStats(mean=float(d.mean()), max=float(d.max()),
                             rms=float(np.sqrt((d * d).mean())),
                             sample_count=len(d))
    corners = V[tris]
    areas = 0.5 * np.linalg.norm(
        np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]),
        axis=1)
    bary = corners.mean(axis=1)
    samples = np.concatenate([corners.reshape(-1, 3), bary])
    weights = np.concatenate([np.repeat(areas, 3), areas])
    d = np.abs(tree.signed_distances(samples))
    wsum = float(weights.sum())
    mean = float((weights * d).sum() / wsum)
    rms = float(np.sqrt((weights * d * d).sum() / wsum))
    return DistanceStats(mean=mean, max=float(d.max()), rms=rms,
                         sample_count=len(d))


def uniformity_cv(system) -> float:
    """Coefficient of variation of nearest-neighbor distances.

    Accepts anything with ``positions`` (and optionally a ``kdtree``);
    a bare (N, 3) array works too.  Zero means perfectly even spacing.
    """
    positions = np.asarray(getattr(system, "positions", system), dtype=float)
    if len(positions) < 2:
        raise ValueError("uniformity needs at least two points")
    kdtree = getattr(system, "kdtree", None) or cKDTree(positions)
    dist, _ = kdtree.query(positions, k=2)
    nn = dist[:, 1]
    mean = float(nn.mean())
    if mean == 0.0:
        return 0.0
    return float(nn.std() / mean)


def structured_reference_mesh(vessel) -> TriangleMesh:
    """Sweep a structured ring mesh directly from centerline nodes.

    One ring of k vertices per node, placed at the node's stored radial
    profile in its cross-section frame; consecutive rings are stitched
    with 2k triangles.  Only unbranched vessels are supported.

    Parameters
    ----------
    vessel : Branch or VesselTree
        A tree is accepted when it holds exactly one root branch.

    Raises
    ------
    HasBifurcation
        If the tree has more than one branch or any junction.
    """
    branches = getattr(vessel, "branches", None)
    if branches is not None:
        if len(branches) != 1 or branches[0].parent is not None:
            raise HasBifurcation("reference mesh needs a single branch")
        branch = branches[0]
    else:
        branch = vessel
        if branch.parent is not None:
            raise HasBifurcation("reference mesh needs an unbranched vessel")
    if not branch.has_frames:
        raise ValueError("branch needs cross-section frames")

    n = branch.num_nodes
    k = branch.num_radial_samples
    theta = 2.0 * np.pi * np.arange(k) / k
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    rings = (branch.positions[:, None, :]
             + branch.radii[:, :, None]
             * (cos_t[None, :, None] * branch.frames_u[:, None, :]
                + sin_t[None, :, None] * branch.frames_v[:, None, :]))
    mesh = TriangleMesh(rings.reshape(-1, 3))
    for r in range(n - 1):
        for j in range(k):
            a = r * k + j
            b = r * k + (j + 1) % k
            c = (r + 1) * k + j
            d = (r + 1) * k + (j + 1) % k
            mesh.add_triangle(a, b, d)
            mesh.add_triangle(a, d, c)
    return mesh


def quality_histogram(qualities) -> list[tuple[float, float, int]]:
    """Counts per quality bin of width 0.1 from 1.0, last bin open at 5+."""
    q = np.asarray(qualities, dtype=float)
    edges = np.arange(1.0, _QUALITY_CAP + _QUALITY_BIN_WIDTH / 2,
                      _QUALITY_BIN_WIDTH)
    bins: list[tuple[float, float, int]] = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        bins.append((float(lo), float(hi),
                     int(np.count_nonzero((q >= lo) & (q < hi)))))
    bins.append((_QUALITY_CAP, float("inf"),
                 int(np.count_nonzero(q >= _QUALITY_CAP))))
    return bins


@dataclass
class MeshReport:
    """Full validation summary of one generated mesh."""

    qualities: np.ndarray
    histogram: list[tuple[float, float, int]]
    distance: DistanceStats
    uniformity: float | None
    topology: TopologyReport

    @property
    def mean_quality(self) -> float:
        return float(self.qualities.mean()) if len(self.qualities) else np.nan

    def to_dict(self) -> dict:
        return {
            "triangle_count": int(len(self.qualities)),
            "mean_quality": self.mean_quality,
            "histogram": [[lo, hi, c] for lo, hi, c in self.histogram],
            "distance": {
                "mean": self.distance.mean,
                "max": self.distance.max,
                "rms": self.distance.rms,
                "sample_count": self.distance.sample_count,
            },
            "uniformity_cv": self.uniformity,
            "topology": {
                "nonmanifold_edges": len(self.topology.nonmanifold_edges),
                "boundary_loops": self.topology.boundary_loops,
                "open_chains": self.topology.open_chains,
                "expected_loops": self.topology.expected_loops,
                "euler_characteristic": self.topology.euler_characteristic,
                "orientation_consistent":
                    self.topology.orientation_consistent,
                "intersecting_pairs": len(self.topology.intersecting_pairs),
                "watertight": self.topology.watertight,
            },
        }


def mesh_report(mesh: TriangleMesh, tree, system=None) -> MeshReport:
    """Assemble quality, accuracy, uniformity and topology into one report."""
    V = mesh.vertices
    qualities = np.array([triangle_quality(V[list(t)])
                          for t in mesh.triangles])
    uniform = None
    if system is not None:
        uniform = uniformity_cv(system)
    elif len(V) >= 2:
        uniform = uniformity_cv(V)
    return MeshReport(
        qualities=qualities,
        histogram=quality_histogram(qualities),
        distance=mesh_surface_distance(mesh, tree),
        uniformity=uniform,
        topology=topology_check(mesh, tree),
    )
