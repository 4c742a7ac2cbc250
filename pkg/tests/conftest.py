"""Shared fixtures: analytic trees, plane clouds, and meshing oracles."""

import warnings
from collections import deque
from itertools import combinations

import numpy as np
import pytest
from scipy.spatial import cKDTree

from tubemesh.centerline import Branch, VesselTree, build_rmf_frames
from tubemesh.errors import TriangulationIncomplete
from tubemesh.relaxation import RelaxationParams, relax, seed_particles
from tubemesh.synthetic import ShapeSpec, generate
from tubemesh.triangulation import TriangleMesh, insert_point, triangulate


def straight_branch(length=10.0, spacing=1.0, radius=1.0, k=16, axis=None,
                    origin=None, parent=None):
    """Straight branch with constant radii, explicit x/y frames when axis=z."""
    axis = np.array([0.0, 0.0, 1.0]) if axis is None else np.asarray(axis, float)
    origin = np.zeros(3) if origin is None else np.asarray(origin, float)
    n = int(round(length / spacing)) + 1
    s = np.linspace(0.0, length, n)
    positions = origin + s[:, None] * axis
    radii = np.full((n, k), radius)
    br = Branch(positions, radii, spacing=length / (n - 1), parent=parent)
    return build_rmf_frames(br, np.array([1.0, 0.0, 0.0])
                            if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0]))


@pytest.fixture
def tube_tree():
    """Straight z-axis tube, r = 1, L = 10, spacing 1, k = 16."""
    return VesselTree([straight_branch()])


@pytest.fixture
def y_tree():
    """Default y-bifurcation fixture (deterministic seed)."""
    return generate(ShapeSpec("y_bifurcation"), seed=11)


@pytest.fixture
def curved_tree():
    return generate(ShapeSpec("curved_tube"), seed=11)


def brute_force_closest(tree, p, samples=10000):
    """Independent dense-sampling search over every branch spline."""
    best = (np.inf, None, None)
    for bid, br in enumerate(tree.branches):
        ts = np.linspace(0.0, br.total_length, samples)
        pts = br.spline(ts)
        d = np.linalg.norm(pts - np.asarray(p, float), axis=1)
        i = int(np.argmin(d))
        if d[i] < best[0]:
            best = (float(d[i]), bid, float(ts[i]))
    return best


class PlaneCloud:
    """Coplanar point cloud with +z normals, quacking like a system."""

    def __init__(self, xy, z=0.0):
        xy = np.asarray(xy, dtype=float)
        self.positions = np.column_stack([xy, np.full(len(xy), z)])
        self.normals = np.tile([0.0, 0.0, 1.0], (len(xy), 1))
        self.kdtree = cKDTree(self.positions)


def incremental_plane_mesh(xy):
    """Drain the insertion queue over a coplanar cloud, full neighborhood."""
    cloud = PlaneCloud(xy)
    mesh = TriangleMesh(cloud.positions.copy(), cloud.normals.copy())
    queue = deque([0])
    seen = {0}
    while queue:
        insert_point(cloud, mesh, queue, queue.popleft(),
                     neighbor_count=len(xy), seen=seen)
    return mesh


def _triple_circles(xy):
    """Circumcenter, radius and |2*twice_area| for every index triple."""
    t = np.array(list(combinations(range(len(xy)), 3)), dtype=np.int64)
    a, b, c = xy[t[:, 0]], xy[t[:, 1]], xy[t[:, 2]]
    d = 2.0 * (a[:, 0] * (b[:, 1] - c[:, 1])
               + b[:, 0] * (c[:, 1] - a[:, 1])
               + c[:, 0] * (a[:, 1] - b[:, 1]))
    a2 = (a * a).sum(axis=1)
    b2 = (b * b).sum(axis=1)
    c2 = (c * c).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = (a2 * (b[:, 1] - c[:, 1]) + b2 * (c[:, 1] - a[:, 1])
              + c2 * (a[:, 1] - b[:, 1])) / d
        uy = (a2 * (c[:, 0] - b[:, 0]) + b2 * (a[:, 0] - c[:, 0])
              + c2 * (b[:, 0] - a[:, 0])) / d
    r = np.hypot(ux - a[:, 0], uy - a[:, 1])
    return t, np.column_stack([ux, uy]), r, np.abs(d)


def _corner_masked_distances(xy, t, centers):
    dist = np.hypot(centers[:, 0, None] - xy[None, :, 0],
                    centers[:, 1, None] - xy[None, :, 1])
    dist[np.arange(len(t))[:, None], t] = np.inf
    return dist


def brute_force_delaunay(xy):
    """Empty-circumcircle triangulation by O(n^4) enumeration."""
    xy = np.asarray(xy, dtype=float)
    t, centers, r, absd = _triple_circles(xy)
    dist = _corner_masked_distances(xy, t, centers)
    keep = (absd > 1e-12) & (dist.min(axis=1) >= r)
    return {frozenset(map(int, tri)) for tri in t[keep]}


def general_position_points(rng, n, min_gap=0.01, band=1e-7, area_min=1e-7):
    """Random unit-square points with no near-degenerate triple and no
    point within ``band`` of any triple's circumcircle, so every
    tolerance choice below ``band`` yields the same triangulation."""
    while True:
        xy = rng.uniform(0.0, 1.0, (n, 2))
        dm = np.linalg.norm(xy[:, None] - xy[None, :], axis=2)
        np.fill_diagonal(dm, np.inf)
        if dm.min() < min_gap:
            continue
        t, centers, r, absd = _triple_circles(xy)
        if absd.min() / 2.0 < area_min:
            continue
        dist = _corner_masked_distances(xy, t, centers)
        if np.any(np.abs(dist - r[:, None]) < band):
            continue
        return xy


_SHAPE_CACHE = {}


def meshed_shape(kind, *, length=20.0, radius=1.0, density=16.0,
                 tree_seed=3, seed=7):
    """Relax and triangulate one synthetic shape, cached for the session."""
    key = (kind, length, radius, density, tree_seed, seed)
    if key not in _SHAPE_CACHE:
        tree = generate(ShapeSpec(kind, length=length, radius=radius),
                        seed=tree_seed)
        system = seed_particles(tree, density=density, seed=seed)
        result = relax(system, RelaxationParams())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TriangulationIncomplete)
            mesh = triangulate(result.system)
        _SHAPE_CACHE[key] = (tree, result, mesh)
    return _SHAPE_CACHE[key]
