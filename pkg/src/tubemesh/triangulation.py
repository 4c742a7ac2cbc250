"""Incremental surface triangulation of a relaxed particle cloud.

Each particle taken off the work queue projects its nearest neighbors
onto its tangent plane and tries to grow triangles around itself there,
most compact candidates first.  A candidate is accepted when its edges
cross no existing triangle edge and its circumcircle is empty, where
points already walled off behind existing triangles do not count as
violations.  Accepted triangles enqueue their new vertices, so the
front sweeps the whole cloud from a single seed.  A completion sweep
then re-processes vertices on boundary edges that are not part of a
tube-end rim with a doubled neighborhood, closing occasional holes the
first pass leaves.

All 2D predicates share a tolerance of 1e-9 times the neighborhood
diameter; exact arithmetic is a documented non-goal.
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateTriangle, TriangulationIncomplete

logger = logging.getLogger(__name__)

_AREA_EPS = 1e-12
_PRED_EPS_SCALE = 1e-9
_MAX_ELEVATION_SIN = 0.94  # sin of ~70 degrees
_MIN_NORMAL_DOT = -0.5


class TriangleMesh:
    """Indexed triangle mesh with an edge-to-triangle incidence map.

    Triangles are stored as oriented index triples.  ``add_triangle``
    maintains the edge map, rejects duplicates of an existing triangle
    (any vertex order) and degenerate faces.  ``defects`` lists boundary
    edges the triangulation could not close; an empty list means the
    mesh is complete.
    """

    def __init__(self, vertices, normals=None):
        self.vertices = np.asarray(vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        self.normals = None if normals is None else np.asarray(normals, float)
        self.triangles: list[tuple[int, int, int]] = []
        self.edge_map: dict[tuple[int, int], list[int]] = {}
        self.vertex_tris: dict[int, list[int]] = {}
        self._tri_keys: set[frozenset] = set()
        self.defects: list[tuple[int, int]] = []

    @property
    def is_complete(self) -> bool:
        return not self.defects

    def has_triangle(self, a: int, b: int, c: int) -> bool:
        return frozenset((a, b, c)) in self._tri_keys

    def triangle_area(self, a: int, b: int, c: int) -> float:
        v = self.vertices
        return 0.5 * float(np.linalg.norm(np.cross(v[b] - v[a], v[c] - v[a])))

    def add_triangle(self, a: int, b: int, c: int) -> int:
        """Append an oriented triangle, returning its index.

        Raises
        ------
        DegenerateTriangle
            If the corners coincide or span area of 1e-12 mm2 or less.
        ValueError
            If an index is out of range or the triangle already exists.
        """
        n = len(self.vertices)
        if len({a, b, c}) != 3:
            raise DegenerateTriangle("repeated vertex index")
        if not all(0 <= v < n for v in (a, b, c)):
            raise ValueError("vertex index out of range")
        key = frozenset((a, b, c))
        if key in self._tri_keys:
            raise ValueError("duplicate triangle")
        if self.triangle_area(a, b, c) <= _AREA_EPS:
            raise DegenerateTriangle("triangle area below 1e-12")
        idx = len(self.triangles)
        self.triangles.append((a, b, c))
        self._tri_keys.add(key)
        for u, v in ((a, b), (b, c), (c, a)):
            self.edge_map.setdefault((min(u, v), max(u, v)), []).append(idx)
        for v in (a, b, c):
            self.vertex_tris.setdefault(v, []).append(idx)
        return idx

    def boundary_edges(self) -> list[tuple[int, int]]:
        """Edges incident to exactly one triangle, in sorted order."""
        return sorted(e for e, tris in self.edge_map.items()
                      if len(tris) == 1)

    def remove_triangles(self, indices) -> None:
        """Drop the given triangle indices and rebuild the incidence maps.

        Remaining triangles are renumbered densely in their original
        order.
        """
        drop = set(int(t) for t in indices)
        keep = [tri for t, tri in enumerate(self.triangles) if t not in drop]
        self.triangles = []
        self.edge_map = {}
        self.vertex_tris = {}
        self._tri_keys = set()
        for tri in keep:
            self.add_triangle(*tri)

    def triangle_array(self) -> np.ndarray:
        return np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)


@dataclass
class Neighborhood2D:
    """Tangent-plane projection of one particle's neighborhood.

    ``members[0]`` is the center particle itself at the 2D origin; the
    rest are its nearest neighbors ordered by distance.  ``t_exist``
    holds the mesh triangles whose three vertices all lie in the
    neighborhood; it is kept live while triangles are accepted.
    ``usable`` masks out members seen at near-grazing elevation, whose
    projected positions are too distorted to vote on candidates.
    """

    center: int
    members: np.ndarray
    xy: np.ndarray
    t_exist: list[tuple[int, int, int]]
    eps: float
    local: dict[int, int] = field(default_factory=dict)
    usable: np.ndarray | None = None
    _edges: np.ndarray | None = None

    def __post_init__(self):
        if not self.local:
            self.local = {int(g): j for j, g in enumerate(self.members)}
        if self.usable is None:
            self.usable = np.ones(len(self.members), dtype=bool)

    def edge_array(self) -> np.ndarray:
        """(E, 4) rows (x1, y1, x2, y2) of every existing triangle edge."""
        if self._edges is None:
            rows = []
            for a, b, c in self.t_exist:
                la, lb, lc = self.local[a], self.local[b], self.local[c]
                for u, v in ((la, lb), (lb, lc), (lc, la)):
                    rows.append((self.xy[u, 0], self.xy[u, 1],
                                 self.xy[v, 0], self.xy[v, 1]))
            self._edges = np.asarray(rows, float).reshape(-1, 4)
        return self._edges

    def add_existing(self, tri: tuple[int, int, int]) -> None:
        self.t_exist.append(tri)
        self._edges = None


def project_neighborhood(system, mesh: TriangleMesh, i: int,
                         neighbor_count: int = 25) -> Neighborhood2D:
    """Project particle i's neighborhood onto its tangent plane.

    The 2D basis derives deterministically from the normal: the
    coordinate axis with the smallest normal component is crossed with
    the normal for the first direction, the normal with that for the
    second.  The projection drops the normal component, so in-plane
    neighborhoods keep their pairwise distances.

    Parameters
    ----------
    system : object
        Needs ``positions``, ``normals`` and a ``kdtree`` over the
        positions; a relaxed particle system qualifies.
    mesh : TriangleMesh
        Source of the existing triangles in the neighborhood.
    i : int
        Center particle index.
    neighbor_count : int
        Number of nearest neighbors to include.
    """
    pos = system.positions
    n_i = system.normals[i]
    k = min(neighbor_count + 1, len(pos))
    _, idx = system.kdtree.query(pos[i], k=k)
    idx = np.atleast_1d(idx)
    neighbors = idx[idx != i][:neighbor_count]
    members = np.concatenate(([i], neighbors)).astype(np.int64)

    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n_i)))] = 1.0
    u = np.cross(axis, n_i)
    u /= np.linalg.norm(u)
    v = np.cross(n_i, u)

    q = pos[members] - pos[i]
    xy = np.column_stack([q @ u, q @ v])
    xy[0] = 0.0
    # members seen at more than ~70 degrees above the tangent plane
    # project so foreshortened that their 2D positions are meaningless;
    # members with opposed normals are the facing wall of a narrow gap
    # and belong to a different surface sheet
    dist = np.linalg.norm(q, axis=1)
    height = np.abs(q @ n_i)
    usable = height <= _MAX_ELEVATION_SIN * np.maximum(dist, 1e-300)
    if system.normals is not None:
        usable &= system.normals[members] @ n_i >= _MIN_NORMAL_DOT
    usable[0] = True

    member_set = set(int(m) for m in members)
    cand: set[int] = set()
    for m in members:
        cand.update(mesh.vertex_tris.get(int(m), ()))
    t_exist = [mesh.triangles[t] for t in sorted(cand)
               if all(w in member_set for w in mesh.triangles[t])]

    diameter = 2.0 * float(np.max(np.linalg.norm(xy, axis=1), initial=0.0))
    return Neighborhood2D(center=i, members=members, xy=xy,
                          t_exist=t_exist,
                          eps=_PRED_EPS_SCALE * max(diameter, 1e-30),
                          usable=usable)


def min_circumcircle(a, b, c) -> tuple[np.ndarray, float]:
    """Circumscribed circle of a 2D triangle as (center, radius).

    Raises
    ------
    DegenerateTriangle
        If the points are collinear (twice-area of 1e-12 or less).
    """
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    cx, cy = float(c[0]), float(c[1])
    twice_area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if abs(twice_area) <= _AREA_EPS:
        raise DegenerateTriangle("collinear points have no circumcircle")
    d = 2.0 * twice_area
    a2 = ax * ax + ay * ay
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    center = np.array([ux, uy])
    return center, float(np.hypot(ux - ax, uy - ay))


def _sign_band(x, band):
    return np.where(x > band, 1, np.where(x < -band, -1, 0))


def segments_intersect(a, b, c, d, eps: float = 1e-9) -> bool:
    """Whether the open segments (a, b) and (c, d) intersect.

    True on a proper crossing or a collinear overlap of positive
    length.  Touching at shared endpoints does not count, and neither
    does an identical pair of segments: adjacent triangles legitimately
    reuse each other's edges.  ``eps`` is the length tolerance below
    which points coincide and orientations count as collinear.
    """
    return bool(_segment_vs_many(np.asarray(a, float), np.asarray(b, float),
                                 np.asarray([[c[0], c[1], d[0], d[1]]],
                                            float), eps)[0])


def _segment_vs_many(p, q, edges, eps):
    """Vectorized open-segment intersection of (p, q) against (E, 4) rows."""
    if len(edges) == 0:
        return np.zeros(0, dtype=bool)
    c = edges[:, 0:2]
    d = edges[:, 2:4]
    pq = q - p
    cd = d - c
    len_pq = np.hypot(pq[0], pq[1])
    len_cd = np.hypot(cd[:, 0], cd[:, 1])

    o1 = pq[0] * (c[:, 1] - p[1]) - pq[1] * (c[:, 0] - p[0])
    o2 = pq[0] * (d[:, 1] - p[1]) - pq[1] * (d[:, 0] - p[0])
    o3 = cd[:, 0] * (p[1] - c[:, 1]) - cd[:, 1] * (p[0] - c[:, 0])
    o4 = cd[:, 0] * (q[1] - c[:, 1]) - cd[:, 1] * (q[0] - c[:, 0])
    s1 = _sign_band(o1, eps * len_pq)
    s2 = _sign_band(o2, eps * len_pq)
    s3 = _sign_band(o3, eps * len_cd)
    s4 = _sign_band(o4, eps * len_cd)
    proper = (s1 * s2 == -1) & (s3 * s4 == -1)

    collinear = (s1 == 0) & (s2 == 0) & (s3 == 0) & (s4 == 0)
    overlap = np.zeros(len(edges), dtype=bool)
    if np.any(collinear) and len_pq > eps:
        axis = pq / len_pq
        t_lo, t_hi = 0.0, len_pq
        tc = (c - p) @ axis
        td = (d - p) @ axis
        lo = np.minimum(tc, td)
        hi = np.maximum(tc, td)
        length = np.minimum(hi, t_hi) - np.maximum(lo, t_lo)
        same = (((np.hypot(*(c - p).T) <= eps) & (np.hypot(*(d - q).T) <= eps))
                | ((np.hypot(*(c - q).T) <= eps)
                   & (np.hypot(*(d - p).T) <= eps)))
        overlap = collinear & (length > eps) & ~same
    return proper | overlap


def _triangle_blocked(nbhd, la, lb, lc):
    """Whether any edge of the local-index triangle crosses an existing
    triangle edge."""
    edges = nbhd.edge_array()
    if len(edges) == 0:
        return False
    xy = nbhd.xy
    for u, w in ((la, lb), (lb, lc), (lc, la)):
        if np.any(_segment_vs_many(xy[u], xy[w], edges, nbhd.eps)):
            return True
    return False


def candidate_valid(nbhd: Neighborhood2D, k1: int, k2: int,
                    mesh: TriangleMesh | None = None) -> bool:
    """Whether the triangle (center, k1, k2) may be accepted.

    Rejects candidates whose edges cross an existing triangle edge,
    duplicates of existing triangles, and empty-circumcircle violations.
    A neighborhood point inside the circumcircle only counts as a
    violation when at least one of the three triangles it forms with the
    candidate's vertices is not itself blocked by existing edges: a
    point fully walled off behind the current surface belongs to another
    sheet and is ignored.
    """
    i = nbhd.center
    l1 = nbhd.local.get(int(k1))
    l2 = nbhd.local.get(int(k2))
    if l1 is None or l2 is None or l1 == 0 or l2 == 0 or l1 == l2:
        return False
    if not (nbhd.usable[l1] and nbhd.usable[l2]):
        return False
    if mesh is not None:
        if mesh.has_triangle(i, int(k1), int(k2)):
            return False
        # existing edges stay manifold: a second triangle may reuse an
        # edge, a third may not
        for u, v in ((i, int(k1)), (i, int(k2)), (int(k1), int(k2))):
            if len(mesh.edge_map.get((min(u, v), max(u, v)), ())) >= 2:
                return False
    xy = nbhd.xy
    a, b, c = xy[0], xy[l1], xy[l2]
    twice_area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if abs(twice_area) <= max(_AREA_EPS, nbhd.eps * np.hypot(*(b - a))):
        return False
    if _triangle_blocked(nbhd, 0, l1, l2):
        return False

    center, radius = min_circumcircle(a, b, c)
    inside = np.hypot(xy[:, 0] - center[0],
                      xy[:, 1] - center[1]) < radius - nbhd.eps
    inside &= nbhd.usable
    inside[[0, l1, l2]] = False
    for lt in np.nonzero(inside)[0]:
        # a point under the candidate itself can never be walled off:
        # accepting would roof over it and strand its star
        if _point_in_triangle(xy[lt], a, b, c, nbhd.eps):
            return False
        for tri in ((lt, l1, l2), (lt, 0, l1), (lt, 0, l2)):
            if mesh is not None and _unbuildable(nbhd, mesh, tri):
                continue
            if not _triangle_blocked(nbhd, *tri):
                return False
    return True


def _point_in_triangle(p, a, b, c, eps) -> bool:
    """Whether 2D point p lies inside triangle (a, b, c), edges included
    up to the eps band."""
    s1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    s2 = (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])
    s3 = (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])
    scale = eps * max(np.hypot(b[0] - a[0], b[1] - a[1]),
                      np.hypot(c[0] - b[0], c[1] - b[1]),
                      np.hypot(a[0] - c[0], a[1] - c[1]))
    return bool((s1 >= -scale and s2 >= -scale and s3 >= -scale)
                or (s1 <= scale and s2 <= scale and s3 <= scale))


def _unbuildable(nbhd, mesh, tri):
    """Whether the local-index triangle can never be added to the mesh.

    An in-circle point is only a real violation when a better triangle
    through it could still be built; one that already exists or would
    overload an edge that carries two triangles is not evidence against
    the candidate.
    """
    ga, gb, gc = (int(nbhd.members[t]) for t in tri)
    if mesh.has_triangle(ga, gb, gc):
        return True
    for u, v in ((ga, gb), (gb, gc), (gc, ga)):
        if len(mesh.edge_map.get((min(u, v), max(u, v)), ())) >= 2:
            return True
    return False


def _pair_circumradii(xy):
    """Circumradius of (origin, A, B) for every unordered neighbor pair.

    Returns (first, second, radius) arrays over local indices 1..m;
    collinear pairs get radius inf.
    """
    m = len(xy) - 1
    if m < 2:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    ia, ib = np.triu_indices(m, 1)
    ia = ia + 1
    ib = ib + 1
    A = xy[ia]
    B = xy[ib]
    det = A[:, 0] * B[:, 1] - A[:, 1] * B[:, 0]
    a2 = (A * A).sum(axis=1)
    b2 = (B * B).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ox = (a2 * B[:, 1] - b2 * A[:, 1]) / (2.0 * det)
        oy = (b2 * A[:, 0] - a2 * B[:, 0]) / (2.0 * det)
        r = np.hypot(ox, oy)
    r[np.abs(det) <= _AREA_EPS] = np.inf
    return ia, ib, r


_NORMAL_AGREE_COS = 0.866  # cos of 30 degrees
_TANGENT_HEIGHT_FRACTION = 0.35
_BARY_SD_FRACTION = 0.65


def _off_surface_test(system):
    """Barycenter fidelity test for creased regions, or None.

    A triangle whose corners agree in normal and stay near each other's
    tangent planes hugs a locally smooth surface and is accepted
    outright.  Any other candidate may chord across a concave crease or
    dip through the lumen, so its barycenter is checked against the
    implicit surface and the candidate is rejected when it strays
    beyond a fraction of the target spacing.
    """
    tree = getattr(system, "tree", None)
    spacing = getattr(system, "target_spacing", None)
    if tree is None or spacing is None:
        return None
    normals = system.normals
    positions = system.positions
    tol = _BARY_SD_FRACTION * spacing
    height_cap = _TANGENT_HEIGHT_FRACTION * spacing

    def test(i, k1, k2):
        n = (normals[i], normals[k1], normals[k2])
        p = (positions[i], positions[k1], positions[k2])
        flat = (n[0] @ n[1] >= _NORMAL_AGREE_COS
                and n[0] @ n[2] >= _NORMAL_AGREE_COS
                and n[1] @ n[2] >= _NORMAL_AGREE_COS)
        if flat:
            flat = all(abs((p[a] - p[b]) @ n[b]) <= height_cap
                       for a in range(3) for b in range(3) if a != b)
        if flat:
            return False
        bary = (p[0] + p[1] + p[2]) / 3.0
        sd = float(tree.signed_distances(bary[None, :])[0])
        return abs(sd) > tol

    return test


def _fan_state(mesh, i):
    """Edge-use counts of the triangles currently incident to i."""
    counts: dict[int, int] = {}
    for t in mesh.vertex_tris.get(i, ()):
        a, b, c = mesh.triangles[t]
        for v in (a, b, c):
            if v != i:
                counts[v] = counts.get(v, 0) + 1
    return counts


def _fan_closed(counts):
    return len(counts) >= 3 and all(c == 2 for c in counts.values())


def insert_point(system, mesh: TriangleMesh, queue: deque, i: int,
                 neighbor_count: int = 25,
                 seen: set | None = None) -> list[tuple[int, int, int]]:
    """Grow accepted triangles around particle i.

    Candidate pairs are processed by ascending circumradius (ties broken
    by vertex indices) against the live set of existing triangles, so
    triangles accepted early constrain later candidates within the same
    call.  Accepted triangles are oriented so their normal points along
    the particle normal, and their far vertices are enqueued when not
    yet seen.  Processing stops once the triangles around i close into
    a full fan.
    """
    fan = _fan_state(mesh, i)
    if _fan_closed(fan):
        return []
    nbhd = project_neighborhood(system, mesh, i, neighbor_count)
    ia, ib, radii = _pair_circumradii(nbhd.xy)
    if len(radii) == 0:
        return []
    radii[~(nbhd.usable[ia] & nbhd.usable[ib])] = np.inf
    g1 = np.minimum(nbhd.members[ia], nbhd.members[ib])
    g2 = np.maximum(nbhd.members[ia], nbhd.members[ib])
    order = np.lexsort((g2, g1, radii))

    spacing = getattr(system, "target_spacing", None)
    r3_cap = np.inf if spacing is None else 2.0 * spacing
    off_surface = _off_surface_test(system)
    accepted = []
    xy = nbhd.xy
    pos = system.positions
    for o in order:
        if not np.isfinite(radii[o]):
            break
        l1, l2 = int(ia[o]), int(ib[o])
        k1, k2 = int(nbhd.members[l1]), int(nbhd.members[l2])
        if np.isfinite(r3_cap):
            corners = np.vstack([pos[i], pos[k1], pos[k2]])
            if _circumradius3(corners, 0, 1, 2) > r3_cap:
                continue
        if not candidate_valid(nbhd, k1, k2, mesh):
            continue
        if off_surface is not None and off_surface(i, k1, k2):
            continue
        # orientation: meshed edges force it by opposition; free
        # triangles fall back to the signed 2D area, which matches the
        # sign of the 3D normal dotted with the particle normal
        constrained = any(
            mesh.edge_map.get((min(u, v), max(u, v)))
            for u, v in ((i, k1), (i, k2), (k1, k2)))
        if constrained:
            tri = _oriented_fill(mesh, i, k1, k2)
            if tri is None:
                continue
        else:
            signed = xy[l1, 0] * xy[l2, 1] - xy[l1, 1] * xy[l2, 0]
            tri = (i, k1, k2) if signed > 0.0 else (i, k2, k1)
        try:
            mesh.add_triangle(*tri)
        except DegenerateTriangle:
            continue
        nbhd.add_existing(tri)
        accepted.append(tri)
        for v in (k1, k2):
            fan[v] = fan.get(v, 0) + 1
            if seen is None or v not in seen:
                queue.append(v)
                if seen is not None:
                    seen.add(v)
        if _fan_closed(fan):
            break
    return accepted


def _directed_edge_in(tri, u, v) -> bool:
    a, b, c = tri
    return (a, b) == (u, v) or (b, c) == (u, v) or (c, a) == (u, v)


def _oriented_fill(mesh, u, v, w):
    """Vertex order for triangle {u, v, w} that traverses every meshed
    edge opposite to its existing triangle, or None if no order can."""
    for order in ((u, v, w), (v, u, w)):
        ok = True
        for k in range(3):
            e0, e1 = order[k], order[(k + 1) % 3]
            key = (min(e0, e1), max(e0, e1))
            for t in mesh.edge_map.get(key, ()):
                if _directed_edge_in(mesh.triangles[t], e0, e1):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return order
    return None


def _tri_crosses_mesh(mesh, tri) -> bool:
    """True if triangle ``tri`` intersects any non-adjacent mesh triangle."""
    tris = mesh.triangle_array()
    if len(tris) == 0:
        return False
    V = mesh.vertices
    cand = V[list(tri)]
    c0 = cand.mean(axis=0)
    r0 = float(np.linalg.norm(cand - c0, axis=1).max())
    corners = V[tris]
    centroids = corners.mean(axis=1)
    rad = np.linalg.norm(corners - centroids[:, None, :], axis=2).max(axis=1)
    span = V.max(axis=0) - V.min(axis=0)
    eps = _PRED_EPS_SCALE * max(float(np.linalg.norm(span)), 1e-30)
    near = np.flatnonzero(np.linalg.norm(centroids - c0, axis=1) <= rad + r0)
    ts = set(tri)
    for b in near:
        if ts & set(tris[b]):
            continue
        if _tri_tri_intersect(cand, corners[b], eps):
            return True
    return False


def _fill_triangle_holes(mesh, rim) -> int:
    """Ear-fill residual three-edge holes, ignoring the ban list.

    A hole that is exactly a 3-cycle has a unique fill.  Banned triples
    get a second chance here because the crossing partner that doomed
    them may itself be gone by now; the fill is accepted only if it
    stays manifold, takes a consistent orientation, and crosses nothing.
    """
    added = 0
    while True:
        adj: dict[int, set[int]] = {}
        for u, v in mesh.boundary_edges():
            if rim[u] and rim[v]:
                continue
            adj.setdefault(u, set()).add(v)
            adj.setdefault(v, set()).add(u)
        progress = False
        for u in sorted(adj):
            for v in sorted(adj[u]):
                for w in sorted(adj[u] & adj.get(v, set())):
                    if w == u or w == v or mesh.has_triangle(u, v, w):
                        continue
                    if any(len(mesh.edge_map.get((min(a, b), max(a, b)),
                                                 ())) != 1
                           for a, b in ((u, v), (u, w), (v, w))):
                        continue
                    order = _oriented_fill(mesh, u, v, w)
                    if order is None or _tri_crosses_mesh(mesh, order):
                        continue
                    try:
                        mesh.add_triangle(*order)
                    except DegenerateTriangle:
                        continue
                    added += 1
                    progress = True
                    break
                else:
                    continue
                break
            else:
                continue
            break
        if not progress:
            return added


def _defect_components(defects) -> dict:
    """Label each defect-edge endpoint with a connected-component id."""
    comp: dict[int, int] = {}
    adj: dict[int, set[int]] = {}
    for u, v in defects:
        adj.setdefault(u, set()).add(v)
        adj.setdefault(v, set()).add(u)
    cid = 0
    for start in adj:
        if start in comp:
            continue
        stack = [start]
        comp[start] = cid
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if y not in comp:
                    comp[y] = cid
                    stack.append(y)
        cid += 1
    return comp


def _circumradius3(V, u, v, w) -> float:
    ea = np.linalg.norm(V[v] - V[u])
    eb = np.linalg.norm(V[w] - V[v])
    ec = np.linalg.norm(V[u] - V[w])
    area = 0.5 * np.linalg.norm(np.cross(V[v] - V[u], V[w] - V[u]))
    if area <= _AREA_EPS:
        return np.inf
    return ea * eb * ec / (4.0 * area)


def _stitch_boundary(mesh, rim, radius_cap, off_surface=None,
                     banned=None) -> int:
    """Close residual boundary holes by advancing-front stitching.

    For each non-rim boundary edge the most compact triangle toward a
    boundary-adjacent third vertex is accepted, provided its edges stay
    manifold, an orientation opposing the meshed edges exists, and its
    circumradius stays under ``radius_cap``.  The cap keeps the stitch
    from bridging separate surface regions.  ``banned`` triangles
    (frozensets of vertex indices) are never proposed.  Repeats until no
    move is left; returns the number of triangles added.
    """
    added = 0
    V = mesh.vertices
    while True:
        boundary = set()
        adj: dict[int, set[int]] = {}
        for u, v in mesh.boundary_edges():
            boundary.add((u, v))
            adj.setdefault(u, set()).add(v)
            adj.setdefault(v, set()).add(u)
        moves = []
        for u, v in sorted(boundary):
            if rim[u] and rim[v]:
                continue
            cands = (adj.get(u, set()) | adj.get(v, set())) - {u, v}
            for w in sorted(cands):
                if banned is not None and frozenset((u, v, w)) in banned:
                    continue
                if mesh.has_triangle(u, v, w):
                    continue
                if any(len(mesh.edge_map.get((min(a, b), max(a, b)), ())) >= 2
                       for a, b in ((u, w), (v, w))):
                    continue
                if mesh.normals is not None:
                    na, nb, nc = mesh.normals[[u, v, w]]
                    if (na @ nb < _MIN_NORMAL_DOT
                            or na @ nc < _MIN_NORMAL_DOT
                            or nb @ nc < _MIN_NORMAL_DOT):
                        continue
                r = _circumradius3(V, u, v, w)
                if r > radius_cap:
                    continue
                if off_surface is not None and off_surface(u, v, w):
                    continue
                moves.append((r, u, v, w))
        if not moves:
            return added
        moves.sort()
        progress = False
        for r, u, v, w in moves:
            key = (min(u, v), max(u, v))
            if len(mesh.edge_map.get(key, ())) != 1:
                continue
            if mesh.has_triangle(u, v, w):
                continue
            if any(len(mesh.edge_map.get((min(a, b), max(a, b)), ())) >= 2
                   for a, b in ((u, w), (v, w))):
                continue
            order = _oriented_fill(mesh, u, v, w)
            if order is None:
                continue
            try:
                mesh.add_triangle(*order)
            except DegenerateTriangle:
                continue
            added += 1
            progress = True
        if not progress:
            return added


def _endpoint_vertices(system) -> np.ndarray:
    """Mask of particles whose closest centerline point lies on a free
    branch end, within half the target spacing along the branch."""
    tree = system.tree
    band = 0.5 * system.target_spacing
    mask = np.zeros(len(system.positions), dtype=bool)
    for bid, node in tree.endpoints():
        br = tree.branches[bid]
        end_param = 0.0 if node == 0 else br.total_length
        mask |= ((system.closest_branch == bid)
                 & (np.abs(system.closest_param - end_param) <= band))
    return mask


def triangulate(system, neighbor_count: int = 25) -> TriangleMesh:
    """Triangulate a relaxed particle system into a surface mesh.

    The queue starts at the particle nearest the first centerline node
    and drains breadth-first.  Boundary edges away from the tube-end
    rims then trigger up to three completion sweeps that re-process
    their vertices with a doubled neighborhood.  Remaining non-rim
    boundary edges are recorded in ``mesh.defects`` instead of raising.
    """
    mesh = TriangleMesh(system.positions.copy(),
                        system.normals.copy())
    n = len(system.positions)
    if n < 3:
        warnings.warn(f"cannot triangulate {n} particles",
                      TriangulationIncomplete, stacklevel=2)
        return mesh

    first_node = system.tree.branches[0].positions[0]
    _, seed = system.kdtree.query(first_node)
    seed = int(seed)
    queue: deque = deque([seed])
    seen = {seed}

    def drain(count):
        while queue:
            insert_point(system, mesh, queue, queue.popleft(),
                         neighbor_count=count, seen=seen)

    drain(neighbor_count)

    rim = _endpoint_vertices(system)
    for sweep in range(3):
        defects = [e for e in mesh.boundary_edges()
                   if not (rim[e[0]] and rim[e[1]])]
        if not defects:
            break
        verts = sorted({v for e in defects for v in e})
        logger.debug("completion sweep %d: %d open edges", sweep + 1,
                     len(defects))
        for v in verts:
            insert_point(system, mesh, queue, v,
                         neighbor_count=2 * neighbor_count, seen=seen)
        drain(neighbor_count)
        _stitch_boundary(mesh, rim, radius_cap=2.0 * system.target_spacing,
                         off_surface=_off_surface_test(system))

    # repair loop.  Interpenetrating triangles are geometric garbage on
    # both sides, so both go.  A hole whose chords are already 2-covered
    # cannot take any ear fill without going non-manifold, so the
    # triangles riding those chords are peeled off too.  Removed triples
    # are banned from coming back, every removal is re-stitched, and the
    # next round re-checks for crossings the stitch may have introduced.
    # Crossings outrank open holes, so the cleanest state seen wins if
    # the loop fails to converge.
    banned: set = set()
    off_surface = _off_surface_test(system)
    best = None
    best_tris = None
    for _ in range(12):
        tris = mesh.triangle_array()
        pairs = self_intersections(mesh)
        defects = [e for e in mesh.boundary_edges()
                   if not (rim[e[0]] and rim[e[1]])]
        state = (len(pairs), len(defects))
        if best is None or state < best:
            best = state
            best_tris = [tuple(t) for t in mesh.triangles]
        if state == (0, 0):
            break
        victims = {t for pair in pairs for t in pair}
        if not victims:
            comp = _defect_components(defects)
            for (a, b), ts in mesh.edge_map.items():
                if len(ts) == 2 and comp.get(a) is not None \
                        and comp.get(a) == comp.get(b):
                    victims.update(ts)
            if not victims:
                break
        for t in victims:
            banned.add(frozenset(int(x) for x in tris[t]))
        logger.debug("repair: removing %d triangles", len(victims))
        mesh.remove_triangles(victims)
        _stitch_boundary(mesh, rim, radius_cap=2.0 * system.target_spacing,
                         off_surface=off_surface, banned=banned)

    state = (len(self_intersections(mesh)),
             len([e for e in mesh.boundary_edges()
                  if not (rim[e[0]] and rim[e[1]])]))
    if best is not None and state > best:
        logger.debug("repair: restoring best state %s over %s", best, state)
        mesh.triangles = []
        mesh.edge_map = {}
        mesh.vertex_tris = {}
        mesh._tri_keys = set()
        for t in best_tris:
            mesh.add_triangle(*t)

    _fill_triangle_holes(mesh, rim)

    mesh.defects = [e for e in mesh.boundary_edges()
                    if not (rim[e[0]] and rim[e[1]])]
    if mesh.defects:
        warnings.warn(f"{len(mesh.defects)} boundary edges left unresolved",
                      TriangulationIncomplete, stacklevel=2)
    elif not mesh.triangles:
        warnings.warn("no triangle survived the acceptance predicates",
                      TriangulationIncomplete, stacklevel=2)
    return mesh


# -- topology diagnostics -----------------------------------------------------

@dataclass
class TopologyReport:
    """Watertightness and consistency findings for one mesh.

    ``boundary_loops`` counts closed boundary cycles; ``open_chains``
    counts boundary vertices of degree other than two, which break the
    loop structure and always indicate a defect.
    """

    nonmanifold_edges: list
    boundary_loops: int
    open_chains: int
    expected_loops: int | None
    euler_characteristic: int
    orientation_consistent: bool
    intersecting_pairs: list

    @property
    def manifold(self) -> bool:
        return not self.nonmanifold_edges and self.open_chains == 0

    @property
    def watertight(self) -> bool:
        return (self.manifold and self.orientation_consistent
                and not self.intersecting_pairs)


def _boundary_loops(mesh):
    adj: dict[int, list[int]] = {}
    for u, v in mesh.boundary_edges():
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    bad = sum(1 for nbrs in adj.values() if len(nbrs) != 2)
    loops = 0
    visited = set()
    for start in sorted(adj):
        if start in visited or len(adj[start]) != 2:
            continue
        loops += 1
        prev, cur = None, start
        while True:
            visited.add(cur)
            nxt = [w for w in adj[cur] if w != prev]
            if not nxt or len(adj[cur]) != 2:
                loops -= 1  # ran into a chain end, not a loop
                break
            prev, cur = cur, nxt[0]
            if cur == start:
                break
            if cur in visited:
                break
    return loops, bad


def _tri_tri_intersect(p, q, eps):
    """Whether two 3D triangles (3, 3 arrays) intersect."""
    n1 = np.cross(p[1] - p[0], p[2] - p[0])
    n2 = np.cross(q[1] - q[0], q[2] - q[0])
    d_q = (q - p[0]) @ n1 / max(np.linalg.norm(n1), 1e-300)
    d_p = (p - q[0]) @ n2 / max(np.linalg.norm(n2), 1e-300)
    if np.all(d_q > eps) or np.all(d_q < -eps):
        return False
    if np.all(d_p > eps) or np.all(d_p < -eps):
        return False
    if np.all(np.abs(d_q) <= eps) and np.all(np.abs(d_p) <= eps):
        return _coplanar_overlap(p, q, n1, eps)
    t1 = _cross_interval(p, d_p, n1, n2)
    t2 = _cross_interval(q, d_q, n1, n2)
    if t1 is None or t2 is None:
        return False
    lo = max(t1[0], t2[0])
    hi = min(t1[1], t2[1])
    return hi - lo > eps


def _cross_interval(tri, dists, n1, n2):
    """Interval of the triangle on the plane-intersection line."""
    line = np.cross(n1, n2)
    t = tri @ line
    pts = []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        da, db = dists[a], dists[b]
        if da == db:
            continue
        if (da <= 0.0 <= db) or (db <= 0.0 <= da):
            w = da / (da - db)
            pts.append(t[a] + w * (t[b] - t[a]))
    if len(pts) < 2:
        return None
    return min(pts), max(pts)


def _coplanar_overlap(p, q, n, eps):
    axis = int(np.argmax(np.abs(n)))
    keep = [k for k in range(3) if k != axis]
    p2 = p[:, keep]
    q2 = q[:, keep]
    for a in range(3):
        seg = np.array([[q2[a, 0], q2[a, 1],
                         q2[(a + 1) % 3, 0], q2[(a + 1) % 3, 1]]])
        for b in range(3):
            if _segment_vs_many(p2[b], p2[(b + 1) % 3], seg, eps)[0]:
                return True

    def contains(tri, pt):
        s = 0
        for k in range(3):
            a, b = tri[k], tri[(k + 1) % 3]
            cr = (b[0] - a[0]) * (pt[1] - a[1]) - (b[1] - a[1]) * (pt[0] - a[0])
            sk = 1 if cr > eps else (-1 if cr < -eps else 0)
            if sk == 0:
                continue
            if s == 0:
                s = sk
            elif sk != s:
                return False
        return True

    return contains(p2, q2.mean(axis=0)) or contains(q2, p2.mean(axis=0))


def self_intersections(mesh: TriangleMesh,
                       limit: int | None = None) -> list[tuple[int, int]]:
    """Pairs of non-adjacent triangles that intersect in 3D.

    Adjacent means sharing at least one vertex index.  Candidate pairs
    come from a spatial index over triangle centroids; the tolerance is
    1e-9 of the mesh bounding-box diagonal.
    """
    tris = mesh.triangle_array()
    if len(tris) == 0:
        return []
    V = mesh.vertices
    corners = V[tris]
    centroids = corners.mean(axis=1)
    rad = np.linalg.norm(corners - centroids[:, None, :], axis=2).max(axis=1)
    span = V.max(axis=0) - V.min(axis=0)
    eps = _PRED_EPS_SCALE * max(float(np.linalg.norm(span)), 1e-30)
    pairs = cKDTree(centroids).query_pairs(2.0 * float(rad.max()),
                                           output_type="ndarray")
    out = []
    for a, b in pairs:
        if np.linalg.norm(centroids[a] - centroids[b]) > rad[a] + rad[b]:
            continue
        ta, tb = tris[a], tris[b]
        if set(ta) & set(tb):
            continue
        if _tri_tri_intersect(corners[a], corners[b], eps):
            out.append((int(a), int(b)))
            if limit is not None and len(out) >= limit:
                break
    return out


def topology_check(mesh: TriangleMesh, tree=None) -> TopologyReport:
    """Manifoldness, boundary loops, orientation and self-intersection.

    ``expected_loops`` is the number of free branch ends when a tree is
    given (one open rim each), else None.  The Euler characteristic
    counts only vertices referenced by triangles.
    """
    nonmanifold = sorted(e for e, ts in mesh.edge_map.items()
                         if len(ts) not in (1, 2))
    loops, bad = _boundary_loops(mesh)

    used = {v for tri in mesh.triangles for v in tri}
    euler = len(used) - len(mesh.edge_map) + len(mesh.triangles)

    oriented = True
    for (u, v), ts in mesh.edge_map.items():
        if len(ts) != 2:
            continue
        dirs = []
        for t in ts:
            a, b, c = mesh.triangles[t]
            fwd = (a, b) == (u, v) or (b, c) == (u, v) or (c, a) == (u, v)
            dirs.append(fwd)
        if dirs[0] == dirs[1]:
            oriented = False
            break

    expected = len(tree.endpoints()) if tree is not None else None
    return TopologyReport(
        nonmanifold_edges=nonmanifold,
        boundary_loops=loops,
        open_chains=bad,
        expected_loops=expected,
        euler_characteristic=euler,
        orientation_consistent=oriented,
        intersecting_pairs=self_intersections(mesh),
    )
