"""Centerline tree model and implicit lumen-surface queries.

A vessel is represented by branches of uniformly spaced centerline nodes.
Every node carries an orthonormal frame ``[t, u, v]`` (tangent plus a
cross-section basis) and ``k`` lumen radii sampled at angles ``2*pi*j/k``
in the ``[u, v]`` plane, measured from ``u`` toward ``v``.  The lumen
surface is implicit: a point lies on it when its distance to the closest
centerline point equals the interpolated radius along that direction.

All coordinates are millimetres.  Trees are immutable after construction;
every query here is read-only and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .errors import AxialDirection, DegenerateBranch, EmptyTree, ParallelSeed

_AXIAL_EPS = 1e-9


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    n = np.where(n == 0.0, 1.0, n)
    return a / n


@dataclass
class CenterlineNode:
    """One centerline sample: position, local frame, and radial lumen profile.

    ``radii[j]`` is the lumen radius at angle ``2*pi*j/k`` in the
    ``[frame_u, frame_v]`` plane, measured from ``frame_u`` toward
    ``frame_v``.
    """

    position: np.ndarray
    tangent: np.ndarray
    frame_u: np.ndarray | None
    frame_v: np.ndarray | None
    radii: np.ndarray


class Branch:
    """An ordered run of centerline nodes with a smooth interpolating curve.

    Parameters
    ----------
    positions : (b, 3) array
        Node positions in mm, ordered along the vessel.
    radii : (b, k) array
        Per-node radial lumen profiles; k identical for all nodes.
    spacing : float, optional
        Declared node spacing (mm).  Inferred from the mean consecutive
        node distance when omitted.
    parent : (int, int), optional
        ``(branch_id, node_index)`` attachment on the parent branch;
        ``None`` for a root branch.
    frames_u, frames_v : (b, 3) arrays, optional
        Cross-section frames.  Usually assigned via
        :func:`build_rmf_frames` rather than passed directly.

    The curve through the nodes is a natural cubic spline parameterized
    by cumulative chord length; "arclength" in query results refers to
    this parameter.
    """

    def __init__(self, positions, radii, spacing=None, parent=None,
                 frames_u=None, frames_v=None):
        self.positions = np.asarray(positions, dtype=float)
        self.radii = np.asarray(radii, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (b, 3)")
        if self.radii.ndim != 2 or self.radii.shape[0] != self.positions.shape[0]:
            raise ValueError("radii must be (b, k)")
        if self.radii.shape[1] < 3:
            raise ValueError("need at least 3 radial samples per node")
        if np.any(self.radii <= 0.0):
            raise ValueError("all lumen radii must be positive")
        self.parent = None if parent is None else (int(parent[0]), int(parent[1]))

        deltas = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        if np.any(deltas == 0.0):
            raise ValueError("consecutive nodes must be distinct")
        self.arclengths = np.concatenate([[0.0], np.cumsum(deltas)])
        self.spacing = float(spacing) if spacing is not None else (
            float(deltas.mean()) if len(deltas) else 0.0)
        if self.spacing < 0.0 or (spacing is not None and self.spacing <= 0.0):
            raise ValueError("spacing must be positive")

        self.frames_u = None if frames_u is None else np.asarray(frames_u, dtype=float)
        self.frames_v = None if frames_v is None else np.asarray(frames_v, dtype=float)
        self._spline = None
        self._dense = None

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def num_radial_samples(self) -> int:
        return self.radii.shape[1]

    @property
    def total_length(self) -> float:
        return float(self.arclengths[-1])

    @property
    def has_frames(self) -> bool:
        return self.frames_u is not None and self.frames_v is not None

    @property
    def spline(self) -> CubicSpline:
        """Cubic spline through the nodes (chord-length parameter).

        Not-a-knot ends keep circular-arc inputs within 1e-3 of the true
        circle; natural ends flatten the end segments too much for that.
        """
        if self._spline is None:
            if self.num_nodes < 2:
                raise DegenerateBranch("spline needs at least 2 nodes")
            bc = "not-a-knot" if self.num_nodes >= 3 else "natural"
            self._spline = CubicSpline(self.arclengths, self.positions,
                                       bc_type=bc, axis=0)
        return self._spline

    def point_at(self, s):
        return self.spline(np.clip(s, 0.0, self.total_length))

    def tangent_at(self, s):
        d = self.spline(np.clip(s, 0.0, self.total_length), 1)
        return _unit_rows(d) if np.ndim(s) else _unit(d)

    @property
    def tangents(self) -> np.ndarray:
        """Unit tangents at the nodes (spline derivative)."""
        if self.num_nodes < 2:
            raise DegenerateBranch("tangents need at least 2 nodes")
        return _unit_rows(self.spline(self.arclengths, 1))

    def node(self, i: int) -> CenterlineNode:
        t = self.tangents[i]
        u = None if self.frames_u is None else self.frames_u[i]
        v = None if self.frames_v is None else self.frames_v[i]
        return CenterlineNode(self.positions[i].copy(), t, u, v, self.radii[i].copy())

    @property
    def nodes(self) -> list[CenterlineNode]:
        return [self.node(i) for i in range(self.num_nodes)]

    def dense_samples(self):
        """Cached curve samples at roughly spacing/4, used by closest-point search."""
        if self._dense is None:
            step = max(self.spacing / 4.0, 1e-9)
            n = max(int(np.ceil(self.total_length / step)) + 1, 2)
            params = np.linspace(0.0, self.total_length, n)
            self._dense = (params, self.spline(params))
        return self._dense

    def mean_radius(self, i: int) -> float:
        return float(self.radii[i].mean())


@dataclass
class BifurcationInfo:
    """Geometry of one junction: where branches meet and radiate from.

    ``branch_dirs`` holds the unit tangents leaving the junction center:
    the parent contributes one direction per free side of the attachment
    node (two when the node is interior) followed by one direction per
    attached child.
    """

    center: np.ndarray
    branch_dirs: list[np.ndarray]
    local_radius: float


@dataclass
class ClosestPoint:
    """Result of a closest-centerline-point query."""

    branch: int
    arclength: float
    point: np.ndarray
    tangent: np.ndarray
    distance: float


class VesselTree:
    """Immutable collection of branches forming a rooted centerline tree.

    Parameters
    ----------
    branches : list of Branch
        Branch ``id`` equals its index in this list.  Every non-root
        branch's ``parent`` must name an existing branch and node, and
        the parent references must be acyclic.
    frame_seed_u : (3,) array, optional
        Seed direction the branch frames were built from, kept so the
        tree can be serialized and rebuilt with identical frames.
    """

    def __init__(self, branches: list[Branch], frame_seed_u=None):
        self.branches = list(branches)
        self.frame_seed_u = None if frame_seed_u is None else \
            np.asarray(frame_seed_u, dtype=float)
        self._validate()
        self._sample_index = None
        self._bifurcations = None

    @property
    def bifurcations(self) -> list[BifurcationInfo]:
        """Junction records, computed once on first access."""
        if self._bifurcations is None:
            self._bifurcations = detect_bifurcations(self)
        return self._bifurcations

    def _validate(self):
        n = len(self.branches)
        k = None
        for bid, br in enumerate(self.branches):
            if br.num_nodes < 2:
                raise ValueError(f"branch {bid} has fewer than 2 nodes")
            if k is None:
                k = br.num_radial_samples
            elif br.num_radial_samples != k:
                raise ValueError("all branches must share the same radial sample count")
            if br.parent is not None:
                pb, pn = br.parent
                if not (0 <= pb < n):
                    raise ValueError(f"branch {bid} references missing parent {pb}")
                if not (0 <= pn < self.branches[pb].num_nodes):
                    raise ValueError(f"branch {bid} attaches to missing node {pn}")
            if br.has_frames:
                dots = np.einsum("ij,ij->i", br.frames_u[:-1], br.frames_u[1:])
                if np.any(dots <= 0.0):
                    raise ValueError(f"branch {bid} frames flip between nodes")
        # parent links must not form a cycle
        for bid in range(n):
            seen = set()
            cur = bid
            while cur is not None:
                if cur in seen:
                    raise ValueError("parent references form a cycle")
                seen.add(cur)
                p = self.branches[cur].parent
                cur = None if p is None else p[0]

    @property
    def is_empty(self) -> bool:
        return len(self.branches) == 0

    @property
    def num_radial_samples(self) -> int:
        if self.is_empty:
            raise EmptyTree("tree has no branches")
        return self.branches[0].num_radial_samples

    def endpoints(self) -> list[tuple[int, int]]:
        """Free branch ends ``(branch_id, node_index)`` with nothing attached."""
        attachment_nodes = {br.parent for br in self.branches if br.parent is not None}
        ends = []
        for bid, br in enumerate(self.branches):
            first_free = br.parent is None and (bid, 0) not in attachment_nodes
            if first_free:
                ends.append((bid, 0))
            last = br.num_nodes - 1
            if (bid, last) not in attachment_nodes:
                ends.append((bid, last))
        return ends

    # -- closest-point machinery -------------------------------------------

    def _samples(self):
        """Concatenated dense curve samples plus a KD-tree over them."""
        if self._sample_index is None:
            params, points, owner = [], [], []
            for bid, br in enumerate(self.branches):
                t, p = br.dense_samples()
                params.append(t)
                points.append(p)
                owner.append(np.full(len(t), bid, dtype=np.int64))
            points = np.vstack(points)
            self._sample_index = (
                np.concatenate(params),
                points,
                np.concatenate(owner),
                cKDTree(points),
            )
        return self._sample_index

    def closest_points(self, queries: np.ndarray):
        """Vectorized closest-centerline-point search.

        Parameters
        ----------
        queries : (n, 3) array

        Returns
        -------
        branch_ids : (n,) int array
        arclengths : (n,) array
        points : (n, 3) array
        tangents : (n, 3) array
        distances : (n,) array
        """
        if self.is_empty:
            raise EmptyTree("closest-point query on an empty tree")
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        n = queries.shape[0]
        params, points, owner, kdtree = self._samples()
        k = min(12, len(params))
        _, idx = kdtree.query(queries, k=k)
        idx = np.atleast_2d(idx)

        best_dist = np.full(n, np.inf)
        best_branch = np.zeros(n, dtype=np.int64)
        best_param = np.zeros(n, dtype=float)
        best_point = np.zeros((n, 3))
        best_tan = np.zeros((n, 3))

        # Refine one bracket per (query, candidate branch), branch by branch
        # so the spline evaluations stay vectorized.
        cand_owner = owner[idx]                      # (n, k)
        for bid in np.unique(cand_owner):
            rows_mask = np.any(cand_owner == bid, axis=1)
            rows = np.nonzero(rows_mask)[0]
            if len(rows) == 0:
                continue
            br = self.branches[bid]
            # closest sample of this branch per query row
            sub = idx[rows]
            mask = cand_owner[rows] == bid
            d2 = np.sum((points[sub] - queries[rows, None, :]) ** 2, axis=2)
            d2 = np.where(mask, d2, np.inf)
            pick = sub[np.arange(len(rows)), np.argmin(d2, axis=1)]
            t0 = params[pick]
            step = max(br.spacing / 4.0, 1e-9)
            lo = np.clip(t0 - step, 0.0, br.total_length)
            hi = np.clip(t0 + step, 0.0, br.total_length)
            q = queries[rows]
            for _ in range(20):
                m1 = lo + (hi - lo) / 3.0
                m2 = hi - (hi - lo) / 3.0
                d1 = np.linalg.norm(br.spline(m1) - q, axis=1)
                d2_ = np.linalg.norm(br.spline(m2) - q, axis=1)
                take = d1 < d2_
                hi = np.where(take, m2, hi)
                lo = np.where(take, lo, m1)
            t_mid = 0.5 * (lo + hi)
            # polish with a few projection-Newton steps so points exactly on
            # the curve measure distance ~0 instead of the ternary residual
            t = t_mid
            for _ in range(3):
                c0 = br.spline(t)
                c1 = br.spline(t, 1)
                c2 = br.spline(t, 2)
                delta = c0 - q
                g = np.einsum("ij,ij->i", delta, c1)
                gp = (np.einsum("ij,ij->i", c1, c1)
                      + np.einsum("ij,ij->i", delta, c2))
                safe = np.abs(gp) > 1e-30
                t = np.clip(t - np.where(safe, g / np.where(safe, gp, 1.0), 0.0),
                            0.0, br.total_length)
            pt = br.spline(t)
            dist = np.linalg.norm(pt - q, axis=1)
            pt_mid = br.spline(t_mid)
            dist_mid = np.linalg.norm(pt_mid - q, axis=1)
            worse = dist > dist_mid
            if np.any(worse):
                t = np.where(worse, t_mid, t)
                pt[worse] = pt_mid[worse]
                dist = np.minimum(dist, dist_mid)
            # strict improvement keeps the lowest (branch, arclength) on ties
            better = dist < best_dist[rows]
            upd = rows[better]
            best_dist[upd] = dist[better]
            best_branch[upd] = bid
            best_param[upd] = t[better]
            best_point[upd] = pt[better]
            best_tan[upd] = _unit_rows(br.spline(t[better], 1))
        return best_branch, best_param, best_point, best_tan, best_dist

    def radius_toward(self, branch_ids, arclengths, dirs):
        """Vectorized :func:`radius_along_direction`.

        Returns ``(radii, axial_mask)`` where ``axial_mask`` flags rows
        whose direction had no usable cross-section component; those rows
        fall back to the first angular sample of the nearest node.
        """
        branch_ids = np.atleast_1d(np.asarray(branch_ids, dtype=np.int64))
        arclengths = np.atleast_1d(np.asarray(arclengths, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = len(branch_ids)
        out = np.zeros(n)
        axial = np.zeros(n, dtype=bool)
        for bid in np.unique(branch_ids):
            rows = np.nonzero(branch_ids == bid)[0]
            br = self.branches[bid]
            if not br.has_frames:
                raise ValueError(f"branch {bid} has no frames; build them first")
            s = np.clip(arclengths[rows], 0.0, br.total_length)
            i0 = np.clip(np.searchsorted(br.arclengths, s, side="right") - 1,
                         0, br.num_nodes - 2)
            seg = br.arclengths[i0 + 1] - br.arclengths[i0]
            frac = np.clip((s - br.arclengths[i0]) / seg, 0.0, 1.0)
            d = dirs[rows]
            r_lo, ax_lo = self._node_radius(br, i0, d)
            r_hi, ax_hi = self._node_radius(br, i0 + 1, d)
            out[rows] = (1.0 - frac) * r_lo + frac * r_hi
            bad = ax_lo | ax_hi
            if np.any(bad):
                nearest = np.where(frac < 0.5, i0, i0 + 1)
                out[rows[bad]] = br.radii[nearest[bad], 0]
                axial[rows[bad]] = True
        return out, axial

    @staticmethod
    def _node_radius(br: Branch, node_idx, dirs):
        """Radius at given nodes along ``dirs``, linear between angular samples."""
        k = br.num_radial_samples
        u = br.frames_u[node_idx]
        v = br.frames_v[node_idx]
        up = np.einsum("ij,ij->i", dirs, u)
        vp = np.einsum("ij,ij->i", dirs, v)
        inplane = np.hypot(up, vp)
        axial = inplane < _AXIAL_EPS
        theta = np.mod(np.arctan2(vp, up), 2.0 * np.pi)
        a = theta * k / (2.0 * np.pi)
        j0 = np.floor(a).astype(np.int64) % k
        w = a - np.floor(a)
        r = br.radii[node_idx, j0] * (1.0 - w) + br.radii[node_idx, (j0 + 1) % k] * w
        return r, axial

    def signed_distances(self, queries: np.ndarray) -> np.ndarray:
        """Vectorized :func:`implicit_signed_distance`."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        bids, params, pts, _, dists = self.closest_points(queries)
        out = np.empty(len(queries))
        on_axis = dists < _AXIAL_EPS
        off = ~on_axis
        if np.any(off):
            dirs = _unit_rows(queries[off] - pts[off])
            radii, _ = self.radius_toward(bids[off], params[off], dirs)
            out[off] = dists[off] - radii
        if np.any(on_axis):
            # on the centerline: inside by the full local radius
            radii, _ = self.radius_toward(
                bids[on_axis], params[on_axis],
                np.zeros((int(on_axis.sum()), 3)))
            out[on_axis] = -radii
        return out


# -- operations --------------------------------------------------------------


def resample_and_spline(branch: Branch, spacing: float) -> Branch:
    """Redistribute branch nodes uniformly along an interpolating spline.

    Fits a natural cubic spline through the existing nodes, measures its
    arclength densely, and emits new nodes at equal arclength steps close
    to ``spacing``.  Radii for new nodes are interpolated linearly in
    arclength per angular index.

    Parameters
    ----------
    branch : Branch
    spacing : float
        Requested node spacing (mm).

    Returns
    -------
    Branch
        New branch without frames (assign via :func:`build_rmf_frames`).

    Raises
    ------
    DegenerateBranch
        If the branch has fewer than 2 nodes or is shorter than ``spacing``.
    """
    if spacing <= 0.0:
        raise ValueError("spacing must be positive")
    if branch.num_nodes < 2:
        raise DegenerateBranch("resampling needs at least 2 nodes")
    if branch.total_length < spacing:
        raise DegenerateBranch(
            f"branch length {branch.total_length:.6g} mm below spacing {spacing:.6g} mm")

    spline = branch.spline
    # dense arclength table for the chord-length parameterized spline;
    # resolution well below the target spacing keeps gaps within 10%
    n_dense = max(20 * (branch.num_nodes - 1),
                  int(np.ceil(branch.total_length / (0.05 * spacing)))) + 1
    t_dense = np.linspace(0.0, branch.total_length, n_dense)
    p_dense = spline(t_dense)
    seg = np.linalg.norm(np.diff(p_dense, axis=0), axis=1)
    s_dense = np.concatenate([[0.0], np.cumsum(seg)])
    total = s_dense[-1]

    count = max(int(round(total / spacing)), 1) + 1
    s_new = np.linspace(0.0, total, count)
    t_new = np.interp(s_new, s_dense, t_dense)
    positions = spline(t_new)

    s_nodes = np.interp(branch.arclengths, t_dense, s_dense)
    radii = np.empty((count, branch.num_radial_samples))
    for j in range(branch.num_radial_samples):
        radii[:, j] = np.interp(s_new, s_nodes, branch.radii[:, j])

    return Branch(positions, radii, spacing=total / (count - 1), parent=branch.parent)


def build_rmf_frames(branch: Branch, initial_u: np.ndarray) -> Branch:
    """Assign rotation-minimizing cross-section frames along a branch.

    Uses the double-reflection recurrence: each step reflects the running
    frame across the chord bisector and across the tangent bisector, which
    transports ``u`` with (numerically) minimal twist.

    Parameters
    ----------
    branch : Branch
    initial_u : (3,) array
        Seed direction for ``u`` at the first node; its component
        orthogonal to the first tangent is used.

    Returns
    -------
    Branch
        New branch with ``frames_u`` and ``frames_v`` populated.

    Raises
    ------
    ParallelSeed
        If ``initial_u`` is (nearly) parallel to the first tangent.
    """
    tangents = branch.tangents
    seed = np.asarray(initial_u, dtype=float)
    t0 = tangents[0]
    if np.linalg.norm(np.cross(seed, t0)) < 1e-9 * np.linalg.norm(seed):
        raise ParallelSeed("frame seed is parallel to the first tangent")
    u = seed - np.dot(seed, t0) * t0
    u = _unit(u)

    n = branch.num_nodes
    frames_u = np.empty((n, 3))
    frames_u[0] = u
    pos = branch.positions
    for i in range(n - 1):
        v1 = pos[i + 1] - pos[i]
        c1 = np.dot(v1, v1)
        u_l = frames_u[i] - (2.0 / c1) * np.dot(v1, frames_u[i]) * v1
        t_l = tangents[i] - (2.0 / c1) * np.dot(v1, tangents[i]) * v1
        v2 = tangents[i + 1] - t_l
        c2 = np.dot(v2, v2)
        if c2 < 1e-30:
            u_next = u_l
        else:
            u_next = u_l - (2.0 / c2) * np.dot(v2, u_l) * v2
        u_next = u_next - np.dot(u_next, tangents[i + 1]) * tangents[i + 1]
        frames_u[i + 1] = _unit(u_next)
    frames_v = np.cross(tangents, frames_u)
    return Branch(branch.positions, branch.radii, spacing=branch.spacing,
                  parent=branch.parent, frames_u=frames_u, frames_v=frames_v)


def closest_centerline_point(tree: VesselTree, p: np.ndarray) -> ClosestPoint:
    """Find the nearest point on any branch curve to ``p``.

    Searches a cached dense sample grid (spacing/4) through a KD-tree and
    refines each candidate branch with 20 ternary-search steps.  Exact
    distance ties resolve to the lowest ``(branch_id, arclength)``.
    """
    bids, params, pts, tans, dists = tree.closest_points(np.asarray(p, dtype=float))
    return ClosestPoint(int(bids[0]), float(params[0]), pts[0], tans[0], float(dists[0]))


def radius_along_direction(tree: VesselTree, branch_id: int, arclength: float,
                           direction: np.ndarray) -> float:
    """Interpolated lumen radius along ``direction`` at a branch location.

    The direction is projected into the cross-section plane of the two
    nodes bracketing ``arclength``; the radius is linear between adjacent
    angular samples at each node and linear in arclength between nodes.

    Raises
    ------
    AxialDirection
        If the in-plane component of ``direction`` is below 1e-9 at a
        bracketing node.
    """
    r, axial = tree.radius_toward([branch_id], [arclength],
                                  np.asarray(direction, dtype=float))
    if axial[0]:
        raise AxialDirection("direction has no cross-section component")
    return float(r[0])


def implicit_signed_distance(tree: VesselTree, p: np.ndarray) -> float:
    """Signed radial residual of ``p``: negative inside the lumen, zero on
    the implicit surface, positive outside.

    Computed as ``d - R`` with ``d`` the distance to the closest
    centerline point and ``R`` the lumen radius toward ``p``.  A point on
    the centerline itself returns ``-R`` of the first angular sample at
    the nearest node.
    """
    return float(tree.signed_distances(np.asarray(p, dtype=float))[0])


def detect_bifurcations(tree: VesselTree) -> list[BifurcationInfo]:
    """Collect junction geometry, one record per attachment point.

    Branch directions radiate away from the junction: the parent
    contributes its unit tangent on each free side of the attachment node
    (two for an interior node), each child its tangent at its first node.
    ``local_radius`` is the mean of the incident nodes' mean radii.
    """
    groups: dict[tuple[int, int], list[int]] = {}
    for cid, br in enumerate(tree.branches):
        if br.parent is not None:
            groups.setdefault(br.parent, []).append(cid)

    infos = []
    for (pb, pn) in sorted(groups):
        children = sorted(groups[(pb, pn)])
        parent = tree.branches[pb]
        t = parent.tangents[pn]
        dirs: list[np.ndarray] = []
        if pn < parent.num_nodes - 1:
            dirs.append(t.copy())
        if pn > 0:
            dirs.append(-t)
        radii = [parent.mean_radius(pn)]
        for cid in children:
            child = tree.branches[cid]
            dirs.append(child.tangents[0].copy())
            radii.append(child.mean_radius(0))
        infos.append(BifurcationInfo(
            center=parent.positions[pn].copy(),
            branch_dirs=dirs,
            local_radius=float(np.mean(radii)),
        ))
    return infos
