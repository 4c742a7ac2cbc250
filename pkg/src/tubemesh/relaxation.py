"""Particle relaxation on the implicit lumen surface.

Particles seeded near the surface evolve under two forces until they sit
evenly on the surface: a signed centerline force that locks each particle
onto the zero level of the radial residual, and pairwise balloon
repulsion that spreads particles tangentially.  Each particle carries a
balloon radius adapted by negative feedback so that its contact pressure
approaches the value of an ideal hexagonal packing.

Force law used by both terms, with x a normalized distance ratio:

    s(x) = x^-6 - x^-3

For the centerline force x = alpha*d/R + (1 - alpha), so s vanishes
exactly on the surface (d = R), pushes outward inside and pulls inward
outside.  For repulsion x = alpha*d/(r_i + r_j) + (1 - alpha), cut off
beyond d > 0.5*(r_i + r_j).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .centerline import ClosestPoint, VesselTree
from .errors import AxialDirection, CoincidentParticles, EmptyTree

logger = logging.getLogger(__name__)

_COINCIDENT_EPS = 1e-9
_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

# per-step displacement cap as a fraction of the target spacing: overlap
# spikes in the x^-6 profile would otherwise throw particles past the
# narrow pull-back zone of the centerline force in a single step
_MAX_STEP_FRACTION = 0.3

# particles deeper inside the wall than this fraction of the local radius
# keep their radial normal inside junction regions, so the wall force can
# first eject them from the junction pocket
_SADDLE_DEPTH_FRACTION = 0.15


def _imf(x):
    """Signed force profile: positive below x = 1, zero at 1, negative above."""
    x3 = x * x * x
    return 1.0 / (x3 * x3) - 1.0 / x3


def _unit_rows(a):
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(n == 0.0, 1.0, n)


@dataclass
class RelaxationParams:
    """Tuning constants for the relaxation loop.

    ``step_scale``, ``dr_max``, ``dr_min``, ``r_floor`` and ``r_ceil``
    default to ``None`` and are resolved against the seeded system: the
    target spacing ``S = sqrt(1/density)`` gives step_scale = 0.041*S,
    dr_max = +0.3*S, dr_min = -0.15*S, and the balloon bounds come from
    the initial balloon radius (0.1x / 1.9x).

    The defaults were calibrated on the synthetic shapes.  The contact
    force profile has slope ~65/mm per unit balloon pair at working radii
    near 1 mm, so step_scale*mu must stay below ~1/65 of the spacing for
    the descent to contract; 0.041*S*10 sits inside that margin.  The
    step fraction itself balances the absolute settling threshold against
    packing quality: smaller steps settle almost immediately but freeze
    the seed disorder in (high spacing spread), larger ones keep the
    equilibrium jitter above the threshold forever.  0.041*S anneals a
    dense tube into the uniform regime before going quiet.  The balloon
    ceiling of 1.9x the seeded radius keeps enough inflation pressure to
    close gaps without reaching the deep-overlap regime where the
    feedback residual hides the compression signal.
    """

    alpha: float = 0.5
    mu: float = 10.0
    mass: float = 1.0
    eta: float = 0.005
    step_scale: float | None = None
    dr_max: float | None = None
    dr_min: float | None = None
    r_floor: float | None = None
    r_ceil: float | None = None
    term_eps: float = 0.05
    max_iters: int = 100
    neighbor_count: int = 25

    def validate(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.mass <= 0.0:
            raise ValueError("mass must be positive")
        if self.mu < 0.0:
            raise ValueError("mu must be non-negative")
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.term_eps <= 0.0:
            raise ValueError("term_eps must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.neighbor_count < 6:
            raise ValueError("need at least 6 neighbors")
        if self.step_scale is not None and self.step_scale <= 0.0:
            raise ValueError("step_scale must be positive")
        if self.dr_max is not None and self.dr_max <= 0.0:
            raise ValueError("dr_max must be positive")
        if self.dr_min is not None and self.dr_min >= 0.0:
            raise ValueError("dr_min must be negative")
        if self.r_floor is not None and self.r_floor <= 0.0:
            raise ValueError("r_floor must be positive")

    def resolve(self, system: "ParticleSystem") -> "_Resolved":
        self.validate()
        spacing = system.target_spacing
        r0 = system.initial_radius
        return _Resolved(
            alpha=self.alpha,
            mu=self.mu,
            mass=self.mass,
            eta=self.eta,
            step_scale=self.step_scale if self.step_scale is not None
            else 0.041 * spacing,
            dr_max=self.dr_max if self.dr_max is not None else 0.3 * spacing,
            dr_min=self.dr_min if self.dr_min is not None else -0.15 * spacing,
            r_floor=self.r_floor if self.r_floor is not None else 0.1 * r0,
            r_ceil=self.r_ceil if self.r_ceil is not None else 1.9 * r0,
            term_eps=self.term_eps,
            max_iters=self.max_iters,
            neighbor_count=self.neighbor_count,
        )


@dataclass
class _Resolved:
    alpha: float
    mu: float
    mass: float
    eta: float
    step_scale: float
    dr_max: float
    dr_min: float
    r_floor: float
    r_ceil: float
    term_eps: float
    max_iters: int
    neighbor_count: int


@dataclass
class Particle:
    """Read-only view of one particle in a system."""

    index: int
    position: np.ndarray
    normal: np.ndarray
    balloon_radius: float
    closest: ClosestPoint


class ParticleSystem:
    """Particle cloud bound to a tree, with cached surface state.

    Positions, balloon radii, normals and the closest-centerline records
    are stored as parallel arrays.  ``refresh`` recomputes the cached
    state and the spatial index after positions change; seeded systems
    of at least 4 particles are the intended operating regime.
    """

    def __init__(self, tree: VesselTree, positions, balloon_radii,
                 target_spacing: float, initial_radius: float):
        self.tree = tree
        self.positions = np.asarray(positions, dtype=float)
        self.balloon_radii = np.asarray(balloon_radii, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (N, 3)")
        if len(self.positions) < 1:
            raise ValueError("system needs at least one particle")
        if np.any(self.balloon_radii <= 0.0):
            raise ValueError("balloon radii must be positive")
        self.target_spacing = float(target_spacing)
        self.initial_radius = float(initial_radius)
        self.iteration = 0
        self.refresh()

    @property
    def size(self) -> int:
        return len(self.positions)

    def refresh(self) -> None:
        """Recompute closest-centerline records, normals, spatial index."""
        (self.closest_branch, self.closest_param, self.closest_point,
         self.closest_tangent, self.closest_dist) = \
            self.tree.closest_points(self.positions)
        self.normals = _surface_normals(
            self.tree, self.positions, self.closest_point, self.closest_dist,
            self.closest_tangent, self.closest_branch, self.closest_param)
        self.kdtree = cKDTree(self.positions)

    def particle(self, i: int) -> Particle:
        return Particle(
            index=i,
            position=self.positions[i].copy(),
            normal=self.normals[i].copy(),
            balloon_radius=float(self.balloon_radii[i]),
            closest=ClosestPoint(
                int(self.closest_branch[i]), float(self.closest_param[i]),
                self.closest_point[i].copy(), self.closest_tangent[i].copy(),
                float(self.closest_dist[i])),
        )


@dataclass
class StepStats:
    """Displacement statistics of one relaxation step, in mm.

    ``mean_radius_change`` tracks how much the balloon radii moved; the
    system counts as settled only when both positions and radii are
    quiet on the same step.
    """

    mean_displacement: float
    max_displacement: float
    mean_radius_change: float = 0.0


@dataclass
class RelaxResult:
    """Outcome of a relaxation run.

    ``converged`` is False when max_iters ran out before the mean
    displacement fell under term_eps; the system is still usable.
    ``history`` holds (iteration, mean_disp, max_disp, mean_radius) rows.
    """

    system: ParticleSystem
    converged: bool
    iterations: int
    history: list[tuple] = field(default_factory=list)


# -- seeding ------------------------------------------------------------------

def _profile_radii(radii_row, thetas):
    """Lumen radius at given angles for one node's profile, linear between
    adjacent angular samples."""
    k = len(radii_row)
    a = np.mod(thetas, 2.0 * np.pi) * k / (2.0 * np.pi)
    j0 = np.floor(a).astype(np.int64) % k
    w = a - np.floor(a)
    return radii_row[j0] * (1.0 - w) + radii_row[(j0 + 1) % k] * w


def seed_particles(tree: VesselTree, density: float, seed: int = 42) -> ParticleSystem:
    """Scatter particles near the implicit surface, more where radii are larger.

    Every node contributes round(density * 2*pi*Rbar*spacing) particles,
    covering its tube segment: uniformly random angles, radial factor
    1 + U(-0.1, 0.1) on the profile radius, axial offset U(-1/2, 1/2)
    spacing along the tangent (clamped inward at branch ends).  Balloon
    radii start at 0.5*sqrt(1/density).

    Where branches overlap near a junction, seeds that land on one
    branch wall but inside another vessel are not on the lumen surface;
    any seed deeper than 0.15 of its ring radius is discarded.  The
    radial jitter alone never exceeds 0.1, so on single-branch trees
    nothing is dropped.

    Raises
    ------
    EmptyTree
        If the tree has no branches.
    ValueError
        If density rounds every per-node count to zero.
    """
    if tree.is_empty:
        raise EmptyTree("cannot seed an empty tree")
    if density <= 0.0:
        raise ValueError("density must be positive")
    rng = np.random.default_rng(seed)
    chunks = []
    ring_radii = []
    for br in tree.branches:
        tangents = br.tangents
        for i in range(br.num_nodes):
            rbar = br.mean_radius(i)
            count = int(round(density * 2.0 * np.pi * rbar * br.spacing))
            if count == 0:
                continue
            thetas = rng.uniform(0.0, 2.0 * np.pi, size=count)
            jitter = 1.0 + rng.uniform(-0.1, 0.1, size=count)
            axial = rng.uniform(-0.5, 0.5, size=count) * br.spacing
            if i == 0:
                axial = np.abs(axial)
            elif i == br.num_nodes - 1:
                axial = -np.abs(axial)
            rad = _profile_radii(br.radii[i], thetas) * jitter
            u, v, t = br.frames_u[i], br.frames_v[i], tangents[i]
            pts = (br.positions[i]
                   + rad[:, None] * (np.cos(thetas)[:, None] * u
                                     + np.sin(thetas)[:, None] * v)
                   + axial[:, None] * t)
            chunks.append(pts)
            ring_radii.append(np.full(count, rbar))
    if not chunks:
        raise ValueError("density too low: no particles seeded")
    positions = np.vstack(chunks)
    if tree.bifurcations:
        sd = tree.signed_distances(positions)
        keep = sd >= -0.15 * np.concatenate(ring_radii)
        if not np.any(keep):
            raise ValueError("density too low: no particles seeded")
        dropped = int((~keep).sum())
        if dropped:
            logger.debug("dropped %d overlap seeds inside the junction", dropped)
        positions = positions[keep]
    spacing = np.sqrt(1.0 / density)
    r0 = 0.5 * spacing
    logger.debug("seeded %d particles (target spacing %.4g mm)",
                 len(positions), spacing)
    return ParticleSystem(tree, positions, np.full(len(positions), r0),
                          target_spacing=spacing, initial_radius=r0)


# -- normals ------------------------------------------------------------------

def _fallback_dirs(tangents, n):
    """Deterministic unit vectors perpendicular to the given tangents."""
    ref = np.tile(np.array([1.0, 0.0, 0.0]), (n, 1))
    close = np.abs(tangents[:, 0]) > 0.9
    ref[close] = [0.0, 1.0, 0.0]
    d = np.cross(tangents, ref)
    return _unit_rows(d)


def _surface_normals(tree, positions, closest_pts, dists, tangents,
                     closest_branch, closest_param):
    """Outward normals: radial offset direction, overridden by the saddle
    construction inside junction regions."""
    n = len(positions)
    normals = np.empty((n, 3))
    ok = dists >= _COINCIDENT_EPS
    normals[ok] = (positions[ok] - closest_pts[ok]) / dists[ok, None]
    if np.any(~ok):
        normals[~ok] = _fallback_dirs(tangents[~ok], int((~ok).sum()))
    if tree.bifurcations:
        R, _ = tree.radius_toward(closest_branch, closest_param, normals)
        interior = dists - R < -_SADDLE_DEPTH_FRACTION * R
        for bif in tree.bifurcations:
            _apply_saddle_normals(tree, bif, positions, normals, interior)
    return normals


def _fd_gradient(tree, pts, h):
    """Central-difference gradient of the implicit signed distance."""
    offs = np.array([[h, 0.0, 0.0], [-h, 0.0, 0.0], [0.0, h, 0.0],
                     [0.0, -h, 0.0], [0.0, 0.0, h], [0.0, 0.0, -h]])
    probes = (pts[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    sd = tree.signed_distances(probes).reshape(len(pts), 6)
    return np.column_stack([sd[:, 0] - sd[:, 1], sd[:, 2] - sd[:, 3],
                            sd[:, 4] - sd[:, 5]]) / (2.0 * h)


def _apply_saddle_normals(tree, bif, positions, normals, interior=None):
    """Replace normals for particles in the high-curvature region of one
    junction with the measured surface gradient.

    The region test: within 1.5x the junction radius of the center, the
    branch-direction pair is acute, and the particle offset leans within
    45 degrees of the pair's bisector.  There the single-branch radial
    rule ignores the second wall, so the normal is taken from the
    implicit surface itself by central differences of the signed
    distance.  Degenerate gradients (medial points where opposing walls
    cancel) fall back to the radial direction from the junction center.

    Particles flagged interior (well below the wall) aim straight along
    the pair bisector instead: deep in the junction pocket the gradient
    aims at the nearest pocket wall, while ejecting along the wedge
    opening lets the wall force carry the particle up to the saddle,
    where the surface treatment takes over.
    """
    center = bif.center
    rel = positions - center
    dist = np.linalg.norm(rel, axis=1)
    near = dist < 1.5 * bif.local_radius
    if not np.any(near):
        return
    assigned = np.zeros(len(positions), dtype=bool)
    dirs = bif.branch_dirs
    cos_gate = np.cos(np.deg2rad(45.0))
    for a in range(len(dirs)):
        for b in range(a + 1, len(dirs)):
            d1, d2 = dirs[a], dirs[b]
            if d1 @ d2 <= 0.0:
                continue
            dir_mid = d1 + d2
            dir_mid = dir_mid / np.linalg.norm(dir_mid)
            cand = near & ~assigned
            if not np.any(cand):
                return
            udist = np.where(dist > 0.0, dist, 1.0)
            along = (rel @ dir_mid) / udist
            rows = np.nonzero(cand & (along > cos_gate) & (dist > 0.0))[0]
            if len(rows) == 0:
                continue
            assigned[rows] = True
            g = _fd_gradient(tree, positions[rows],
                             1e-4 * bif.local_radius)
            gn = np.linalg.norm(g, axis=1)
            ok = gn > 0.5
            out = np.where(ok[:, None],
                           g / np.where(gn == 0.0, 1.0, gn)[:, None],
                           _unit_rows(rel[rows]))
            if interior is not None:
                out[interior[rows]] = dir_mid
            normals[rows] = out


def particle_normal(particle: Particle, tree: VesselTree) -> np.ndarray:
    """Outward surface normal for one particle.

    Radial direction from the closest centerline point, except inside the
    flagged high-curvature junction regions where the saddle construction
    applies (see module docstring of the private helper).
    """
    pos = particle.position[None, :]
    if particle.closest.distance >= _COINCIDENT_EPS:
        base = (pos - particle.closest.point[None, :]) / particle.closest.distance
    else:
        base = _fallback_dirs(particle.closest.tangent[None, :], 1)
    normals = base.copy()
    if tree.bifurcations:
        R, _ = tree.radius_toward(
            np.array([particle.closest.branch]),
            np.array([particle.closest.arclength]), base)
        interior = particle.closest.distance - R < -_SADDLE_DEPTH_FRACTION * R
        for bif in tree.bifurcations:
            _apply_saddle_normals(tree, bif, pos, normals, interior)
    return normals[0]


# -- forces -------------------------------------------------------------------

def centerline_force(particle: Particle, tree: VesselTree,
                     alpha: float = 0.5) -> np.ndarray:
    """Signed surface-locking force s*n for one particle.

    s > 0 (outward) inside the lumen, s < 0 (inward) outside, exactly 0
    on the surface.

    Raises
    ------
    AxialDirection
        If the particle offset has no cross-section component.
    """
    from .centerline import radius_along_direction

    d = particle.closest.distance
    if d < _COINCIDENT_EPS:
        direction = _fallback_dirs(particle.closest.tangent[None, :], 1)[0]
    else:
        direction = (particle.position - particle.closest.point) / d
    radius = radius_along_direction(tree, particle.closest.branch,
                                    particle.closest.arclength, direction)
    s = _imf(alpha * d / radius + (1.0 - alpha))
    return s * particle_normal(particle, tree)


def repel_force(p_i: Particle, p_j: Particle, alpha: float = 0.5) -> np.ndarray:
    """Balloon repulsion acting on ``p_i`` from ``p_j``.

    Zero beyond the contact cutoff d > 0.5*(r_i + r_j); inside it the
    force magnitude follows the shared profile and the direction is the
    ray j->i projected into the plane perpendicular to p_i's normal.

    Raises
    ------
    CoincidentParticles
        If the two positions are closer than 1e-9 mm.
    """
    delta = p_i.position - p_j.position
    d = float(np.linalg.norm(delta))
    if d < _COINCIDENT_EPS:
        raise CoincidentParticles(
            f"particles {p_i.index} and {p_j.index} coincide")
    rsum = p_i.balloon_radius + p_j.balloon_radius
    if d > 0.5 * rsum:
        return np.zeros(3)
    mag = _imf(alpha * d / rsum + (1.0 - alpha))
    proj = delta - (delta @ p_i.normal) * p_i.normal
    norm = np.linalg.norm(proj)
    if norm < 1e-12:
        return np.zeros(3)
    return mag * proj / norm


def neighbor_set(system: ParticleSystem, i: int,
                 neighbor_count: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor indices of particle ``i``: the M nearest by the spatial
    index, and the subset inside the balloon contact cutoff used for
    forces.

    Returns
    -------
    (m_set, force_set) : int arrays, both ordered by increasing distance.
    """
    k = min(neighbor_count + 1, system.size)
    dists, idx = system.kdtree.query(system.positions[i], k=k)
    dists = np.atleast_1d(dists)
    idx = np.atleast_1d(idx)
    keep = idx != i
    m_set = idx[keep][:neighbor_count]
    m_dists = dists[keep][:neighbor_count]
    cutoff = 0.5 * (system.balloon_radii[i] + system.balloon_radii[m_set])
    return m_set, m_set[m_dists <= cutoff]


def ideal_compress(alpha: float = 0.5) -> float:
    """Compression of an ideal hexagonal packing: six contacts exactly at
    the cutoff distance, whose force vectors cancel."""
    return 6.0 * _imf(1.0 - 0.5 * alpha)


def compress_magnitude(system: ParticleSystem, i: int,
                       alpha: float = 0.5, neighbor_count: int = 25) -> float:
    """How much particle i's contact forces squeeze rather than push it:
    the sum of force magnitudes minus the magnitude of the vector sum.
    Non-negative by the triangle inequality."""
    _, force_set = neighbor_set(system, i, neighbor_count)
    if len(force_set) == 0:
        return 0.0
    total = np.zeros(3)
    mags = 0.0
    for j in force_set:
        f = _pair_force(system, i, int(j), alpha)
        mags += float(np.linalg.norm(f))
        total += f
    return mags - float(np.linalg.norm(total))


def _pair_force(system, i, j, alpha):
    """repel_force with the coincident case resolved by deterministic
    tangent-plane jitter keyed by particle index."""
    try:
        return repel_force(system.particle(i), system.particle(j), alpha)
    except CoincidentParticles:
        n = system.normals[i]
        e1 = _fallback_dirs(n[None, :], 1)[0]
        e2 = np.cross(n, e1)
        ang = i * _GOLDEN_ANGLE
        mag = _imf(1.0 - alpha)
        return mag * (np.cos(ang) * e1 + np.sin(ang) * e2)


def update_balloon_radius(system: ParticleSystem, i: int,
                          params: RelaxationParams) -> float:
    """Adapt particle i's balloon radius by negative feedback toward the
    ideal hexagonal compression, returning the new radius."""
    res = params.resolve(system)
    compress = compress_magnitude(system, i, res.alpha, res.neighbor_count)
    r = _next_radius(np.array([system.balloon_radii[i]]),
                     np.array([compress]), res)[0]
    system.balloon_radii[i] = r
    return float(r)


def _next_radius(radii, compress, res):
    arg = np.maximum(1.0 + res.eta * (compress - ideal_compress(res.alpha)),
                     1e-6)
    dr = np.clip(-np.log(arg), res.dr_min, res.dr_max)
    return np.clip(radii + dr, res.r_floor, res.r_ceil)


# -- the relaxation loop ------------------------------------------------------

def relax_step(system: ParticleSystem, params: RelaxationParams) -> StepStats:
    """One synchronous update of every particle.

    Phase (a) evaluates normals, centerline forces, contact forces and
    compression from a frozen snapshot of positions; phase (b) applies
    the displacements, adapts balloon radii, and rebuilds the caches.
    Displacements are step_scale*(mu*F_cl + sum F_ij)/mass; particles at
    free branch ends are kept from sliding past the end plane.
    """
    res = params.resolve(system)
    P = system.positions
    n = system.size
    normals = system.normals
    d = system.closest_dist

    # centerline force: signed scalar along the normal
    radial = np.empty((n, 3))
    ok = d >= _COINCIDENT_EPS
    radial[ok] = (P[ok] - system.closest_point[ok]) / d[ok, None]
    if np.any(~ok):
        radial[~ok] = _fallback_dirs(system.closest_tangent[~ok],
                                     int((~ok).sum()))
    R, _ = system.tree.radius_toward(system.closest_branch,
                                     system.closest_param, radial)
    s = _imf(res.alpha * d / R + (1.0 - res.alpha))
    f_cl = s[:, None] * normals

    # contact forces over the M nearest neighbors
    k = min(res.neighbor_count + 1, n)
    nd, nj = system.kdtree.query(P, k=k)
    nd = np.atleast_2d(nd)
    nj = np.atleast_2d(nj)
    self_mask = nj == np.arange(n)[:, None]
    rank = np.cumsum(~self_mask, axis=1) - 1
    valid = ~self_mask & (rank < res.neighbor_count)

    rsum = system.balloon_radii[:, None] + system.balloon_radii[nj]
    contact = valid & (nd <= 0.5 * rsum) & (nd >= _COINCIDENT_EPS)
    coincident = valid & (nd < _COINCIDENT_EPS)

    delta = P[:, None, :] - P[nj]
    dots = np.einsum("nmk,nk->nm", delta, normals)
    proj = delta - dots[..., None] * normals[:, None, :]
    pnorm = np.linalg.norm(proj, axis=2)
    usable = contact & (pnorm >= 1e-12)
    mag = np.where(usable,
                   _imf(np.where(contact, res.alpha * nd / rsum
                                 + (1.0 - res.alpha), 1.0)),
                   0.0)
    fvec = (mag / np.where(pnorm == 0.0, 1.0, pnorm))[..., None] * proj

    if np.any(coincident):
        rows, cols = np.nonzero(coincident)
        e1 = _fallback_dirs(normals[rows], len(rows))
        e2 = np.cross(normals[rows], e1)
        ang = rows * _GOLDEN_ANGLE
        jmag = _imf(1.0 - res.alpha)
        fvec[rows, cols] = jmag * (np.cos(ang)[:, None] * e1
                                   + np.sin(ang)[:, None] * e2)
        mag[rows, cols] = jmag

    f_rep = fvec.sum(axis=1)
    compress = mag.sum(axis=1) - np.linalg.norm(f_rep, axis=1)

    # phase (b): move, adapt balloons, contain free ends, reindex
    disp = res.step_scale * (res.mu * f_cl + f_rep) / res.mass
    dnorm = np.linalg.norm(disp, axis=1)
    cap = _MAX_STEP_FRACTION * system.target_spacing
    over = dnorm > cap
    if np.any(over):
        disp[over] *= (cap / dnorm[over])[:, None]
    new_p = P + disp
    for bid, node in system.tree.endpoints():
        br = system.tree.branches[bid]
        end_param = 0.0 if node == 0 else br.total_length
        outward = -br.tangents[0] if node == 0 else br.tangents[-1]
        at_end = ((system.closest_branch == bid)
                  & (np.abs(system.closest_param - end_param) < 1e-9))
        if np.any(at_end):
            overhang = (new_p[at_end] - br.positions[node]) @ outward
            new_p[at_end] -= np.maximum(overhang, 0.0)[:, None] * outward

    moved = np.linalg.norm(new_p - P, axis=1)
    system.positions = new_p
    new_r = _next_radius(system.balloon_radii, compress, res)
    dr = np.abs(new_r - system.balloon_radii)
    system.balloon_radii = new_r
    system.iteration += 1
    system.refresh()
    return StepStats(float(moved.mean()), float(moved.max()),
                     float(dr.mean()))


def relax(system: ParticleSystem, params: RelaxationParams) -> RelaxResult:
    """Run relax_step until the system settles or max_iters is reached;
    the result carries a converged flag rather than raising on
    exhaustion.

    Settled means the mean displacement AND the mean balloon radius
    change both drop under term_eps on the same step.  Freshly seeded
    clouds have no balloon contacts (seed radius is half the target
    spacing), so their first steps are positionally quiet while the
    balloons are still inflating toward contact; the radius condition
    keeps those steps from terminating the loop.  A cloud that is
    already at the packed equilibrium satisfies both conditions on its
    first step.
    """
    res = params.resolve(system)
    history = []
    converged = False
    iterations = 0
    for _ in range(res.max_iters):
        stats = relax_step(system, params)
        iterations += 1
        history.append((system.iteration, stats.mean_displacement,
                        stats.max_displacement,
                        float(system.balloon_radii.mean())))
        if (stats.mean_displacement < res.term_eps
                and stats.mean_radius_change < res.term_eps):
            converged = True
            break
    if not converged:
        logger.info("relaxation hit max_iters=%d without converging",
                    res.max_iters)
    return RelaxResult(system, converged, iterations, history)
