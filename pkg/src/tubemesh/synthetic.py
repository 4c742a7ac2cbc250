"""Deterministic vessel-tree fixtures with known analytic surfaces.

Each generator produces a :class:`~tubemesh.centerline.VesselTree` whose
lumen surface has a closed-form description (straight tube, circular-arc
tube, conical junction fans, Gaussian stenosis), which makes surface
distances and topology checkable in tests without reference data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .centerline import Branch, VesselTree, build_rmf_frames
from .errors import InvalidSpec

_KINDS = ("tube", "curved_tube", "y_bifurcation", "n_furcation", "stenosis_tube")

# fixture constants: child taper keeps junction ray pairs acute so the
# saddle-normal construction is exercised; bend radius is in units of the
# lumen radius
CHILD_TAPER = 0.8
BEND_RADIUS_FACTOR = 5.0
CHILD_LENGTH_FACTOR = 0.5


@dataclass
class ShapeSpec:
    """Parameters for one synthetic vessel shape.

    Parameters
    ----------
    kind : str
        One of ``tube``, ``curved_tube``, ``y_bifurcation``,
        ``n_furcation``, ``stenosis_tube``.
    radius : float
        Lumen radius in mm (parent radius for junction kinds).
    length : float
        Centerline arclength of the main branch in mm.
    spacing : float
        Requested node spacing in mm.
    k : int
        Radial samples per node, at least 8.
    angle_deg : float
        Branch angle in degrees, in (0, 90); used by junction kinds.
    count : int
        Number of children for ``n_furcation``, at least 2.
    depth : float
        Stenosis depth fraction in [0, 1); used by ``stenosis_tube``.
    """

    kind: str
    radius: float = 1.0
    length: float = 20.0
    spacing: float = 1.0
    k: int = 16
    angle_deg: float = 40.0
    count: int = 3
    depth: float = 0.4

    def validate(self) -> None:
        if self.kind not in _KINDS:
            raise InvalidSpec(f"unknown shape kind {self.kind!r}")
        if self.radius <= 0.0 or self.length <= 0.0 or self.spacing <= 0.0:
            raise InvalidSpec("radius, length and spacing must be positive")
        if self.k < 8:
            raise InvalidSpec("need at least 8 radial samples")
        if not (0.0 < self.angle_deg < 90.0):
            raise InvalidSpec("branch angle must lie in (0, 90) degrees")
        if self.kind == "n_furcation" and self.count < 2:
            raise InvalidSpec("n_furcation needs at least 2 children")
        if self.kind == "stenosis_tube" and not (0.0 <= self.depth < 1.0):
            raise InvalidSpec("stenosis depth must lie in [0, 1)")
        if self.length < self.spacing:
            raise InvalidSpec("length must be at least one spacing step")


def _node_count(length: float, spacing: float) -> int:
    return max(int(round(length / spacing)), 1) + 1


def _straight(origin, direction, length, spacing):
    n = _node_count(length, spacing)
    s = np.linspace(0.0, length, n)
    return np.asarray(origin) + s[:, None] * np.asarray(direction), s


def _cone_dirs(axis, angle_rad, count):
    """Unit directions evenly spread on a cone of given half-angle."""
    axis = np.asarray(axis, dtype=float)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(axis @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = ref - (ref @ axis) * axis
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    psi = 2.0 * np.pi * np.arange(count) / count
    return (np.cos(angle_rad) * axis
            + np.sin(angle_rad) * (np.cos(psi)[:, None] * u + np.sin(psi)[:, None] * v))


def generate(spec: ShapeSpec, seed: int) -> VesselTree:
    """Build the fixture tree described by ``spec``.

    The seed feeds a private generator that picks the frame seed
    direction; regeneration with the same seed is bit-identical.

    Raises
    ------
    InvalidSpec
        If any spec field violates its documented range.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    z = np.array([0.0, 0.0, 1.0])
    angle = np.deg2rad(spec.angle_deg)
    branches: list[Branch] = []

    if spec.kind in ("tube", "stenosis_tube"):
        pos, s = _straight(np.zeros(3), z, spec.length, spec.spacing)
        radii = np.full((len(pos), spec.k), spec.radius)
        if spec.kind == "stenosis_tube":
            width = spec.length / 10.0
            profile = 1.0 - spec.depth * np.exp(-((s - spec.length / 2.0) ** 2)
                                                / width ** 2)
            radii = radii * profile[:, None]
        branches.append(Branch(pos, radii, spacing=s[1] - s[0]))

    elif spec.kind == "curved_tube":
        rho = BEND_RADIUS_FACTOR * spec.radius
        n = _node_count(spec.length, spec.spacing)
        s = np.linspace(0.0, spec.length, n)
        pos = np.column_stack([rho * (1.0 - np.cos(s / rho)),
                               np.zeros(n),
                               rho * np.sin(s / rho)])
        radii = np.full((n, spec.k), spec.radius)
        branches.append(Branch(pos, radii, spacing=spec.length / (n - 1)))

    else:
        # junction kinds: straight parent along z plus children fanning out
        # from its far end
        pos, s = _straight(np.zeros(3), z, spec.length, spec.spacing)
        radii = np.full((len(pos), spec.k), spec.radius)
        branches.append(Branch(pos, radii, spacing=s[1] - s[0]))
        apex = pos[-1]
        attach = (0, len(pos) - 1)
        child_len = CHILD_LENGTH_FACTOR * spec.length
        child_r = CHILD_TAPER * spec.radius
        if spec.kind == "y_bifurcation":
            dirs = [np.array([np.sin(a), 0.0, np.cos(a)])
                    for a in (angle, -angle)]
        else:
            dirs = list(_cone_dirs(z, angle, spec.count))
        for d in dirs:
            cpos, cs = _straight(apex, d, child_len, spec.spacing)
            cradii = np.full((len(cpos), spec.k), child_r)
            branches.append(Branch(cpos, cradii, spacing=cs[1] - cs[0],
                                   parent=attach))

    seed_u = _frame_seed(rng, branches)
    framed = [build_rmf_frames(br, seed_u) for br in branches]
    return VesselTree(framed, frame_seed_u=seed_u)


def _frame_seed(rng, branches) -> np.ndarray:
    """Random unit vector usable as the frame seed for every branch."""
    for _ in range(100):
        cand = rng.normal(size=3)
        norm = np.linalg.norm(cand)
        if norm < 1e-6:
            continue
        cand /= norm
        ok = all(np.linalg.norm(np.cross(cand, br.tangents[0])) >= 1e-6
                 for br in branches)
        if ok:
            return cand
    raise InvalidSpec("could not find a frame seed direction")
