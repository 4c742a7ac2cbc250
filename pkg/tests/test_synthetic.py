"""Synthetic fixture generators: shapes, determinism, validation."""

import numpy as np
import pytest

from tubemesh.centerline import detect_bifurcations
from tubemesh.errors import InvalidSpec
from tubemesh.synthetic import BEND_RADIUS_FACTOR, CHILD_TAPER, ShapeSpec, generate


def test_tube_node_count_and_radii():
    tree = generate(ShapeSpec("tube", radius=1.0, length=10.0, spacing=1.0, k=16),
                    seed=1)
    br = tree.branches[0]
    assert br.num_nodes == 11
    assert np.all(br.radii == 1.0)
    assert np.allclose(br.positions[:, :2], 0.0)


def test_curved_tube_lies_on_bend_circle():
    spec = ShapeSpec("curved_tube", radius=1.0, length=20.0, spacing=1.0)
    tree = generate(spec, seed=1)
    rho = BEND_RADIUS_FACTOR * spec.radius
    center = np.array([rho, 0.0, 0.0])
    d = np.linalg.norm(tree.branches[0].positions - center, axis=1)
    assert np.allclose(d, rho, atol=1e-12)


def test_y_bifurcation_structure():
    spec = ShapeSpec("y_bifurcation", radius=1.0, angle_deg=40.0)
    tree = generate(spec, seed=1)
    assert len(tree.branches) == 3
    infos = detect_bifurcations(tree)
    assert len(infos) == 1
    assert len(infos[0].branch_dirs) == 3
    z = np.array([0.0, 0.0, 1.0])
    for child in tree.branches[1:]:
        assert np.all(child.radii == CHILD_TAPER * spec.radius)
        cosang = child.tangents[0] @ z
        assert abs(cosang - np.cos(np.deg2rad(40.0))) < 1e-9


def test_n_furcation_children_on_cone():
    spec = ShapeSpec("n_furcation", count=3, angle_deg=30.0)
    tree = generate(spec, seed=1)
    assert len(tree.branches) == 4
    z = np.array([0.0, 0.0, 1.0])
    for child in tree.branches[1:]:
        assert abs(child.tangents[0] @ z - np.cos(np.deg2rad(30.0))) < 1e-9
    infos = detect_bifurcations(tree)
    assert len(infos) == 1
    assert len(infos[0].branch_dirs) == 4  # parent end + 3 children


def test_stenosis_minimum_at_midpoint():
    spec = ShapeSpec("stenosis_tube", radius=1.0, length=20.0, spacing=1.0,
                     depth=0.5)
    tree = generate(spec, seed=1)
    br = tree.branches[0]
    r = br.radii[:, 0]
    i = int(np.argmin(r))
    assert abs(br.positions[i, 2] - 10.0) < 1e-9
    assert abs(r[i] - 0.5) < 1e-6


def test_generation_deterministic_per_seed():
    a = generate(ShapeSpec("y_bifurcation"), seed=42)
    b = generate(ShapeSpec("y_bifurcation"), seed=42)
    for ba, bb in zip(a.branches, b.branches):
        assert np.array_equal(ba.positions, bb.positions)
        assert np.array_equal(ba.radii, bb.radii)
        assert np.array_equal(ba.frames_u, bb.frames_u)
        assert np.array_equal(ba.frames_v, bb.frames_v)
    assert np.array_equal(a.frame_seed_u, b.frame_seed_u)


@pytest.mark.parametrize("bad", [
    ShapeSpec("cube"),
    ShapeSpec("tube", radius=-1.0),
    ShapeSpec("tube", length=0.0),
    ShapeSpec("tube", spacing=0.0),
    ShapeSpec("tube", k=4),
    ShapeSpec("y_bifurcation", angle_deg=0.0),
    ShapeSpec("y_bifurcation", angle_deg=95.0),
    ShapeSpec("n_furcation", count=1),
    ShapeSpec("stenosis_tube", depth=1.0),
    ShapeSpec("tube", length=0.5, spacing=1.0),
])
def test_invalid_specs_rejected(bad):
    with pytest.raises(InvalidSpec):
        generate(bad, seed=0)


def test_generated_trees_pass_validation():
    for kind in ("tube", "curved_tube", "y_bifurcation", "n_furcation",
                 "stenosis_tube"):
        tree = generate(ShapeSpec(kind), seed=2)
        for br in tree.branches:
            assert br.has_frames
            t = br.tangents
            assert np.allclose(np.einsum("ij,ij->i", t, br.frames_u), 0.0,
                               atol=1e-9)
            gaps = np.linalg.norm(np.diff(br.positions, axis=0), axis=1)
            assert np.all(np.abs(gaps - br.spacing) <= 0.1 * br.spacing)
