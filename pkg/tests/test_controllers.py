import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from silrecon import controllers as ctl
from silrecon import shapes
from silrecon.geometry import Mesh, merge_meshes


def _rot_z(deg: float) -> np.ndarray:
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def _angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    return math.degrees(math.acos(min(1.0, abs(float(u @ v)))))


def test_axis_aligned_box_is_its_own_obb():
    c = ctl.fit_cuboid(shapes.box(size=(1, 0.5, 0.25)), 0)
    np.testing.assert_allclose(c.half_extents, [0.5, 0.25, 0.125], atol=1e-12)
    np.testing.assert_allclose(np.abs(c.axes), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(c.center, 0, atol=1e-12)


def _grid_obb(points: np.ndarray) -> tuple[float, float]:
    """Minimum-volume box over rotations about z on a 1 degree grid: (angle, volume)."""
    best = (None, math.inf)
    for deg in range(0, 180):
        p = points @ _rot_z(deg)
        vol = float(np.prod(p.max(axis=0) - p.min(axis=0)))
        if vol < best[1]:
            best = (deg, vol)
    return best


def test_rotated_box_matches_grid_oracle():
    mesh = shapes.box(size=(1, 0.5, 0.25), rotation=_rot_z(30))
    c = ctl.fit_cuboid(mesh, 0)
    deg, vol = _grid_obb(mesh.vertices)
    assert deg == 30
    long_axis = _rot_z(deg)[:, 0]
    assert _angle_deg(c.axes[0], long_axis) <= 1.0
    assert abs(c.volume() - 0.125) <= 0.02 * 0.125
    assert abs(c.volume() - vol) <= 0.02 * vol


def test_planar_quad_gives_thin_cuboid():
    quad = Mesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]], [0, 0])
    c = ctl.fit_cuboid(quad, 0)
    assert c.half_extents.min() == ctl.EPS_EXTENT


def test_cylinder_gc():
    gc = ctl.fit_gc(shapes.cylinder(0.2, 1.0), 0, 5)
    assert gc.n_profiles == 5
    heights = np.sort(gc.axis_points[:, 1])
    np.testing.assert_allclose(heights, np.linspace(-0.5, 0.5, 5), atol=1e-9)
    np.testing.assert_allclose(gc.radii, 0.2, rtol=0.03)


def test_cone_radii_decrease():
    gc = ctl.fit_gc(shapes.cone(0.3, 1.0), 0, 7)
    r = gc.radii if gc.axis_points[0, 1] < gc.axis_points[-1, 1] else gc.radii[::-1]
    assert np.all(np.diff(r) < 0)


def test_two_profile_gc_is_straight():
    gc = ctl.fit_gc(shapes.cylinder(), 0, 2)
    assert gc.n_profiles == 2
    with pytest.raises(ctl.ControllerError):
        ctl.fit_gc(shapes.cylinder(), 0, 1)


def test_classify_box_and_cylinder():
    box = shapes.box(size=(0.3, 0.6, 0.2))
    assert ctl.fit_residual(box, 0, ctl.fit_cuboid(box, 0)) < 1e-12
    assert ctl.classify_part(box, 0) == "cuboid"
    assert ctl.classify_part(shapes.cylinder(), 0) == "gc"


def test_classify_tie_prefers_cuboid(monkeypatch):
    monkeypatch.setattr(ctl, "fit_residual", lambda mesh, part, shape: 0.5)
    assert ctl.classify_part(shapes.cylinder(), 0) == "cuboid"


def test_bind_box_local_within_extents():
    mesh = shapes.box(size=(0.8, 0.4, 0.2), rotation=_rot_z(20))
    cs = ctl.fit_controllers(mesh)
    b = ctl.bind_mesh(mesh, cs)
    h = cs[0].shape.half_extents
    assert np.all(np.abs(b.local[:, :3]) <= h + 1e-12)


def test_bind_cylinder_t_spans_unit_interval():
    mesh = shapes.cylinder()
    cs = ctl.fit_controllers(mesh)
    assert cs[0].kind == "gc"
    t = ctl.bind_mesh(mesh, cs).local[:, 0]
    assert t.min() == pytest.approx(0.0, abs=1e-9)
    assert t.max() == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("factory", [shapes.chair, shapes.table, shapes.lamp, shapes.desk])
def test_bind_roundtrip(factory):
    mesh = factory()
    cs = ctl.fit_controllers(mesh)
    b = ctl.bind_mesh(mesh, cs)
    np.testing.assert_allclose(ctl.reconstruct_vertices(mesh, b, cs), mesh.vertices, atol=1e-9)


@given(st.floats(-180, 180), st.floats(-90, 90), st.floats(-180, 180),
       st.lists(st.floats(0.05, 1.0), min_size=3, max_size=3))
def test_bind_roundtrip_random_box(a, b, c, size):
    rot = Rotation.from_euler("zyx", [a, b, c], degrees=True).as_matrix()
    mesh = merge_meshes([shapes.box(size=size, rotation=rot), shapes.cylinder()])
    cs = ctl.fit_controllers(mesh)
    bind = ctl.bind_mesh(mesh, cs)
    np.testing.assert_allclose(ctl.reconstruct_vertices(mesh, bind, cs), mesh.vertices, atol=1e-9)


def test_bind_requires_every_part():
    mesh = shapes.chair()
    cs = ctl.fit_controllers(mesh)[:-1]
    with pytest.raises(ctl.ControllerError, match="no controller"):
        ctl.bind_mesh(mesh, cs)


def _straight_gc(radii):
    n = len(radii)
    return ctl.make_gc(np.c_[np.zeros(n), np.linspace(0, 1, n), np.zeros(n)], radii)


def test_symmetrize_constant_radii():
    out = ctl.symmetrize_gc(_straight_gc([0.19, 0.21, 0.20]), _straight_gc([0.2, 0.2, 0.2]))
    np.testing.assert_allclose(out.radii, 0.20)


def test_symmetrize_asymmetric_original_is_noop():
    c_r = _straight_gc([0.19, 0.21, 0.20])
    assert ctl.symmetrize_gc(c_r, _straight_gc([0.1, 0.2, 0.3])) is c_r


def test_symmetrize_mirror_average():
    out = ctl.symmetrize_gc(_straight_gc([0.1, 0.3, 0.2]), _straight_gc([0.1, 0.3, 0.1]))
    np.testing.assert_allclose(out.radii, [0.15, 0.3, 0.15])


def test_json_roundtrip():
    cs = ctl.fit_controllers(shapes.table())
    back = ctl.controllers_from_json(ctl.controllers_to_json(cs))
    assert [c.kind for c in back] == [c.kind for c in cs]
    for a, b in zip(cs, back):
        assert ctl.movement(a.shape, b.shape) == 0.0


def test_json_rejects_duplicate_ids():
    doc = ctl.controllers_to_json(ctl.fit_controllers(shapes.chair()))
    doc["controllers"][1]["id"] = 0
    with pytest.raises(ctl.ControllerError, match="unique"):
        ctl.controllers_from_json(doc)


def test_mirror_is_involution():
    for c in ctl.fit_controllers(shapes.table()):
        twice = ctl.mirror_shape(ctl.mirror_shape(c.shape))
        assert ctl.movement(c.shape, twice) == 0.0


def test_blend_endpoints():
    a = ctl.fit_cuboid(shapes.box(size=(1, 0.5, 0.2)), 0)
    b = ctl.CuboidController([0.1, 0, 0], np.eye(3), [0.6, 0.3, 0.1])
    assert ctl.blend_shapes(a, b, 0) is a
    assert ctl.movement(ctl.blend_shapes(a, b, 1), b) < 1e-12
    mid = ctl.blend_shapes(a, b, 0.5)
    np.testing.assert_allclose(mid.center, [0.05, 0, 0])
