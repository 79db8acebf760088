import numpy as np
import pytest

from silrecon import controllers as ctl
from silrecon import shapes
from silrecon.controllers import Controller, CuboidController
from silrecon.pipeline import DegenerateGeometryError, correspond_silhouettes, reconstruct_from
from silrecon.reconstruction import (DegenerateViewError, ReconstructionError, RunMatch, SupportingPlane,
                                     SymmetryRelation, build_run_matches, check_view, detect_symmetric_pairs, lift_to_plane,
                                     reconstruct_external, reconstruct_pair, supporting_plane)
from silrecon.render import render_silhouette

from conftest import canonical_pose, mask_image


def _center(shape) -> np.ndarray:
    return shape.center if shape.kind == "cuboid" else shape.center()


def reconstruct(mesh, target_mesh, pose, res=256):
    """Controllers of ``mesh`` and their reconstruction from the silhouette of ``target_mesh``."""
    omega_o = ctl.fit_controllers(mesh)
    target = mask_image(render_silhouette(target_mesh, pose, res).mask)
    match = correspond_silhouettes(mesh, target, pose, res, 128)
    return omega_o, reconstruct_from(match, omega_o, 0.05)


def test_chair_pairs(normalized_models):
    cs = ctl.fit_controllers(normalized_models["chair"])
    assert detect_symmetric_pairs(cs) == [SymmetryRelation(0, 0), SymmetryRelation(1, 2),
                                          SymmetryRelation(3, 4), SymmetryRelation(5, 5)]


def test_asymmetric_model_has_few_pairs(normalized_models):
    cs = ctl.fit_controllers(normalized_models["stool_asym"])
    rels = detect_symmetric_pairs(cs)
    assert len({r.a for r in rels} | {r.b for r in rels}) < len(cs)


def test_pair_tolerance():
    # an x offset of 0.02 counts twice, once at the center and once at the axis endpoints
    a = Controller(0, CuboidController([0.3, 0, 0], np.eye(3), [0.1, 0.1, 0.1]), 0)
    b = Controller(1, CuboidController([-0.32, 0, 0], np.eye(3), [0.1, 0.1, 0.1]), 1)
    assert SymmetryRelation(0, 1) in detect_symmetric_pairs([a, b], tol=0.05)
    assert SymmetryRelation(0, 1) not in detect_symmetric_pairs([a, b], tol=0.01)


def test_plane_of_planar_points():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-1, 1, (20, 2)), np.full(20, 0.3)]
    plane = supporting_plane(pts, [0.2, 0.1, 1.0])
    np.testing.assert_allclose(plane.normal, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(plane.distance(pts), 0, atol=1e-12)


def test_plane_of_cuboid_face():
    c = CuboidController([0.1, 0.2, 0.3], np.eye(3), [0.2, 0.3, 0.4])
    face = np.array([[0.3, y, z] for y in (-0.1, 0.5) for z in (-0.1, 0.7)])
    plane = supporting_plane(face, [1.0, 0.3, 0.2])
    np.testing.assert_allclose(plane.normal, c.axes[0], atol=1e-12)


def test_collinear_generators_raise():
    with pytest.raises(ReconstructionError):
        supporting_plane(np.c_[np.linspace(0, 1, 5), np.zeros(5), np.zeros(5)], [0, 0, 1])
    with pytest.raises(ReconstructionError):
        supporting_plane(np.zeros((2, 3)), [0, 0, 1])


def test_plane_containing_view_falls_back():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 1], [1, 0, 1]], dtype=float)
    plane = supporting_plane(pts, [0, 0, 1])
    np.testing.assert_allclose(plane.normal, [0, 0, 1])


def test_lift_projects_back(normalized_models):
    img = render_silhouette(normalized_models["chair"], canonical_pose(30, 20), 256)
    plane = SupportingPlane(np.array([0.1, 0.0, -0.2]), np.array([0.3, 0.4, 0.5]) / np.linalg.norm([0.3, 0.4, 0.5]))
    px = np.array([[10.0, 20.0], [128.5, 64.25], [200.0, 250.0]])
    lifted = lift_to_plane(px, plane, img.view)
    np.testing.assert_allclose(plane.distance(lifted), 0, atol=1e-12)
    np.testing.assert_allclose(img.view.project(lifted)[:, :2], px, atol=1e-9)


@pytest.mark.parametrize("name", ["chair", "table", "lamp", "stool_asym", "desk"])
def test_identity_reconstruction(normalized_models, name):
    mesh = normalized_models[name]
    omega_o, omega_r = reconstruct(mesh, mesh, canonical_pose(45, 20))
    for a, b in zip(omega_o, omega_r):
        assert ctl.movement(a.shape, b.shape) <= 1e-9


def test_scaled_box():
    box = shapes.box(size=(0.3, 0.6, 0.3))
    omega_o, omega_r = reconstruct(box, box.with_vertices(box.vertices * [1, 1.5, 1]), canonical_pose(45, 20))
    h0, h1 = omega_o[0].shape.half_extents, omega_r[0].shape.half_extents
    tall = int(np.argmax(np.abs(omega_o[0].shape.axes[:, 1])))
    assert h1[tall] / h0[tall] == pytest.approx(1.5, rel=0.03)
    others = [k for k in range(3) if k != tall]
    np.testing.assert_allclose(h1[others], h0[others], rtol=0.03)


def _spread_legs(mesh, delta):
    v = mesh.vertices.copy()
    for part in range(1, 5):
        ids = mesh.part_vertex_ids(part)
        v[ids, 0] += delta * np.sign(v[ids, 0].mean())
    return mesh.with_vertices(v)


@pytest.mark.parametrize("az, visible", [(60, ((1, 2), (3, 4))), (90, ((1, 2),))])
def test_mirrored_legs_move_together(normalized_models, az, visible):
    mesh = normalized_models["table"]
    delta = 0.05
    omega_o, omega_r = reconstruct(mesh, _spread_legs(mesh, delta), canonical_pose(az, 20))
    if az == 90:
        # the back legs hide behind the front ones and stay untouched
        assert ctl.movement(omega_o[3].shape, omega_r[3].shape) == 0.0
    for a, b in visible:
        ca, cb = _center(omega_r[a].shape), _center(omega_r[b].shape)
        np.testing.assert_allclose(ca * [-1, 1, 1], cb, atol=1e-12)
        moved = abs(ca[0]) - abs(_center(omega_o[a].shape)[0])
        assert moved == pytest.approx(delta, abs=0.01)


@pytest.mark.parametrize("az", [0, 180, 1.0])
def test_view_along_symmetry_normal_is_degenerate(normalized_models, az):
    img = render_silhouette(normalized_models["table"], canonical_pose(az, 20), 256)
    with pytest.raises(DegenerateViewError):
        check_view(img.view)
    check_view(render_silhouette(normalized_models["table"], canonical_pose(10, 20), 256).view)


def test_pipeline_reports_degenerate_view(normalized_models):
    mesh = normalized_models["table"]
    with pytest.raises(DegenerateGeometryError):
        reconstruct(mesh, _spread_legs(mesh, 0.05), canonical_pose(0, 20))


def test_external_without_samples():
    c = Controller(0, CuboidController([0, 0, 0], np.eye(3), [0.1, 0.1, 0.1]), 0)
    view = render_silhouette(shapes.box(), canonical_pose(30), 64).view
    with pytest.raises(ReconstructionError):
        reconstruct_external(c, [RunMatch(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 2)))], view)


def test_pair_with_internal_partner_is_mirrored(normalized_models):
    mesh = normalized_models["table"]
    omega_o = ctl.fit_controllers(mesh)
    pose = canonical_pose(60, 20)
    img = render_silhouette(mesh, pose, 256)
    target = mask_image(render_silhouette(_spread_legs(mesh, 0.05), pose, 256).mask)
    match = correspond_silhouettes(mesh, target, pose, 256, 128)
    runs = build_run_matches(img, match["c_param"], match["o_param"], match["segments"], omega_o)
    a, b = reconstruct_pair(omega_o[1], omega_o[2], runs[1], [], img.view)
    assert ctl.movement(b.shape, ctl.mirror_shape(a.shape)) <= 1e-12


def test_pair_examples():
    a = Controller(0, CuboidController([0.3, 0, 0], np.eye(3), [0.1, 0.1, 0.1]), 0)
    b = Controller(1, CuboidController([-0.3, 0, 0], np.eye(3), [0.1, 0.1, 0.1]), 1)
    assert detect_symmetric_pairs([a, b]) == [SymmetryRelation(0, 1)]
    mid = Controller(0, CuboidController([0, 0.2, 0], np.eye(3), [0.1, 0.1, 0.1]), 0)
    assert detect_symmetric_pairs([mid]) == [SymmetryRelation(0, 0)]
    tol = 0.01
    off = Controller(1, CuboidController([-0.3 - 2 * tol, 0, 0], np.eye(3), [0.1, 0.1, 0.1]), 1)
    assert SymmetryRelation(0, 1) not in detect_symmetric_pairs([a, off], tol=tol)


def test_image_plane_scaling():
    # at azimuth 90 the image plane holds x and y, z is depth
    box = shapes.box(size=(0.3, 0.4, 0.2))
    omega_o, omega_r = reconstruct(box, box.with_vertices(box.vertices * [1.5, 1.5, 1.0]), canonical_pose(90, 0))
    h0, h1 = omega_o[0].shape.half_extents, omega_r[0].shape.half_extents
    axes = np.abs(omega_o[0].shape.axes).argmax(axis=1)
    ratio = {int(axes[k]): h1[k] / h0[k] for k in range(3)}
    assert ratio[2] == pytest.approx(1.0, rel=0.03)
    assert ratio[0] == pytest.approx(1.5, rel=0.03)
    assert ratio[1] == pytest.approx(1.5, rel=0.03)
