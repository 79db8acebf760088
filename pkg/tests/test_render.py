import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from silrecon import shapes
from silrecon.geometry import merge_meshes
from silrecon.render import (BACKGROUND, CameraPose, LabeledSilhouette, RenderError, SilhouetteImage,
                             extract_contour, generate_pose_set, load_png, rasterize_loops,
                             render_set, render_silhouette, save_png, save_svg, signed_area)

from conftest import canonical_pose


def test_360_distinct_poses():
    poses = generate_pose_set(360)
    assert len(poses) == 360
    assert len({(p.azimuth, p.elevation) for p in poses}) == 360


def test_single_pose_is_canonical():
    (p,) = generate_pose_set(1)
    assert (p.azimuth, p.elevation) == (0.0, 0.0)


@given(st.integers(1, 400))
def test_pose_sets_distinct(n):
    poses = generate_pose_set(n)
    assert len({(p.azimuth, p.elevation) for p in poses}) == n
    assert all(abs(p.elevation) <= math.pi / 3 + 1e-12 for p in poses)


def test_grid_layout_elevation_major():
    poses = generate_pose_set(360)
    assert poses[7 * 24].elevation == pytest.approx(0.0)
    assert poses[1].elevation == poses[0].elevation
    assert poses[1].azimuth == pytest.approx(2 * math.pi / 24)


def test_bad_grid():
    with pytest.raises(RenderError, match="valid grids"):
        generate_pose_set(12, grid=(5, 3))
    with pytest.raises(RenderError):
        generate_pose_set(0)


def test_cube_front_view_area():
    img = render_silhouette(shapes.box(), CameraPose(0.0, 0.0), 64)
    area = img.mask.sum()
    assert abs(area - (0.9 * 64) ** 2) <= 0.02 * (0.9 * 64) ** 2
    rows, cols = np.nonzero(img.mask)
    assert rows.max() - rows.min() == cols.max() - cols.min()


def test_sphere_disc_area():
    img = render_silhouette(shapes.sphere(1.0), CameraPose(0.3, 0.2), 256)
    expected = math.pi * (0.45 * 256) ** 2
    assert abs(img.mask.sum() - expected) <= 0.02 * expected


def test_occluded_part_is_hidden():
    # small box directly behind a large one as seen from azimuth 0 (camera on +x)
    model = merge_meshes([shapes.box(size=(0.2, 1, 1)), shapes.box(center=(-0.5, 0, 0), size=(0.2, 0.3, 0.3))])
    img = render_silhouette(model, CameraPose(0.0, 0.0), 64)
    assert set(np.unique(img.labels)) == {BACKGROUND, 0}


def test_render_set_product_order():
    meshes = [shapes.box(), shapes.sphere(), shapes.cylinder()]
    poses = generate_pose_set(4, grid=(4, 1))
    out = render_set(meshes, poses, 32)
    assert len(out) == 12
    assert [im.tag for im in out] == [(s, p) for s in range(3) for p in range(4)]
    assert render_set([], poses, 32) == []


def test_render_set_720():
    out = render_set([shapes.box(), shapes.sphere(segments=16, rings=9)], generate_pose_set(360), 16)
    assert len(out) == 720


def test_canonical_framing_centers_origin():
    img = render_silhouette(shapes.sphere(0.25), canonical_pose(10, 20), 256)
    rows, cols = np.nonzero(img.mask)
    assert abs(rows.mean() - 127.5) < 0.5 and abs(cols.mean() - 127.5) < 0.5


def _square_mask():
    m = np.zeros((10, 10), dtype=bool)
    m[3:7, 3:7] = True
    return m


def test_square_contour():
    sil = extract_contour(SilhouetteImage(np.where(_square_mask(), 0, BACKGROUND)))
    assert len(sil.loops) == 1
    assert len(sil.loops[0]) == 5
    assert set(sil.labels[0].tolist()) == {0}
    assert signed_area(sil.loops[0]) == 16


def test_full_frame_contour():
    sil = extract_contour(SilhouetteImage(np.zeros((6, 6), dtype=int)))
    assert len(sil.loops) == 1
    assert {tuple(p) for p in sil.loops[0]} == {(0, 0), (6, 0), (6, 6), (0, 6)}


def test_annulus_contour():
    m = np.zeros((12, 12), dtype=bool)
    m[2:10, 2:10] = True
    m[5:7, 5:7] = False
    sil = extract_contour(SilhouetteImage(np.where(m, 0, BACKGROUND)))
    areas = sorted(signed_area(l) for l in sil.loops)
    assert areas == [-4, 64]


def test_empty_contour():
    with pytest.raises(RenderError):
        extract_contour(SilhouetteImage(np.full((4, 4), BACKGROUND)))


def test_contour_labels_follow_parts():
    labels = np.full((8, 8), BACKGROUND)
    labels[2:6, 2:4] = 0
    labels[2:6, 4:6] = 1
    sil = extract_contour(SilhouetteImage(labels))
    assert set(sil.labels[0].tolist()) == {0, 1}


@given(arrays(bool, (9, 11)))
def test_contour_rasterize_roundtrip(mask):
    if not mask.any():
        return
    sil = extract_contour(SilhouetteImage(np.where(mask, 0, BACKGROUND)))
    np.testing.assert_array_equal(rasterize_loops(sil.loops, 11, 9), mask)


def test_png_gray_codes(tmp_path):
    labels = np.array([[BACKGROUND, 0], [1, 24]])
    save_png(SilhouetteImage(labels), tmp_path / "x.png")
    gray = np.asarray(Image.open(tmp_path / "x.png"))
    assert gray.tolist() == [[0, 10], [20, 250]]
    np.testing.assert_array_equal(load_png(tmp_path / "x.png").labels, labels)


def test_png_rejects_too_many_labels(tmp_path):
    with pytest.raises(RenderError):
        save_png(SilhouetteImage(np.array([[25]])), tmp_path / "x.png")


def test_svg_and_sidecar(tmp_path):
    labels = np.full((8, 8), BACKGROUND)
    labels[2:6, 2:4] = 0
    labels[2:6, 4:6] = 1
    sil = extract_contour(SilhouetteImage(labels))
    save_svg(sil, tmp_path / "s.svg", 8, 8)
    svg = (tmp_path / "s.svg").read_text()
    assert svg.count("<path") == 2
    doc = json.loads((tmp_path / "s.svg.json").read_text())
    back = LabeledSilhouette.from_json(doc)
    np.testing.assert_array_equal(back.loops[0], sil.loops[0])
    np.testing.assert_array_equal(back.labels[0], sil.labels[0])


def test_pose_validation():
    with pytest.raises(RenderError):
        CameraPose(0.0, 2.0)
    assert CameraPose(2 * math.pi, 0.0).azimuth == 0.0
