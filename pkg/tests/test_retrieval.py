import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from silrecon import shapes
from silrecon.geometry import normalize_model
from silrecon.render import (BACKGROUND, CameraPose, SilhouetteImage, extract_contour, generate_pose_set,
                             render_set, render_silhouette)
from silrecon.retrieval import (N_BINS, RetrievalError, cumulative_similarity, descriptor, estimate_pose,
                                label_point_sets, retrieve_candidate, retrieve_part)

from conftest import canonical_pose, mask_image


def _disc(res=128, r=40.0, cx=64.0, cy=64.0) -> SilhouetteImage:
    ys, xs = np.mgrid[0:res, 0:res] + 0.5
    return mask_image((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r)


def test_disc_profile_is_flat():
    h = descriptor(_disc()).histogram
    assert h.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(h, 1 / N_BINS, rtol=0.05)


def test_translation_invariance():
    a = descriptor(_disc(cx=50, cy=60))
    b = descriptor(_disc(cx=60, cy=47))
    np.testing.assert_array_equal(a.vector(), b.vector())


def test_scale_drift_within_one_bin():
    mesh, _ = normalize_model(shapes.chair())
    pose = CameraPose(math.radians(30), math.radians(20), ortho_scale=2 / 128)
    a = descriptor(render_silhouette(mesh, pose, 256)).histogram
    b = descriptor(render_silhouette(mesh, pose.with_scale(1 / 128), 256)).histogram
    neighbors = np.stack([np.roll(a, 1), a, np.roll(a, -1)])
    # each bin of the x2 render lies within the range of the matching bin and its neighbors
    assert np.all(b >= neighbors.min(axis=0) - 2e-3)
    assert np.all(b <= neighbors.max(axis=0) + 2e-3)


@given(arrays(bool, (12, 15)))
def test_histogram_invariants(mask):
    if not mask.any():
        with pytest.raises(RetrievalError):
            descriptor(mask_image(mask))
        return
    h = descriptor(mask_image(mask)).histogram
    assert abs(h.sum() - 1) <= 1e-9
    assert np.all(h >= 0)


@pytest.fixture(scope="module")
def small_set():
    meshes = [normalize_model(f())[0] for f in (shapes.lamp, shapes.desk)]
    poses = generate_pose_set(48, grid=(12, 4), ortho_scale=2 / 96)
    return meshes, poses, render_set(meshes, poses, 96)


def test_self_retrieval(small_set):
    _, _, rendered = small_set
    for img in rendered:
        est = estimate_pose(img, rendered, 3)
        assert est.best.score == 0.0
        assert (est.best.shape, est.best.pose_index) == img.tag


def test_mirror_twin_resolves_to_lower_index():
    # a model symmetric about x = 0 looks the same from elevation +e and -e at azimuth 180
    mesh, _ = normalize_model(shapes.chair())
    poses = generate_pose_set(48, grid=(12, 4), ortho_scale=2 / 96)
    rendered = render_set([mesh], poses, 96)
    np.testing.assert_array_equal(rendered[18].mask, rendered[30].mask)
    best = estimate_pose(rendered[30], rendered, 1).best
    assert (best.pose_index, best.score) == (18, 0.0)


def test_scores_sorted_and_k_clamped(small_set):
    _, _, rendered = small_set
    est = estimate_pose(rendered[3], rendered, 10_000)
    assert len(est.ranking) == len(rendered)
    scores = [c.score for c in est.ranking]
    assert scores == sorted(scores)


def test_ties_break_by_shape_then_pose():
    img = _disc(64, 20, 32, 32)
    rendered = []
    for tag in [(1, 0), (0, 2), (0, 1)]:
        copy = SilhouetteImage(img.labels.copy(), tag=tag)
        rendered.append(copy)
    est = estimate_pose(img, rendered, 3)
    assert [(c.shape, c.pose_index) for c in est.ranking] == [(0, 1), (0, 2), (1, 0)]


def _iou(a, b) -> float:
    return (a & b).sum() / (a | b).sum()


def test_midway_pose_flanked():
    """Off-grid views land on a flanking grid pose whenever the flanking poses are
    also the pixel-overlap optimum. Near-mirror opposite views of the desk are the
    known exceptions, so the bound is a rate."""
    res = 128
    hits = total = 0
    misses = []
    for factory in (shapes.lamp, shapes.desk, shapes.stool_asym):
        mesh, _ = normalize_model(factory())
        for el in (-40, -20, 0, 20, 40):
            poses = [CameraPose(2 * math.pi * a / 24, math.radians(el), ortho_scale=2 / res) for a in range(24)]
            rendered = render_set([mesh], poses, res)
            for a in range(24):
                flanks = (a, (a + 1) % 24)
                mid = CameraPose((a + 0.5) * 2 * math.pi / 24, math.radians(el), ortho_scale=2 / res)
                query = render_silhouette(mesh, mid, res)
                overlap = [_iou(r.mask, query.mask) for r in rendered]
                if int(np.argmax(overlap)) not in flanks:
                    continue
                total += 1
                best = estimate_pose(query, rendered, 1).best.pose_index
                if best in flanks:
                    hits += 1
                else:
                    misses.append((factory.__name__, el, a, best))
    assert total > 300
    assert hits / total >= 0.98, misses
    assert all(name == "desk" for name, *_ in misses)


def test_empty_rendered_set():
    with pytest.raises(RetrievalError):
        estimate_pose(_disc(), [], 1)
    with pytest.raises(RetrievalError):
        estimate_pose(_disc(), [SilhouetteImage(_disc().labels, tag=(0, 0))], 0)


def _stack(*grids):
    return [SilhouetteImage(np.array(g)) for g in grids]


def test_cumulative_same_and_different():
    same = _stack([[0, 0]], [[1, 1]], [[2, 2]])
    assert cumulative_similarity(same, (0, 0), (0, 1)).score == 1.0
    diff = _stack([[0, 1]], [[1, 0]])
    assert cumulative_similarity(diff, (0, 0), (0, 1)).score == 0.0


def test_cumulative_three_of_four():
    imgs = _stack([[0, 0]], [[1, 1]], [[0, 0]], [[0, 1]], [[BACKGROUND, 1]])
    s = cumulative_similarity(imgs, (0, 0), (0, 1))
    assert (s.score, s.n_same, s.n_diff) == (0.75, 3, 1)


def test_cumulative_undetermined():
    s = cumulative_similarity(_stack([[BACKGROUND, 0]]), (0, 0), (0, 1))
    assert s.score == 0.5 and s.undetermined


def test_cumulative_errors():
    with pytest.raises(RetrievalError, match="resolution"):
        cumulative_similarity(_stack([[0, 0]], [[0], [0]]), (0, 0), (0, 0))
    with pytest.raises(RetrievalError, match="bounds"):
        cumulative_similarity(_stack([[0, 0]]), (0, 0), (0, 2))


@given(arrays(np.int64, (6, 3, 4), elements=st.integers(-1, 2)),
       st.tuples(st.integers(0, 2), st.integers(0, 3)), st.tuples(st.integers(0, 2), st.integers(0, 3)))
def test_cumulative_counting_oracle(stack, p, q):
    imgs = [SilhouetteImage(s) for s in stack]
    same = diff = 0
    for s in stack:
        a, b = s[p], s[q]
        if a == BACKGROUND or b == BACKGROUND:
            continue
        if a == b:
            same += 1
        else:
            diff += 1
    expected = 0.5 if same + diff == 0 else same / (same + diff)
    assert cumulative_similarity(imgs, p, q).score == expected


def _labels_at(mesh, pose, res=128):
    return extract_contour(render_silhouette(mesh, pose, res))


def test_candidate_self_retrieval():
    lib = [normalize_model(f())[0] for f in (shapes.chair, shapes.table, shapes.lamp)]
    pose = canonical_pose(40, 15, 128)
    for i, mesh in enumerate(lib):
        ranking = retrieve_candidate(_labels_at(mesh, pose), lib, pose, 128)
        assert ranking[0] == (i, 0.0)


def test_candidate_singleton():
    table, _ = normalize_model(shapes.table())
    chair, _ = normalize_model(shapes.chair())
    pose = canonical_pose(40, 15, 128)
    assert retrieve_candidate(_labels_at(table, pose), [chair], pose, 128)[0][0] == 0
    with pytest.raises(RetrievalError):
        retrieve_candidate(_labels_at(table, pose), [], pose, 128)


def test_armchair_prefers_armed_model():
    plain, _ = normalize_model(shapes.chair())
    armed, _ = normalize_model(shapes.chair(arms=True))
    pose = canonical_pose(40, 15, 128)
    target = _labels_at(normalize_model(shapes.chair(arms=True, back_height=0.45))[0], pose)
    ranking = retrieve_candidate(target, [plain, armed], pose, 128)
    assert ranking[0][0] == 1
    assert ranking[0][1] < ranking[1][1]


def test_part_retrieval():
    chair, _ = normalize_model(shapes.chair())
    groups = label_point_sets(_labels_at(chair, canonical_pose(30, 10, 128)))
    library = [(0, part, pts) for part, pts in groups.items()]
    ranked = retrieve_part(groups[1], library)
    assert ranked[0] == (0, 1, 0.0)
    assert retrieve_part(groups[1], library[:1])[0][:2] == (0, 0)
    with pytest.raises(RetrievalError):
        retrieve_part(groups[1], [])


def test_thin_leg_query_prefers_leg():
    leg = np.array([[0, y] for y in np.linspace(0, 30, 31)] + [[3, y] for y in np.linspace(30, 0, 31)])
    seat = np.array([[x, 0] for x in np.linspace(0, 30, 31)] + [[x, 4] for x in np.linspace(30, 0, 31)])
    query = leg * [1.0, 1.2] + [5, 7]
    ranked = retrieve_part(query, [(0, 0, seat), (0, 1, leg)])
    assert ranked[0][1] == 1
