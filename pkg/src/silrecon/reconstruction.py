"""Silhouette-guided reconstruction of external controllers.

Each external controller is updated from its matched silhouette run pair:
candidate run samples and their object counterparts are lifted onto the
controller's supporting plane, and the image-plane displacement between them
is explained by an in-plane translation plus per-axis scale changes of the
controller. Mirrored pairs are then solved jointly under the x = 0 mirror
constraint, which fixes the depth of their centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .controllers import (Controller, CuboidController, MIRROR, _segment_params,
                          blend_shapes, make_gc, mirror_shape, param_distance)
from .render import View, subdivide_loop

TOL_PAIR = 0.05
MIN_SIN_AZIMUTH = 0.05
RIDGE = 0.05
ICP_ITERS = 200
ICP_TOL = 1e-8


class ReconstructionError(ValueError):
    pass


class DegenerateViewError(ReconstructionError):
    pass


@dataclass(frozen=True)
class SymmetryRelation:
    """Mirror relation across x = 0; ``a == b`` marks a self-symmetric controller."""

    a: int
    b: int

    @property
    def is_self(self) -> bool:
        return self.a == self.b


@dataclass(frozen=True)
class SupportingPlane:
    point: np.ndarray
    normal: np.ndarray

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(pts) - self.point) @ self.normal


@dataclass
class RunMatch:
    """Paired samples of one silhouette run: candidate pixels, their 3D generators, object pixels."""

    c_points: np.ndarray
    generators: np.ndarray
    o_points: np.ndarray


def detect_symmetric_pairs(controllers: Sequence[Controller], tol: float = TOL_PAIR) -> list[SymmetryRelation]:
    """Greedy matching of controllers against the reflected set, closest first."""
    cands = []
    for i, ci in enumerate(controllers):
        mi = mirror_shape(ci.shape)
        for j in range(i, len(controllers)):
            cj = controllers[j]
            if cj.kind != ci.kind:
                continue
            if cj.kind == "gc" and cj.shape.n_profiles != ci.shape.n_profiles:
                continue
            d = param_distance(cj.shape, mi)
            if d <= tol:
                cands.append((d, i, j))
    used: set = set()
    out = []
    for d, i, j in sorted(cands):
        if i in used or j in used:
            continue
        used.update((i, j))
        out.append(SymmetryRelation(controllers[i].id, controllers[j].id))
    return sorted(out, key=lambda r: (r.a, r.b))


def supporting_plane(generators: np.ndarray, view_dir: np.ndarray) -> SupportingPlane:
    """Least-squares plane of a run's 3D generator points.

    Falls back to the plane orthogonal to the view through the centroid when
    the generators are nearly collinear or their plane nearly contains the
    viewing direction (orthographic back-projection would be unstable).
    """
    g = np.asarray(generators, dtype=float)
    view_dir = np.asarray(view_dir, dtype=float)
    view_dir = view_dir / np.linalg.norm(view_dir)
    centroid = g.mean(axis=0)
    if len(g) < 3:
        raise ReconstructionError("supporting plane needs >= 3 generator points")
    _, s, vt = np.linalg.svd(g - centroid)
    if s[0] <= 0 or s[1] <= 1e-12 * max(1.0, s[0]):
        raise ReconstructionError("generator points are collinear")
    normal = vt[2]
    if s[1] < 1e-3 * s[0] or abs(normal @ view_dir) < 0.1:
        normal = view_dir
    if normal @ view_dir < 0:
        normal = -normal
    return SupportingPlane(centroid, normal / np.linalg.norm(normal))


def lift_to_plane(points: np.ndarray, plane: SupportingPlane, view: View) -> np.ndarray:
    """Intersect the viewing rays through pixel positions with the plane."""
    origin = view.unproject(np.asarray(points, dtype=float), 0.0)
    fwd = view.pose.basis()[2]
    t = ((plane.point - origin) @ plane.normal) / (fwd @ plane.normal)
    return origin + t[:, None] * fwd


def _image_translation(t: np.ndarray, view: View) -> np.ndarray:
    right, up, _ = view.pose.basis()
    return view.units_per_pixel * (t[0] * right - t[1] * up)


def _solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Least squares for [translation(2) | shape deltas] with a ridge on the deltas."""
    k = a.shape[1] - 2
    if k:
        reg = np.zeros((k, a.shape[1]))
        reg[np.arange(k), 2 + np.arange(k)] = RIDGE * np.linalg.norm(a[:, 2:], axis=0)
        a = np.vstack([a, reg])
        b = np.r_[b, np.zeros(k)]
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    return x


class _Model:
    """Linear image-space motion model of one controller.

    ``jacobian(points)`` maps the parameter vector [tx, ty, deltas...] to
    per-point pixel displacements, shape (m, 2, 2 + k); ``apply`` builds the
    updated shape.
    """

    def __init__(self, shape, view: View, ref_points: np.ndarray):
        self.shape = shape
        self.view = view
        self.plane = None
        if shape.kind == "cuboid":
            fwd = view.pose.basis()[2]
            local = (ref_points - shape.center) @ shape.axes.T
            self.free = [k for k in range(3)
                         if abs(shape.axes[k] @ fwd) <= 0.98 and np.ptp(local[:, k]) > 1e-9
                         and np.linalg.norm(view.direction_to_pixels(shape.axes[k])) > 1e-9]
        else:
            self.center = shape.center()
            axis = shape.axis_points[-1] - shape.axis_points[0]
            self.axis = axis / np.linalg.norm(axis)
            self.free = ["axial", "radial"]

    def jacobian(self, lifted: np.ndarray) -> np.ndarray:
        m = len(lifted)
        cols = [np.tile([1.0, 0.0], (m, 1)), np.tile([0.0, 1.0], (m, 1))]
        sh = self.shape
        if sh.kind == "cuboid":
            local = (lifted - sh.center) @ sh.axes.T
            for k in self.free:
                img = self.view.direction_to_pixels(sh.axes[k])[0]
                cols.append(local[:, k:k + 1] * img[None, :])
        else:
            seg, t = _segment_params(sh.axis_points, lifted)
            foot = sh.axis_points[seg] + t[:, None] * (sh.axis_points[seg + 1] - sh.axis_points[seg])
            axial = (lifted - self.center) @ self.axis
            cols.append(axial[:, None] * self.view.direction_to_pixels(self.axis)[0][None, :])
            cols.append(self.view.direction_to_pixels(lifted - foot))
        return np.stack(cols, axis=2)

    def apply(self, x: np.ndarray):
        sh = self.shape
        shift = _image_translation(x[:2], self.view)
        if sh.kind == "cuboid":
            scale = np.ones(3)
            for k, delta in zip(self.free, x[2:]):
                scale[k] = max(1 + delta, 1e-3)
            return CuboidController(sh.center + shift, sh.axes, sh.half_extents * scale)
        s_a, s_r = (max(1 + d, 1e-3) for d in x[2:4])
        rel = sh.axis_points - self.center
        along = rel @ self.axis
        pts = self.center + shift + rel + ((s_a - 1) * along)[:, None] * self.axis
        return make_gc(pts, sh.radii * s_r)


def _closest_on_edges(points: np.ndarray, a: np.ndarray, b: np.ndarray, k: int = 6,
                      tree: Optional[cKDTree] = None):
    """Nearest point on short segments a->b: (segment index, parameter t, point)."""
    if tree is None:
        tree = cKDTree((a + b) / 2)
    k = min(k, len(a))
    _, nn = tree.query(points, k=k)
    nn = nn.reshape(len(points), k)
    d = b[nn] - a[nn]
    den = np.maximum((d * d).sum(axis=2), 1e-300)
    t = np.clip(((points[:, None, :] - a[nn]) * d).sum(axis=2) / den, 0.0, 1.0)
    q = a[nn] + t[..., None] * d
    best = np.argmin(((q - points[:, None, :]) ** 2).sum(axis=2), axis=1)
    r = np.arange(len(points))
    return nn[r, best], t[r, best], q[r, best]


def _chamfer_refine(model: _Model, x: np.ndarray, plane: SupportingPlane,
                    c_edges: np.ndarray, o_edges: np.ndarray) -> np.ndarray:
    """Iterate symmetric closest-point matching between the moved candidate edges
    and the object edges; each pass is a linear least-squares solve."""
    verts, inv = np.unique(c_edges.reshape(-1, 2), axis=0, return_inverse=True)
    inv = inv.reshape(-1, 2)
    jac = model.jacobian(lift_to_plane(verts, plane, model.view))
    o_verts = np.unique(o_edges.reshape(-1, 2), axis=0)
    o_tree = cKDTree(o_edges.mean(axis=1))
    for _ in range(ICP_ITERS):
        moved = verts + jac @ x
        # candidate -> object
        _, _, q = _closest_on_edges(moved, o_edges[:, 0], o_edges[:, 1], tree=o_tree)
        rows = [jac.reshape(-1, jac.shape[2])]
        rhs = [(q - verts).ravel()]
        # object -> candidate
        e, t, _ = _closest_on_edges(o_verts, moved[inv[:, 0]], moved[inv[:, 1]])
        ia, ib = inv[e, 0], inv[e, 1]
        j = (1 - t)[:, None, None] * jac[ia] + t[:, None, None] * jac[ib]
        base = (1 - t)[:, None] * verts[ia] + t[:, None] * verts[ib]
        rows.append(j.reshape(-1, jac.shape[2]))
        rhs.append((o_verts - base).ravel())
        x_new = _solve(np.vstack(rows), np.concatenate(rhs))
        step = np.abs(x_new - x).max()
        x = x_new
        if step < ICP_TOL:
            break
    return x


def reconstruct_external(c: Controller, runs: Sequence[RunMatch], view: View,
                         edges: Optional[tuple] = None) -> Controller:
    """Refit one external controller to its matched silhouette runs (no symmetry).

    Candidate samples are lifted onto the supporting plane of their 3D
    generators and the paired image displacements are explained by an in-plane
    translation plus scale changes. When ``edges`` = (candidate edges, object
    edges) of this controller's label are given, the estimate is refined by
    symmetric closest-point matching.
    """
    runs = [r for r in runs if len(r.c_points)]
    if not runs:
        raise ReconstructionError(f"controller {c.id} has no matched silhouette samples")
    gens = np.vstack([r.generators for r in runs])
    fwd = view.pose.basis()[2]
    try:
        plane = supporting_plane(gens, fwd)
    except ReconstructionError:
        # a straight run (thin part seen edge-on) still fixes a depth
        plane = SupportingPlane(gens.mean(axis=0), fwd)
    c_pts = np.vstack([r.c_points for r in runs])
    lifted_c = lift_to_plane(c_pts, plane, view)
    model = _Model(c.shape, view, lifted_c)
    jac = model.jacobian(lifted_c)
    disp = np.vstack([r.o_points for r in runs]) - c_pts
    x = _solve(jac.reshape(-1, jac.shape[2]), disp.ravel())
    if edges is not None and len(edges[0]) and len(edges[1]):
        x = _chamfer_refine(model, x, plane, *edges)
    return c.with_shape(model.apply(x))


def _with_center(shape, center: np.ndarray):
    if shape.kind == "cuboid":
        return CuboidController(center, shape.axes, shape.half_extents)
    return make_gc(shape.axis_points - shape.center() + center, shape.radii)


def _shape_center(shape) -> np.ndarray:
    return shape.center if shape.kind == "cuboid" else shape.center()


def check_view(view: View) -> None:
    if abs(math.sin(view.pose.azimuth)) < MIN_SIN_AZIMUTH:
        raise DegenerateViewError(
            "view direction is nearly perpendicular to the symmetry plane; "
            "mirrored depth cannot be recovered")


def reconstruct_pair(first: Controller, second: Controller, runs_first: Sequence[RunMatch],
                     runs_second: Sequence[RunMatch], view: View,
                     edges_by_part: Optional[dict] = None) -> tuple[Controller, Controller]:
    """Jointly reconstruct a mirrored pair; the result is exactly mirrored across x = 0.

    Either side may lack silhouette runs (an internal partner); it is then
    recovered purely by reflection.
    """
    check_view(view)
    edges = edges_by_part or {}
    new_a = reconstruct_external(first, runs_first, view, edges.get(first.part)) if runs_first else None
    new_b = reconstruct_external(second, runs_second, view, edges.get(second.part)) if runs_second else None
    if new_a is None and new_b is None:
        return first, second
    if new_a is None:
        return first.with_shape(mirror_shape(new_b.shape)), new_b
    if new_b is None:
        return new_a, second.with_shape(mirror_shape(new_a.shape))
    # centers: X and its mirror must project onto the two reconstructed centers
    ca, cb = _shape_center(new_a.shape), _shape_center(new_b.shape)
    pa = view.project(ca)[0, :2]
    pb = view.project(cb)[0, :2]
    right, up, _ = view.pose.basis()
    s = view.units_per_pixel
    rows = np.array([right / s, -up / s, right * MIRROR / s, -up * MIRROR / s])
    base = np.array([view.width / 2 - view.center[0] / s, view.height / 2 + view.center[1] / s])
    rhs = np.array([pa[0] - base[0], pa[1] - base[1], pb[0] - base[0], pb[1] - base[1]])
    prior = (ca + cb * MIRROR) / 2
    w = 1e-6
    a = np.vstack([rows, w * np.eye(3)])
    b = np.r_[rhs, w * prior]
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    orig = _shape_center(first.shape)
    if abs(orig[0]) > 1e-9 and np.sign(x[0]) != np.sign(orig[0]):
        raise ReconstructionError(
            f"controllers {first.id}/{second.id}: mirrored runs fall on the same side of the symmetry plane")
    shape = blend_shapes(_with_center(new_a.shape, x), _with_center(mirror_shape(new_b.shape), x), 0.5)
    shape = _with_center(shape, x)
    return new_a.with_shape(shape), new_b.with_shape(mirror_shape(shape))


def snap_self_symmetric(c: Controller) -> Controller:
    shape = blend_shapes(c.shape, mirror_shape(c.shape), 0.5)
    center = _shape_center(shape).copy()
    center[0] = 0.0
    return c.with_shape(_with_center(shape, center))


def reconstruct_all(controllers: Sequence[Controller], runs: dict, view: View,
                    symmetry: Sequence[SymmetryRelation], edges_by_part: Optional[dict] = None) -> list[Controller]:
    """Reconstruct every controller with matched runs; mirror partners of external ones.

    ``runs`` maps controller id -> list of :class:`RunMatch`. Controllers with no
    runs and no external partner are returned unchanged.
    """
    by_id = {c.id: c for c in controllers}
    out = dict(by_id)
    done: set = set()
    for rel in symmetry:
        if rel.is_self:
            continue
        ra, rb = runs.get(rel.a, []), runs.get(rel.b, [])
        if not ra and not rb:
            continue
        a, b = reconstruct_pair(by_id[rel.a], by_id[rel.b], ra, rb, view, edges_by_part)
        out[rel.a], out[rel.b] = a, b
        done.update((rel.a, rel.b))
    self_sym = {r.a for r in symmetry if r.is_self}
    for cid, c in by_id.items():
        if cid in done or not runs.get(cid):
            continue
        new = reconstruct_external(c, runs[cid], view, (edges_by_part or {}).get(c.part))
        if cid in self_sym:
            new = snap_self_symmetric(new)
        out[cid] = new
    return [out[c.id] for c in controllers]


def generator_points(img, points: np.ndarray, directions: np.ndarray, label: int):
    """3D surface points behind contour samples, read from the candidate depth buffer.

    Each sample is pushed half a pixel to the inside of its edge; samples whose
    inner pixel belongs to another part are dropped (mask returned).
    """
    inward = np.column_stack([-directions[:, 1], directions[:, 0]])
    probe = np.floor(points + 0.5 * inward).astype(int)
    h, w = img.labels.shape
    ok = (probe[:, 0] >= 0) & (probe[:, 0] < w) & (probe[:, 1] >= 0) & (probe[:, 1] < h)
    ok[ok] &= img.labels[probe[ok, 1], probe[ok, 0]] == label
    depth = np.zeros(len(points))
    depth[ok] = img.depth[probe[ok, 1], probe[ok, 0]]
    return img.view.unproject(points, depth), ok


def build_run_matches(candidate_img, c_param, o_param, segments, controllers: Sequence[Controller]) -> dict:
    """Turn segment correspondences into per-controller :class:`RunMatch` lists."""
    by_part = {c.part: c.id for c in controllers}
    runs: dict = {}
    for seg in segments.segments:
        cid = by_part.get(seg.label)
        if cid is None or len(seg.pairs) == 0:
            continue
        ci, oi = seg.pairs[:, 0], seg.pairs[:, 1]
        c_pts = c_param.points[ci]
        gens, ok = generator_points(candidate_img, c_pts, c_param.directions[ci], seg.label)
        if ok.sum() < 3:
            continue
        runs.setdefault(cid, []).append(RunMatch(c_pts[ok], gens[ok], o_param.points[oi][ok]))
    return runs


def paired_edges(candidate, target) -> dict:
    """Per-label (candidate edges, object edges) for labels present in both silhouettes."""
    a, b = labeled_edges(candidate), labeled_edges(target)
    return {l: (a[l], b[l]) for l in sorted(set(a) & set(b))}


def labeled_edges(sil) -> dict:
    """Unit pixel edges of every loop grouped by label, as (E, 2, 2) arrays."""
    groups: dict = {}
    for loop, labs in zip(sil.loops, sil.labels):
        if labs is None:
            continue
        pts, lab = subdivide_loop(loop, labs)
        seg = np.stack([pts[:-1], pts[1:]], axis=1)
        for l in np.unique(lab):
            groups.setdefault(int(l), []).append(seg[lab == l])
    return {l: np.concatenate(v) for l, v in groups.items()}
