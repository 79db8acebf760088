"""Cuboid and generalized-cylinder (GC) controllers: fitting, binding, symmetrization.

Cuboid axes are stored as rows of a 3x3 array. GC axes are polylines with a
circular profile per axis point; ``frames`` holds the unit tangent at each
profile.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Iterable, Sequence, Union

import numpy as np

from .geometry import Mesh

EPS_EXTENT = 1e-4
TOL_SYM = 0.05
DEFAULT_PROFILES = 7

MIRROR = np.array([-1.0, 1.0, 1.0])


class ControllerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CuboidController:
    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray

    kind = "cuboid"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "axes", np.asarray(self.axes, dtype=float).reshape(3, 3))
        h = np.maximum(np.asarray(self.half_extents, dtype=float).reshape(3), EPS_EXTENT)
        object.__setattr__(self, "half_extents", h)

    def corners(self) -> np.ndarray:
        signs = np.array(list(itertools.product((-1, 1), repeat=3)), dtype=float)
        return self.center + (signs * self.half_extents) @ self.axes

    def volume(self) -> float:
        return float(np.prod(2 * self.half_extents))


@dataclass(frozen=True, eq=False)
class GCController:
    axis_points: np.ndarray
    radii: np.ndarray
    frames: np.ndarray

    kind = "gc"

    def __post_init__(self):
        p = np.asarray(self.axis_points, dtype=float).reshape(-1, 3)
        r = np.maximum(np.asarray(self.radii, dtype=float).reshape(-1), EPS_EXTENT)
        f = np.asarray(self.frames, dtype=float).reshape(-1, 3)
        if len(p) < 2 or len(r) != len(p) or len(f) != len(p):
            raise ControllerError("GC needs >=2 axis points with matching radii and frames")
        if np.any(np.linalg.norm(np.diff(p, axis=0), axis=1) <= 1e-9):
            raise ControllerError("consecutive GC axis points must be distinct")
        object.__setattr__(self, "axis_points", p)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "frames", f)

    @property
    def n_profiles(self) -> int:
        return len(self.axis_points)

    def center(self) -> np.ndarray:
        return self.axis_points.mean(axis=0)


Shape = Union[CuboidController, GCController]


@dataclass(frozen=True, eq=False)
class Controller:
    id: int
    shape: Shape
    part: int
    is_external: bool = False

    @property
    def kind(self) -> str:
        return self.shape.kind

    def with_shape(self, shape: Shape) -> "Controller":
        return replace(self, shape=shape)


def make_gc(points, radii) -> GCController:
    """Build a GC whose frames are the central-difference tangents of its axis."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    t = np.empty_like(p)
    t[0] = p[1] - p[0]
    t[-1] = p[-1] - p[-2]
    if len(p) > 2:
        t[1:-1] = p[2:] - p[:-2]
    n = np.linalg.norm(t, axis=1, keepdims=True)
    return GCController(p, radii, t / np.where(n > 0, n, 1.0))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _part_triangles(mesh: Mesh, part: int):
    faces = mesh.part_faces(part)
    if len(faces) == 0:
        raise ControllerError(f"part {part} has no faces")
    tri = mesh.vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    return tri, areas, cross


def _canonical_sign(axis: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(axis) + 1e-12 * np.arange(3)[::-1]))
    return axis if axis[k] >= 0 else -axis


def principal_axes(mesh: Mesh, part: int) -> np.ndarray:
    """Principal directions (rows, descending variance) of area-weighted face centroids."""
    tri, areas, _ = _part_triangles(mesh, part)
    cent = tri.mean(axis=1)
    w = areas if areas.sum() > 0 else np.ones(len(areas))
    mean = (w[:, None] * cent).sum(axis=0) / w.sum()
    d = cent - mean
    cov = (w[:, None, None] * np.einsum("ni,nj->nij", d, d)).sum(axis=0) / w.sum()
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    axes = evecs[:, order].T
    axes[2] = np.cross(axes[0], axes[1])
    return np.array([_canonical_sign(a) for a in axes])


def _normal_frame(tri: np.ndarray, areas: np.ndarray, cross: np.ndarray):
    ok = areas > 1e-15
    if not ok.any():
        return None
    normals = cross[ok] / np.linalg.norm(cross[ok], axis=1, keepdims=True)
    a = areas[ok]
    n1 = normals[int(np.argmax(a))]
    ortho = np.abs(normals @ n1) < 0.1
    if not ortho.any():
        return None
    idx = np.flatnonzero(ortho)
    n2 = normals[idx[int(np.argmax(a[idx]))]]
    n2 = n2 - (n2 @ n1) * n1
    n2 /= np.linalg.norm(n2)
    return np.array([n1, n2, np.cross(n1, n2)])


def _box_in_frame(points: np.ndarray, axes: np.ndarray) -> CuboidController:
    proj = points @ axes.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    half = (hi - lo) / 2
    order = np.argsort(-half, kind="stable")
    axes = np.array([_canonical_sign(a) for a in axes[order]])
    proj = points @ axes.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    mid = (lo + hi) / 2
    return CuboidController(mid @ axes, axes, (hi - lo) / 2)


def fit_cuboid(mesh: Mesh, part: int) -> CuboidController:
    """Oriented bounding box of one part.

    Candidate frames are the principal axes and a frame built from the two
    dominant face normals; the smaller-volume box wins (principal axes on ties).
    """
    tri, areas, cross = _part_triangles(mesh, part)
    pts = mesh.vertices[mesh.part_vertex_ids(part)]
    best = _box_in_frame(pts, principal_axes(mesh, part))
    alt = _normal_frame(tri, areas, cross)
    if alt is not None:
        cand = _box_in_frame(pts, alt)
        if cand.volume() < best.volume() * (1 - 1e-9):
            best = cand
    return best


def fit_gc(mesh: Mesh, part: int, n_profiles: int = DEFAULT_PROFILES) -> GCController:
    """Slice the part along its dominant axis into ``n_profiles`` circular profiles."""
    if n_profiles < 2:
        raise ControllerError("n_profiles must be >= 2")
    axis = principal_axes(mesh, part)[0]
    pts = mesh.vertices[mesh.part_vertex_ids(part)]
    s = pts @ axis
    s_lo, s_hi = s.min(), s.max()
    if s_hi - s_lo <= 1e-9:
        raise ControllerError(f"part {part} has zero extent along its axis")
    stations = np.linspace(s_lo, s_hi, n_profiles)
    step = (s_hi - s_lo) / (n_profiles - 1)
    bins = np.clip(np.rint((s - s_lo) / step).astype(int), 0, n_profiles - 1)
    perp = pts - s[:, None] * axis
    centers = np.full((n_profiles, 3), np.nan)
    radii = np.full(n_profiles, np.nan)
    for k in range(n_profiles):
        sel = bins == k
        if not sel.any():
            continue
        c = perp[sel].mean(axis=0)
        centers[k] = c
        radii[k] = np.linalg.norm(perp[sel] - c, axis=1).max()
    have = ~np.isnan(radii)
    idx = np.arange(n_profiles)
    for j in range(3):
        centers[:, j] = np.interp(idx, idx[have], centers[have, j])
    radii = np.interp(idx, idx[have], radii[have])
    return make_gc(centers + stations[:, None] * axis, radii)


# ---------------------------------------------------------------------------
# distances and local coordinates
# ---------------------------------------------------------------------------

def _cuboid_surface_distance(c: CuboidController, pts: np.ndarray) -> np.ndarray:
    q = (pts - c.center) @ c.axes.T
    d = np.abs(q) - c.half_extents
    outside = np.linalg.norm(np.maximum(d, 0), axis=1)
    inside = np.minimum(d.max(axis=1), 0)
    return outside - inside


def _segment_params(points: np.ndarray, p: np.ndarray):
    """Nearest polyline segment for each query point: (segment index, clamped t)."""
    a = points[:-1]
    ab = points[1:] - a
    ab2 = (ab * ab).sum(axis=1)
    t = ((p[:, None, :] - a[None]) * ab[None]).sum(axis=2) / ab2[None]
    tc = np.clip(t, 0.0, 1.0)
    foot = a[None] + tc[..., None] * ab[None]
    dist = np.linalg.norm(p[:, None, :] - foot, axis=2)
    seg = np.argmin(dist, axis=1)
    return seg, tc[np.arange(len(p)), seg]


def _gc_surface_distance(c: GCController, pts: np.ndarray) -> np.ndarray:
    seg, t = _segment_params(c.axis_points, pts)
    a = c.axis_points[seg]
    ab = c.axis_points[seg + 1] - a
    length = np.linalg.norm(ab, axis=1)
    foot = a + t[:, None] * ab
    r = (1 - t) * c.radii[seg] + t * c.radii[seg + 1]
    d = pts - foot
    along = np.abs((d * (ab / length[:, None])).sum(axis=1))
    at_end = ((seg == 0) & (t <= 0)) | ((seg == len(c.axis_points) - 2) & (t >= 1))
    along = np.where(at_end, along, 0.0)
    radial = np.sqrt(np.maximum((d * d).sum(axis=1) - along ** 2, 0.0))
    stations = _arc_stations(c.axis_points)
    arc = stations[seg] + t * length
    to_cap = np.minimum(arc, stations[-1] - arc)
    lateral = radial - r
    inside = np.minimum(-lateral, to_cap)
    beyond_cap = np.where(lateral > 0, np.hypot(lateral, along), along)
    return np.where(at_end, beyond_cap, np.where(lateral > 0, lateral, inside))


def surface_distance(shape: Shape, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if shape.kind == "cuboid":
        return _cuboid_surface_distance(shape, pts)
    return _gc_surface_distance(shape, pts)


def fit_residual(mesh: Mesh, part: int, shape: Shape) -> float:
    pts = mesh.vertices[mesh.part_vertex_ids(part)]
    center = (pts.min(axis=0) + pts.max(axis=0)) / 2
    radius = max(np.linalg.norm(pts - center, axis=1).max(), 1e-12)
    return float(surface_distance(shape, pts).mean() / radius)


def classify_part(mesh: Mesh, part: int, n_profiles: int = DEFAULT_PROFILES) -> str:
    """Return ``"cuboid"`` or ``"gc"``, whichever fits the part with smaller residual."""
    box = fit_cuboid(mesh, part)
    try:
        gc = fit_gc(mesh, part, n_profiles)
    except ControllerError:
        return "cuboid"
    return "gc" if fit_residual(mesh, part, gc) < fit_residual(mesh, part, box) else "cuboid"


def fit_controllers(mesh: Mesh, n_profiles: int = DEFAULT_PROFILES) -> list[Controller]:
    """One controller per part, kind chosen by :func:`classify_part`."""
    out = []
    for part in range(mesh.n_parts):
        if classify_part(mesh, part, n_profiles) == "gc":
            shape = fit_gc(mesh, part, n_profiles)
        else:
            shape = fit_cuboid(mesh, part)
        out.append(Controller(part, shape, part))
    return out


def gc_frames(points: np.ndarray, first_normal: np.ndarray | None = None):
    """Per-segment tangents and parallel-transported normals/binormals."""
    seg = np.diff(points, axis=0)
    tang = seg / np.linalg.norm(seg, axis=1, keepdims=True)
    normals = np.empty_like(tang)
    if first_normal is None:
        ref = np.eye(3)[int(np.argmin(np.abs(tang[0])))]
    else:
        ref = first_normal
    n0 = ref - (ref @ tang[0]) * tang[0]
    normals[0] = n0 / np.linalg.norm(n0)
    for k in range(1, len(tang)):
        normals[k] = _transport(normals[k - 1], tang[k - 1], tang[k])
    binormals = np.cross(tang, normals)
    return tang, normals, binormals


def _transport(v: np.ndarray, t0: np.ndarray, t1: np.ndarray) -> np.ndarray:
    """Rotate ``v`` by the minimal rotation taking unit ``t0`` to unit ``t1``."""
    axis = np.cross(t0, t1)
    s = np.linalg.norm(axis)
    c = float(t0 @ t1)
    if s < 1e-15:
        out = v if c > 0 else -v
    else:
        k = axis / s
        out = v * c + np.cross(k, v) * s + k * (k @ v) * (1 - c)
    out = out - (out @ t1) * t1
    return out / np.linalg.norm(out)


def _arc_stations(points: np.ndarray) -> np.ndarray:
    return np.cumsum(np.r_[0.0, np.linalg.norm(np.diff(points, axis=0), axis=1)])


@dataclass(frozen=True, eq=False)
class Binding:
    """Per-vertex controller assignment and local coordinates.

    ``local`` columns: cuboid -> (x, y, z, 0) in the controller frame;
    GC -> (t in [0,1] along the axis, radial offset, angle, axial overshoot).
    ``gc_normal`` keeps the first-segment normal of every bound GC so deformed
    frames are transported from it rather than re-chosen.
    """

    controller_id: np.ndarray
    local: np.ndarray
    segment: np.ndarray
    segment_t: np.ndarray
    gc_normal: dict


def _cuboid_local(c: CuboidController, pts: np.ndarray) -> np.ndarray:
    return (pts - c.center) @ c.axes.T


def _gc_local(c: GCController, pts: np.ndarray, first_normal=None):
    seg, t = _segment_params(c.axis_points, pts)
    tang, nrm, bin_ = gc_frames(c.axis_points, first_normal)
    a = c.axis_points[seg]
    length = np.linalg.norm(c.axis_points[seg + 1] - a, axis=1)
    foot = a + (t * length)[:, None] * tang[seg]
    d = pts - foot
    along = (d * tang[seg]).sum(axis=1)
    xn = (d * nrm[seg]).sum(axis=1)
    xb = (d * bin_[seg]).sum(axis=1)
    stations = _arc_stations(c.axis_points)
    tg = (stations[seg] + t * length) / stations[-1]
    local = np.column_stack([tg, np.hypot(xn, xb), np.arctan2(xb, xn), along])
    return seg, t, local, nrm[0]


def bind_mesh(mesh: Mesh, controllers: Sequence[Controller]) -> Binding:
    by_part = {}
    for c in controllers:
        by_part.setdefault(c.part, c)
    missing = set(range(mesh.n_parts)) - set(by_part)
    if missing:
        raise ControllerError(f"no controller covers part(s) {sorted(missing)}")
    vpart = mesh.vertex_part()
    stray = np.flatnonzero(vpart < 0)
    if len(stray):
        shapes = [by_part[p].shape for p in sorted(by_part)]
        dist = np.stack([surface_distance(s, mesh.vertices[stray]) for s in shapes])
        vpart[stray] = np.array(sorted(by_part))[np.argmin(dist, axis=0)]
    n = len(mesh.vertices)
    cid = np.empty(n, dtype=np.int64)
    local = np.zeros((n, 4))
    segment = np.zeros(n, dtype=np.int64)
    segment_t = np.zeros(n)
    gc_normal = {}
    for part, c in by_part.items():
        sel = np.flatnonzero(vpart == part)
        cid[sel] = c.id
        if not len(sel):
            continue
        pts = mesh.vertices[sel]
        if c.kind == "cuboid":
            local[sel, :3] = _cuboid_local(c.shape, pts)
        else:
            seg, t, loc, n0 = _gc_local(c.shape, pts)
            segment[sel] = seg
            segment_t[sel] = t
            local[sel] = loc
            gc_normal[c.id] = n0
    return Binding(cid, local, segment, segment_t, gc_normal)


def cuboid_from_local(c: CuboidController, local: np.ndarray) -> np.ndarray:
    return c.center + local @ c.axes


def gc_radius_at(c: GCController, seg: np.ndarray, t: np.ndarray) -> np.ndarray:
    return (1 - t) * c.radii[seg] + t * c.radii[seg + 1]


def gc_from_local(c: GCController, seg: np.ndarray, t_seg: np.ndarray, local: np.ndarray,
                  first_normal, radius_scale: np.ndarray | None = None) -> np.ndarray:
    """Evaluate GC-local coordinates; ``t_seg`` is the fraction along segment ``seg``."""
    tang, nrm, bin_ = gc_frames(c.axis_points, first_normal)
    a = c.axis_points[seg]
    foot = a + t_seg[:, None] * (c.axis_points[seg + 1] - a)
    rho = local[:, 1] if radius_scale is None else local[:, 1] * radius_scale
    ang = local[:, 2]
    return (foot + local[:, 3:4] * tang[seg]
            + (rho * np.cos(ang))[:, None] * nrm[seg]
            + (rho * np.sin(ang))[:, None] * bin_[seg])


def reconstruct_vertices(mesh: Mesh, binding: Binding, controllers: Sequence[Controller]) -> np.ndarray:
    """Inverse of :func:`bind_mesh` against the same controllers."""
    out = np.empty_like(mesh.vertices)
    for c in controllers:
        sel = np.flatnonzero(binding.controller_id == c.id)
        if not len(sel):
            continue
        if c.kind == "cuboid":
            out[sel] = cuboid_from_local(c.shape, binding.local[sel, :3])
        else:
            out[sel] = gc_from_local(c.shape, binding.segment[sel], binding.segment_t[sel],
                                     binding.local[sel], binding.gc_normal[c.id])
    return out


# ---------------------------------------------------------------------------
# symmetrization, parameter-space algebra
# ---------------------------------------------------------------------------

def symmetrize_gc(c_r: GCController, c_o: GCController, tol: float = TOL_SYM) -> GCController:
    """Impose the original GC's radial symmetry on a reconstructed GC."""
    if c_r.n_profiles != c_o.n_profiles:
        raise ControllerError("profile count mismatch")
    r = c_o.radii
    mean = r.mean()
    if (r.max() - r.min()) <= tol * mean:
        radii = np.full_like(c_r.radii, c_r.radii.mean())
    elif np.all(np.abs(r - r[::-1]) <= tol * mean):
        radii = (c_r.radii + c_r.radii[::-1]) / 2
    else:
        return c_r
    return GCController(c_r.axis_points, radii, c_r.frames)


def orthonormalize(axes: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(axes)
    return u @ vt


def align_axes(ref: np.ndarray, axes: np.ndarray, extents: np.ndarray):
    """Permute and sign-flip ``axes`` (rows) so row k best matches ``ref[k]``."""
    dots = ref @ axes.T
    best = max(itertools.permutations(range(3)),
               key=lambda p: sum(abs(dots[k, p[k]]) for k in range(3)))
    perm = np.array(best)
    signs = np.sign(dots[np.arange(3), perm])
    signs[signs == 0] = 1
    return axes[perm] * signs[:, None], extents[perm]


def align_gc(ref: GCController, other: GCController) -> GCController:
    """Reverse ``other``'s profile order if that matches ``ref`` better."""
    p, q = ref.axis_points, other.axis_points
    same = np.linalg.norm(p[0] - q[0]) + np.linalg.norm(p[-1] - q[-1])
    flip = np.linalg.norm(p[0] - q[-1]) + np.linalg.norm(p[-1] - q[0])
    if flip < same:
        return GCController(q[::-1], other.radii[::-1], -other.frames[::-1])
    return other


def mirror_shape(shape: Shape) -> Shape:
    """Reflect across the plane x = 0."""
    if shape.kind == "cuboid":
        return CuboidController(shape.center * MIRROR, shape.axes * MIRROR, shape.half_extents)
    return GCController(shape.axis_points * MIRROR, shape.radii, shape.frames * MIRROR)


def blend_shapes(a: Shape, b: Shape, w: float) -> Shape:
    """(1 - w) * a + w * b in parameter space, after aligning b to a."""
    if a.kind != b.kind:
        raise ControllerError(f"cannot blend {a.kind} with {b.kind}")
    if w == 0:
        return a
    if a.kind == "cuboid":
        axes_b, ext_b = align_axes(a.axes, b.axes, b.half_extents)
        if w == 1:
            return CuboidController(b.center, orthonormalize(axes_b), ext_b)
        axes = orthonormalize((1 - w) * a.axes + w * axes_b)
        return CuboidController((1 - w) * a.center + w * b.center, axes,
                                (1 - w) * a.half_extents + w * ext_b)
    if a.n_profiles != b.n_profiles:
        raise ControllerError("profile count mismatch")
    b = align_gc(a, b)
    if w == 1:
        return make_gc(b.axis_points, b.radii)
    return make_gc((1 - w) * a.axis_points + w * b.axis_points,
                   (1 - w) * a.radii + w * b.radii)


def movement(a: Shape, b: Shape) -> float:
    """Center displacement + max extent/radius change + max axis-endpoint displacement."""
    if a.kind == "cuboid":
        axes_b, ext_b = align_axes(a.axes, b.axes, b.half_extents)
        dc = np.linalg.norm(a.center - b.center)
        de = np.abs(a.half_extents - ext_b).max()
        ends_a = a.center + a.half_extents[:, None] * a.axes
        ends_b = b.center + ext_b[:, None] * axes_b
        da = np.linalg.norm(ends_a - ends_b, axis=1).max()
        return float(dc + de + da)
    b = align_gc(a, b)
    dc = np.linalg.norm(a.center() - b.center())
    de = np.abs(a.radii - b.radii).max()
    da = np.linalg.norm(a.axis_points - b.axis_points, axis=1).max()
    return float(dc + de + da)


param_distance = movement


def shape_to_params(shape: Shape) -> dict:
    if shape.kind == "cuboid":
        return {"center": shape.center.tolist(), "axes": shape.axes.tolist(),
                "half_extents": shape.half_extents.tolist()}
    return {"axis_points": shape.axis_points.tolist(), "radii": shape.radii.tolist(),
            "frames": shape.frames.tolist()}


def shape_from_params(kind: str, params: dict) -> Shape:
    if kind == "cuboid":
        return CuboidController(params["center"], params["axes"], params["half_extents"])
    if kind == "gc":
        return GCController(params["axis_points"], params["radii"], params["frames"])
    raise ControllerError(f"unknown controller kind {kind!r}")


def controllers_to_json(controllers: Iterable[Controller]) -> dict:
    return {"version": 1, "controllers": [
        {"id": c.id, "kind": c.kind, "part": c.part, "is_external": bool(c.is_external),
         "params": shape_to_params(c.shape)} for c in controllers]}


def controllers_from_json(doc: dict) -> list[Controller]:
    if doc.get("version") != 1:
        raise ControllerError("unsupported controller document version")
    out = [Controller(int(d["id"]), shape_from_params(d["kind"], d["params"]), int(d["part"]),
                      bool(d["is_external"])) for d in doc["controllers"]]
    if len({c.id for c in out}) != len(out):
        raise ControllerError("controller ids must be unique")
    return out
