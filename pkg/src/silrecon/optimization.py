"""Controller structure optimization and mesh deformation.

The loop alternates symmetry enforcement, proximity (contact) restoration with
GC-axis smoothing, and a blend back toward the silhouette-reconstructed
reference, until no controller moves more than ``eps_move``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .controllers import (Binding, Controller, ControllerError, CuboidController, GCController,
                          _gc_local, _transport, align_axes, align_gc, blend_shapes, gc_frames,
                          gc_from_local, gc_radius_at, make_gc, mirror_shape, movement,
                          symmetrize_gc)
from .geometry import Mesh
from .reconstruction import TOL_PAIR, detect_symmetric_pairs

TAU_PROX = 0.02
SAMPLE_SPACING = 1e-3
MAX_SAMPLES = 200_000
CONTACT_PASSES = 100
COARSE_SPACING = 0.01


class OptimizationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# surface sampling and contact anchors
# ---------------------------------------------------------------------------

def _box_project(c: CuboidController, pts: np.ndarray) -> np.ndarray:
    local = np.clip((pts - c.center) @ c.axes.T, -c.half_extents, c.half_extents)
    return c.center + local @ c.axes


def _box_box_closest(a: CuboidController, b: CuboidController, iters: int = 2000):
    """Closest points of two boxes by alternating projections (exact for convex sets)."""
    p = a.center.copy()
    for _ in range(iters):
        q = _box_project(b, p)
        p_new = _box_project(a, q)
        if np.abs(p_new - p).max() < 1e-13:
            p = p_new
            break
        p = p_new
    return p, _box_project(b, p)


def _grid(lo: float, hi: float, spacing: float) -> np.ndarray:
    n = max(int(math.ceil((hi - lo) / spacing)), 1)
    return np.linspace(lo, hi, n + 1)


def _spacing_for(area: float, spacing: float) -> float:
    return max(spacing, math.sqrt(area / MAX_SAMPLES))


def sample_cuboid(c: CuboidController, spacing: float = SAMPLE_SPACING) -> np.ndarray:
    h = c.half_extents
    area = 8 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])
    spacing = _spacing_for(area, spacing)
    pts = []
    for k in range(3):
        i, j = [m for m in range(3) if m != k]
        u, v = np.meshgrid(_grid(-h[i], h[i], spacing), _grid(-h[j], h[j], spacing), indexing="ij")
        for s in (-1.0, 1.0):
            local = np.zeros((u.size, 3))
            local[:, i], local[:, j], local[:, k] = u.ravel(), v.ravel(), s * h[k]
            pts.append(local)
    return c.center + np.vstack(pts) @ c.axes


def sample_gc(c: GCController, spacing: float = SAMPLE_SPACING) -> np.ndarray:
    """Lateral surface plus both end caps."""
    p = c.axis_points
    seg_len = np.linalg.norm(np.diff(p, axis=0), axis=1)
    r_max = float(c.radii.max())
    area = 2 * math.pi * r_max * seg_len.sum() + 2 * math.pi * r_max ** 2
    spacing = _spacing_for(area, spacing)
    tang, nrm, bin_ = gc_frames(p)
    n_ring = max(int(math.ceil(2 * math.pi * r_max / spacing)), 8)
    ang = 2 * math.pi * np.arange(n_ring) / n_ring
    ca, sa = np.cos(ang), np.sin(ang)
    pts = []
    for k in range(len(seg_len)):
        for t in np.linspace(0, 1, max(int(math.ceil(seg_len[k] / spacing)), 1) + 1):
            foot = p[k] + t * (p[k + 1] - p[k])
            r = (1 - t) * c.radii[k] + t * c.radii[k + 1]
            pts.append(foot + r * (ca[:, None] * nrm[k] + sa[:, None] * bin_[k]))
    for k, end in ((0, 0), (len(seg_len) - 1, -1)):
        for rho in _grid(0, c.radii[end], spacing)[:-1]:
            pts.append(p[end] + rho * (ca[:, None] * nrm[k] + sa[:, None] * bin_[k]))
    return np.vstack(pts)


def sample_surface(shape, spacing: float = SAMPLE_SPACING) -> np.ndarray:
    return sample_cuboid(shape, spacing) if shape.kind == "cuboid" else sample_gc(shape, spacing)


def closest_surface_points(a, b, spacing: float = SAMPLE_SPACING):
    """(point on a, point on b, distance) of the two controller surfaces."""
    if a.kind == "cuboid" and b.kind == "cuboid":
        pa, pb = _box_box_closest(a, b)
    elif a.kind == "cuboid" or b.kind == "cuboid":
        box, gc = (a, b) if a.kind == "cuboid" else (b, a)
        s = sample_gc(gc, spacing)
        proj = _box_project(box, s)
        k = int(np.argmin(((proj - s) ** 2).sum(axis=1)))
        pa, pb = (proj[k], s[k]) if a.kind == "cuboid" else (s[k], proj[k])
    else:
        sa, sb = sample_gc(a, spacing), sample_gc(b, spacing)
        dist, nn = cKDTree(sb).query(sa)
        k = int(np.argmin(dist))
        pa, pb = sa[k], sb[nn[k]]
    return pa, pb, float(np.linalg.norm(pa - pb))


@dataclass(frozen=True, eq=False)
class Anchor:
    """A point attached to a controller; it follows the controller's deformation.

    Cuboid: ``local`` holds coordinates normalized by the half extents.
    GC: ``local`` is the binding 4-vector on segment ``segment`` at fraction
    ``t``; ``normal`` is the original first-segment normal and ``radius`` the
    original radius at the anchor's station.
    """

    reference: object
    local: np.ndarray
    segment: int = 0
    t: float = 0.0
    normal: Optional[np.ndarray] = None
    radius: float = 1.0


def make_anchor(shape, point: np.ndarray) -> Anchor:
    point = np.atleast_2d(point)
    if shape.kind == "cuboid":
        local = ((point - shape.center) @ shape.axes.T)[0] / shape.half_extents
        return Anchor(shape, local)
    seg, t, local, n0 = _gc_local(shape, point)
    r = float(gc_radius_at(shape, seg, t)[0])
    return Anchor(shape, local[0], int(seg[0]), float(t[0]), n0, r)


def _deformed_first_normal(ref: GCController, cur: GCController, n0: np.ndarray) -> np.ndarray:
    t_ref = gc_frames(ref.axis_points, n0)[0][0]
    t_cur = gc_frames(cur.axis_points, n0)[0][0]
    return _transport(n0, t_ref, t_cur)


def anchor_point(anchor: Anchor, shape) -> np.ndarray:
    if shape.kind == "cuboid":
        axes, ext = align_axes(anchor.reference.axes, shape.axes, shape.half_extents)
        return shape.center + (anchor.local * ext) @ axes
    shape = align_gc(anchor.reference, shape)
    n0 = _deformed_first_normal(anchor.reference, shape, anchor.normal)
    seg, t = np.array([anchor.segment]), np.array([anchor.t])
    scale = gc_radius_at(shape, seg, t) / anchor.radius
    return gc_from_local(shape, seg, t, anchor.local[None, :], n0, scale)[0]


# ---------------------------------------------------------------------------
# structure graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Contact:
    a: int
    b: int
    anchor_a: Anchor
    anchor_b: Anchor
    distance: float

    def to_json(self) -> dict:
        pa = anchor_point(self.anchor_a, self.anchor_a.reference)
        pb = anchor_point(self.anchor_b, self.anchor_b.reference)
        return {"a": self.a, "b": self.b, "point_a": pa.tolist(), "point_b": pb.tolist(),
                "distance": self.distance}


@dataclass
class StructureGraph:
    symmetry: list = field(default_factory=list)
    proximity: list = field(default_factory=list)

    def ids(self) -> set:
        out = set()
        for r in self.symmetry:
            out.update((r.a, r.b))
        for c in self.proximity:
            out.update((c.a, c.b))
        return out

    def to_json(self) -> dict:
        return {"symmetry": [[r.a, r.b] for r in self.symmetry],
                "proximity": [c.to_json() for c in self.proximity]}


def analyze_structure(controllers: Sequence[Controller], tau_prox: float = TAU_PROX,
                      tol_pair: float = TOL_PAIR, spacing: float = SAMPLE_SPACING) -> StructureGraph:
    """Symmetry relations plus contacts between controllers closer than ``tau_prox``."""
    if not controllers:
        raise OptimizationError("no controllers to analyze")
    graph = StructureGraph(detect_symmetric_pairs(controllers, tol_pair))
    for i, ci in enumerate(controllers):
        for cj in controllers[i + 1:]:
            # cheap bounding-sphere rejection before sampling
            if _bound_gap(ci.shape, cj.shape) > tau_prox:
                continue
            coarse = max(spacing, COARSE_SPACING)
            if coarse > spacing and "gc" in (ci.kind, cj.kind):
                # sampled distances overestimate by at most about one spacing
                if closest_surface_points(ci.shape, cj.shape, coarse)[2] > tau_prox + 2 * coarse:
                    continue
            pa, pb, d = closest_surface_points(ci.shape, cj.shape, spacing)
            if d <= tau_prox:
                graph.proximity.append(Contact(ci.id, cj.id, make_anchor(ci.shape, pa),
                                               make_anchor(cj.shape, pb), d))
    return graph


def _bound_sphere(shape):
    if shape.kind == "cuboid":
        return shape.center, float(np.linalg.norm(shape.half_extents))
    c = shape.center()
    return c, float(np.linalg.norm(shape.axis_points - c, axis=1).max() + shape.radii.max())


def _bound_gap(a, b) -> float:
    (ca, ra), (cb, rb) = _bound_sphere(a), _bound_sphere(b)
    return float(np.linalg.norm(ca - cb) - ra - rb)


# ---------------------------------------------------------------------------
# constraint passes
# ---------------------------------------------------------------------------

def _index(omega: Sequence[Controller], g: StructureGraph) -> dict:
    by_id = {c.id: c for c in omega}
    missing = g.ids() - set(by_id)
    if missing:
        raise OptimizationError(f"structure graph references unknown controller(s) {sorted(missing)}")
    return by_id


def struct_op_controller(omega: Sequence[Controller], g: StructureGraph) -> list[Controller]:
    """Average each symmetric pair with its reflected partner; snap self-symmetric ones."""
    by_id = _index(omega, g)
    for rel in g.symmetry:
        a = by_id[rel.a]
        if rel.is_self:
            shape = blend_shapes(a.shape, mirror_shape(a.shape), 0.5)
            by_id[rel.a] = a.with_shape(shape)
            continue
        b = by_id[rel.b]
        if a.kind != b.kind:
            raise OptimizationError(f"symmetric controllers {rel.a}/{rel.b} differ in kind")
        shape = blend_shapes(a.shape, mirror_shape(b.shape), 0.5)
        by_id[rel.a] = a.with_shape(shape)
        by_id[rel.b] = b.with_shape(mirror_shape(shape))
    return [by_id[c.id] for c in omega]


def translate_shape(shape, d: np.ndarray):
    if shape.kind == "cuboid":
        return CuboidController(shape.center + d, shape.axes, shape.half_extents)
    return GCController(shape.axis_points + d, shape.radii, shape.frames)


def smooth_gc(shape: GCController) -> GCController:
    """One pass of midpoint averaging on interior axis points; endpoints stay."""
    p = shape.axis_points
    if len(p) < 3:
        return shape
    q = p.copy()
    q[1:-1] = (p[:-2] + p[2:]) / 2
    return make_gc(q, shape.radii)


def contact_violations(by_id: dict, g: StructureGraph, tol: float):
    out = []
    for c in g.proximity:
        pa = anchor_point(c.anchor_a, by_id[c.a].shape)
        pb = anchor_point(c.anchor_b, by_id[c.b].shape)
        d = float(np.linalg.norm(pb - pa))
        if d > c.distance + tol:
            out.append((c, pa, pb, d))
    return out


def struct_opt_curve(omega: Sequence[Controller], g: StructureGraph, tol_struct: float = 1e-3,
                     smooth: bool = True) -> list[Controller]:
    """Restore stretched contacts by equal, opposite translations; then smooth GC axes.

    Corrections from several contacts on one controller are averaged and the
    pass repeats until every contact is within ``tol_struct`` of its original
    distance (or a pass limit is hit).
    """
    by_id = _index(omega, g)
    for _ in range(CONTACT_PASSES):
        bad = contact_violations(by_id, g, tol_struct)
        if not bad:
            break
        moves: dict = {}
        for c, pa, pb, d in bad:
            u = (pb - pa) / d
            half = 0.5 * (d - c.distance) * u
            moves.setdefault(c.a, []).append(half)
            moves.setdefault(c.b, []).append(-half)
        for cid, ds in moves.items():
            by_id[cid] = by_id[cid].with_shape(translate_shape(by_id[cid].shape, np.mean(ds, axis=0)))
    if smooth:
        for cid, c in by_id.items():
            if c.kind == "gc":
                by_id[cid] = c.with_shape(smooth_gc(c.shape))
    return [by_id[c.id] for c in omega]


def refit(c_d: Controller, c_r: Controller, lam: float) -> Controller:
    """Blend ``(1 - lam) * c_d + lam * c_r`` in parameter space."""
    if c_d.kind != c_r.kind:
        raise OptimizationError(f"controller {c_d.id}: cannot refit {c_d.kind} to {c_r.kind}")
    if not 0 <= lam <= 1:
        raise OptimizationError("refit weight must lie in [0, 1]")
    try:
        return c_d.with_shape(blend_shapes(c_d.shape, c_r.shape, lam))
    except ControllerError as e:
        raise OptimizationError(f"controller {c_d.id}: {e}") from None


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

@dataclass
class OptimizationConfig:
    eps_move: float = 1e-4
    max_iters: int = 50
    lambda_refit: float = 0.5
    tau_prox: float = TAU_PROX
    tol_struct: float = 1e-3

    def __post_init__(self):
        if not self.eps_move > 0:
            raise OptimizationError("eps_move must be positive")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise OptimizationError("max_iters must be an integer >= 1")
        if not 0 <= self.lambda_refit <= 1:
            raise OptimizationError("lambda_refit must lie in [0, 1]")
        if self.tau_prox < 0 or self.tol_struct < 0:
            raise OptimizationError("tolerances must be non-negative")


@dataclass
class DeformationTrace:
    movements: list
    iterations: int
    reason: str

    def to_json(self) -> dict:
        return {"iterations": self.iterations, "reason": self.reason, "movements": self.movements}


def optimize(omega_o: Sequence[Controller], omega_r: Sequence[Controller], g: StructureGraph,
             cfg: OptimizationConfig = OptimizationConfig()) -> tuple[list[Controller], DeformationTrace]:
    ids_o = [c.id for c in omega_o]
    if ids_o != [c.id for c in omega_r]:
        raise OptimizationError("original and reconstructed controller ids differ")
    ref = []
    for co, cr in zip(omega_o, omega_r):
        if co.kind != cr.kind:
            raise OptimizationError(f"controller {co.id} changed kind during reconstruction")
        if cr.kind == "gc":
            cr = cr.with_shape(symmetrize_gc(cr.shape, co.shape))
        ref.append(cr)
    current = list(ref)
    movements = []
    reason = "max_iters"
    for _ in range(cfg.max_iters):
        prev = current
        current = struct_op_controller(current, g)
        current = struct_opt_curve(current, g, cfg.tol_struct)
        current = [refit(d, r, cfg.lambda_refit) for d, r in zip(current, ref)]
        mv = max(movement(a.shape, b.shape) for a, b in zip(prev, current))
        movements.append(mv)
        if mv < cfg.eps_move:
            reason = "threshold"
            break
    return current, DeformationTrace(movements, len(movements), reason)


def deform_mesh(mesh: Mesh, binding: Binding, omega_o: Sequence[Controller],
                omega_d: Sequence[Controller]) -> Mesh:
    """Re-evaluate every vertex's local coordinates in its deformed controller."""
    if len(binding.controller_id) != len(mesh.vertices):
        raise OptimizationError("binding does not match the mesh")
    orig = {c.id: c for c in omega_o}
    new = {c.id: c for c in omega_d}
    used = set(np.unique(binding.controller_id).tolist())
    missing = used - (set(orig) & set(new))
    if missing:
        raise OptimizationError(f"binding references controller(s) {sorted(missing)} not in both sets")
    out = np.empty_like(mesh.vertices)
    for cid in sorted(used):
        o, d = orig[cid].shape, new[cid].shape
        if o.kind != d.kind:
            raise OptimizationError(f"controller {cid} changed kind")
        sel = np.flatnonzero(binding.controller_id == cid)
        if o.kind == "cuboid":
            axes, ext = align_axes(o.axes, d.axes, d.half_extents)
            local = binding.local[sel, :3] * (ext / o.half_extents)
            out[sel] = d.center + local @ axes
        else:
            if o.n_profiles != d.n_profiles:
                raise OptimizationError(f"controller {cid} changed profile count")
            d = align_gc(o, d)
            n0 = binding.gc_normal[cid]
            seg, t = binding.segment[sel], binding.segment_t[sel]
            scale = gc_radius_at(d, seg, t) / gc_radius_at(o, seg, t)
            out[sel] = gc_from_local(d, seg, t, binding.local[sel],
                                     _deformed_first_normal(o, d, n0), scale)
    return mesh.with_vertices(out)
