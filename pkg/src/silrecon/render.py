"""Orthographic z-buffer rasterizer for part-labeled silhouettes, pose grids and
pixel-edge contour tracing.

Pixel (row i, col j) covers [j, j+1] x [i, i+1] in image coordinates (x right,
y down); its center is (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import Mesh

BACKGROUND = -1
FILL = 0.9
POSE_DISTANCE = 3.0
ELEVATION_LIMIT = math.pi / 3
DEFAULT_POSES = 360
DEFAULT_RESOLUTION = 256
# canonical framing used by the pipeline: the image spans 2 model units
CANONICAL_SPAN = 2.0


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    """Viewpoint on a sphere around the origin, looking at the origin with +y up.

    With ``ortho_scale`` (model units per pixel) set, the origin projects to the
    image center; otherwise each render frames the model automatically.
    """

    azimuth: float
    elevation: float
    distance: float = POSE_DISTANCE
    ortho_scale: Optional[float] = None

    def __post_init__(self):
        az = self.azimuth % (2 * math.pi)
        if az >= 2 * math.pi:
            az = 0.0
        object.__setattr__(self, "azimuth", az)
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise RenderError("elevation must lie in [-pi/2, pi/2]")
        if not self.distance > 0:
            raise RenderError("distance must be positive")

    def with_scale(self, ortho_scale: Optional[float]) -> "CameraPose":
        return CameraPose(self.azimuth, self.elevation, self.distance, ortho_scale)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors; forward points from the camera into the scene."""
        ca, sa = math.cos(self.azimuth), math.sin(self.azimuth)
        ce, se = math.cos(self.elevation), math.sin(self.elevation)
        forward = -np.array([ce * ca, se, ce * sa])
        right = np.array([sa, 0.0, -ca])
        up = np.cross(right, forward)
        return right, up / np.linalg.norm(up), forward

    def position(self) -> np.ndarray:
        return -self.distance * self.basis()[2]


def canonical_scale(resolution: int) -> float:
    return CANONICAL_SPAN / resolution


@dataclass(frozen=True)
class View:
    """Pixel <-> world mapping of one render."""

    pose: CameraPose
    width: int
    height: int
    units_per_pixel: float
    center: tuple[float, float] = (0.0, 0.0)

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points -> (x, y, depth) in pixel coordinates."""
        right, up, fwd = self.pose.basis()
        p = np.atleast_2d(points)
        x = (p @ right - self.center[0]) / self.units_per_pixel + self.width / 2
        y = self.height / 2 - (p @ up - self.center[1]) / self.units_per_pixel
        return np.column_stack([x, y, p @ fwd])

    def unproject(self, xy: np.ndarray, depth) -> np.ndarray:
        right, up, fwd = self.pose.basis()
        xy = np.atleast_2d(xy)
        u = self.center[0] + (xy[:, 0] - self.width / 2) * self.units_per_pixel
        v = self.center[1] + (self.height / 2 - xy[:, 1]) * self.units_per_pixel
        d = np.broadcast_to(np.asarray(depth, dtype=float), u.shape)
        return u[:, None] * right + v[:, None] * up + d[:, None] * fwd

    def direction_to_pixels(self, vec: np.ndarray) -> np.ndarray:
        """Image-plane displacement (dx, dy) in pixels of a world-space vector."""
        right, up, _ = self.pose.basis()
        v = np.atleast_2d(vec)
        return np.column_stack([v @ right, -(v @ up)]) / self.units_per_pixel


@dataclass(eq=False)
class SilhouetteImage:
    labels: np.ndarray
    depth: Optional[np.ndarray] = None
    view: Optional[View] = None
    tag: Optional[tuple] = None

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.labels != BACKGROUND


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

def valid_grids(n: int) -> list[tuple[int, int]]:
    return [(n // e, e) for e in range(1, n + 1) if n % e == 0]


def default_grid(n: int) -> tuple[int, int]:
    """Azimuth x elevation split with an odd elevation count nearest a 1.6 aspect (360 -> 24 x 15)."""
    odd = [(a, e) for a, e in valid_grids(n) if e % 2 == 1 and a >= e]
    return min(odd, key=lambda g: (abs(g[0] / g[1] - 1.6), g[1]))


def generate_pose_set(n: int = DEFAULT_POSES, grid: Optional[tuple[int, int]] = None,
                      ortho_scale: Optional[float] = None) -> list[CameraPose]:
    """Regular azimuth x elevation grid, elevation-major order."""
    if n < 1:
        raise RenderError("pose count must be >= 1")
    if grid is None:
        grid = default_grid(n)
    n_az, n_el = grid
    if n_az * n_el != n or n_az < 1 or n_el < 1:
        shapes = ", ".join(f"{a}x{e}" for a, e in valid_grids(n))
        raise RenderError(f"{n} poses do not fit a {n_az}x{n_el} grid; valid grids: {shapes}")
    elevations = [0.0] if n_el == 1 else np.linspace(-ELEVATION_LIMIT, ELEVATION_LIMIT, n_el)
    azimuths = 2 * math.pi * np.arange(n_az) / n_az
    return [CameraPose(float(a), float(e), POSE_DISTANCE, ortho_scale)
            for e in elevations for a in azimuths]


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def make_view(mesh: Mesh, pose: CameraPose, resolution: int) -> View:
    if pose.ortho_scale is not None:
        return View(pose, resolution, resolution, float(pose.ortho_scale))
    right, up, _ = pose.basis()
    pts = mesh.vertices[np.unique(mesh.faces)]
    u, v = pts @ right, pts @ up
    side = max(u.max() - u.min(), v.max() - v.min())
    scale = side / (FILL * resolution) if side > 0 else 1.0 / resolution
    return View(pose, resolution, resolution, float(scale),
                (float((u.max() + u.min()) / 2), float((v.max() + v.min()) / 2)))


def rasterize(mesh: Mesh, view: View) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffered label and depth images; front-most face wins, earlier face on exact ties."""
    w, h = view.width, view.height
    labels = np.full((h, w), BACKGROUND, dtype=np.int32)
    depth = np.full((h, w), np.inf)
    proj = view.project(mesh.vertices)
    tris = proj[mesh.faces]
    for t, part in zip(tris, mesh.face_part):
        x0, y0, z0 = t[0]
        x1, y1, z1 = t[1]
        x2, y2, z2 = t[2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        j0 = max(int(math.ceil(min(x0, x1, x2) - 0.5)), 0)
        j1 = min(int(math.floor(max(x0, x1, x2) - 0.5)), w - 1)
        i0 = max(int(math.ceil(min(y0, y1, y2) - 0.5)), 0)
        i1 = min(int(math.floor(max(y0, y1, y2) - 0.5)), h - 1)
        if j0 > j1 or i0 > i1:
            continue
        px = np.arange(j0, j1 + 1) + 0.5
        py = (np.arange(i0, i1 + 1) + 0.5)[:, None]
        w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * z0 + w1 * z1 + w2 * z2
        block = depth[i0:i1 + 1, j0:j1 + 1]
        win = inside & (z < block)
        block[win] = z[win]
        labels[i0:i1 + 1, j0:j1 + 1][win] = part
    return labels, depth


def render_silhouette(mesh: Mesh, pose: CameraPose, resolution: int = DEFAULT_RESOLUTION) -> SilhouetteImage:
    if mesh.is_empty():
        raise RenderError("cannot render an empty mesh")
    if resolution < 8:
        raise RenderError("resolution must be >= 8")
    view = make_view(mesh, pose, resolution)
    labels, depth = rasterize(mesh, view)
    return SilhouetteImage(labels, depth, view)


def render_set(shapes: Sequence[Mesh], poses: Sequence[CameraPose],
               resolution: int = DEFAULT_RESOLUTION) -> list[SilhouetteImage]:
    """All shape x pose renders in shape-major order, tagged (shape index, pose index)."""
    out = []
    for si, mesh in enumerate(shapes):
        for pi, pose in enumerate(poses):
            img = render_silhouette(mesh, pose, resolution)
            img.tag = (si, pi)
            out.append(img)
    return out


# ---------------------------------------------------------------------------
# contours
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LabeledSilhouette:
    """Closed loops (first point repeated at the end) with one label per edge.

    Outer loops have positive shoelace area in (x, y) pixel coordinates, holes
    negative. ``labels`` entries are ``None`` for unlabeled targets.
    """

    loops: list
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.loops = [np.asarray(l, dtype=float) for l in self.loops]
        if not self.labels:
            self.labels = [None] * len(self.loops)
        for loop, lab in zip(self.loops, self.labels):
            if len(loop) < 4 or not np.array_equal(loop[0], loop[-1]):
                raise RenderError("loops must be closed with >= 3 distinct points")
            if lab is not None and len(lab) != len(loop) - 1:
                raise RenderError("one label per loop edge required")

    @property
    def is_labeled(self) -> bool:
        return all(l is not None for l in self.labels)

    def outer_index(self) -> int:
        """Index of the loop with the largest positive area."""
        areas = [signed_area(l) for l in self.loops]
        return int(np.argmax(areas))

    def to_json(self) -> dict:
        return {"loops": [
            {"points": l.tolist(), "labels": None if lab is None else [int(x) for x in lab]}
            for l, lab in zip(self.loops, self.labels)]}

    @classmethod
    def from_json(cls, doc: dict) -> "LabeledSilhouette":
        loops = [np.array(d["points"], dtype=float) for d in doc["loops"]]
        labels = [None if d.get("labels") is None else np.array(d["labels"], dtype=int) for d in doc["loops"]]
        return cls(loops, labels)


def signed_area(loop: np.ndarray) -> float:
    x, y = loop[:-1, 0], loop[:-1, 1]
    xn, yn = loop[1:, 0], loop[1:, 1]
    return float(0.5 * np.sum(x * yn - xn * y))


def _boundary_edges(labels: np.ndarray):
    fg = labels != BACKGROUND
    pad = np.pad(fg, 1)
    rows, cols = np.nonzero(fg)
    edges, lab = [], []
    # (neighbor offset, start corner, end corner) for top, right, bottom, left sides
    sides = (((-1, 0), (0, 0), (1, 0)), ((0, 1), (1, 0), (1, 1)),
             ((1, 0), (1, 1), (0, 1)), ((0, -1), (0, 1), (0, 0)))
    for i, j in zip(rows, cols):
        for (di, dj), (sx, sy), (ex, ey) in sides:
            if not pad[i + 1 + di, j + 1 + dj]:
                edges.append((j + sx, i + sy, j + ex, i + ey))
                lab.append(int(labels[i, j]))
    return edges, lab


def _trace_loops(edges, lab):
    outgoing: dict = {}
    for k, (x0, y0, _, _) in enumerate(edges):
        outgoing.setdefault((x0, y0), []).append(k)
    used = np.zeros(len(edges), dtype=bool)
    loops = []
    for start in range(len(edges)):
        if used[start]:
            continue
        pts, labs = [], []
        k = start
        while True:
            used[k] = True
            x0, y0, x1, y1 = edges[k]
            pts.append((x0, y0))
            labs.append(lab[k])
            cands = [e for e in outgoing[(x1, y1)] if not used[e]]
            if not cands:
                break
            if len(cands) > 1:
                dx, dy = x1 - x0, y1 - y0
                turn = (-dy, dx)
                cands.sort(key=lambda e: (edges[e][2] - x1, edges[e][3] - y1) != turn)
            k = cands[0]
        pts.append(pts[0])
        loops.append((np.array(pts, dtype=float), np.array(labs, dtype=int)))
    return loops


def simplify_loop(points: np.ndarray, labels: np.ndarray):
    """Drop vertices between collinear edges of equal label."""
    n = len(labels)
    p = points[:-1]
    d = np.diff(np.vstack([p, p[:1]]), axis=0)
    prev_d = np.roll(d, 1, axis=0)
    prev_l = np.roll(labels, 1)
    cross = prev_d[:, 0] * d[:, 1] - prev_d[:, 1] * d[:, 0]
    dot = (prev_d * d).sum(axis=1)
    keep = ~((np.abs(cross) < 1e-12) & (dot > 0) & (prev_l == labels))
    if not keep.any():
        keep[0] = True
    first = int(np.argmax(keep))
    order = np.r_[np.arange(first, n), np.arange(first)]
    kept = [i for i in order if keep[i]]
    new_pts = p[kept]
    new_labels = labels[kept]
    return np.vstack([new_pts, new_pts[:1]]), new_labels


def extract_contour(img: SilhouetteImage, simplify: bool = True) -> LabeledSilhouette:
    """Trace foreground boundaries along pixel edges; every edge carries its pixel's label."""
    edges, lab = _boundary_edges(img.labels)
    if not edges:
        raise RenderError("silhouette has no foreground")
    loops, labels = [], []
    for pts, labs in _trace_loops(edges, lab):
        if simplify:
            pts, labs = simplify_loop(pts, labs)
        loops.append(pts)
        labels.append(labs)
    return LabeledSilhouette(loops, labels)


def subdivide_loop(points: np.ndarray, labels=None):
    """Split a simplified axis-aligned loop back into unit pixel edges."""
    out_p, out_l = [], []
    for k in range(len(points) - 1):
        a, b = points[k], points[k + 1]
        steps = max(int(round(np.abs(b - a).max())), 1)
        for s in range(steps):
            out_p.append(a + (b - a) * s / steps)
            out_l.append(-1 if labels is None else labels[k])
    out_p.append(points[0])
    return np.array(out_p), np.array(out_l, dtype=int)


def rasterize_loops(loops: Sequence[np.ndarray], width: int, height: int) -> np.ndarray:
    """Even-odd fill of pixel centers; inverse of :func:`extract_contour` on masks."""
    from matplotlib.path import Path as MplPath

    ys, xs = np.mgrid[0:height, 0:width]
    centers = np.column_stack([xs.ravel() + 0.5, ys.ravel() + 0.5])
    inside = np.zeros(len(centers), dtype=bool)
    for loop in loops:
        inside ^= MplPath(loop).contains_points(centers)
    return inside.reshape(height, width)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def label_to_gray(labels: np.ndarray) -> np.ndarray:
    gray = np.zeros(labels.shape, dtype=np.uint8)
    fg = labels != BACKGROUND
    if fg.any() and labels[fg].max() > 24:
        raise RenderError("PNG export supports at most 25 part labels")
    gray[fg] = 10 * (labels[fg] + 1)
    return gray


def save_png(img: SilhouetteImage, path) -> None:
    Image.fromarray(label_to_gray(img.labels), mode="L").save(path)


def load_png(path) -> SilhouetteImage:
    """Read a mask PNG; nonzero is foreground, gray 10*(k+1) decodes to part k."""
    path = Path(path)
    if not path.is_file():
        raise RenderError(f"silhouette file not found: {path}")
    gray = np.asarray(Image.open(path).convert("L"), dtype=np.int32)
    labels = np.full(gray.shape, BACKGROUND, dtype=np.int32)
    fg = gray > 0
    coded = fg & (gray % 10 == 0)
    labels[coded] = gray[coded] // 10 - 1
    labels[fg & ~coded] = 0
    return SilhouetteImage(labels)


def _path_d(points: np.ndarray) -> str:
    return "M " + " L ".join(f"{x:g} {y:g}" for x, y in points)


def label_runs(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal cyclic runs of equal label as (label, start edge, length)."""
    n = len(labels)
    change = np.flatnonzero(labels != np.roll(labels, 1))
    if len(change) == 0:
        return [(int(labels[0]), 0, n)]
    runs = []
    for k, s in enumerate(change):
        e = change[(k + 1) % len(change)]
        length = (e - s) % n or n
        runs.append((int(labels[s]), int(s), int(length)))
    return runs


def save_svg(sil: LabeledSilhouette, path, width: int, height: int, extra: str = "") -> None:
    """One path per label run, plus a JSON sidecar (``<path>.json``) of the labeled loops."""
    body = []
    for loop, labs in zip(sil.loops, sil.labels):
        if labs is None:
            body.append(f'<path d="{_path_d(loop)}" fill="none" stroke="black"/>')
            continue
        n = len(labs)
        for lab, s, length in label_runs(labs):
            idx = [(s + k) % n for k in range(length + 1)]
            hue = (lab * 67) % 360
            body.append(f'<path d="{_path_d(loop[idx])}" fill="none" '
                        f'stroke="hsl({hue},80%,40%)" data-label="{lab}"/>')
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">\n' + "\n".join(body) + extra + "\n</svg>\n")
    Path(path).write_text(svg, encoding="utf-8")
    Path(str(path) + ".json").write_text(json.dumps(sil.to_json()), encoding="utf-8")
