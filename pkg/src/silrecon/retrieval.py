"""Silhouette descriptors, pose estimation over a rendered set, candidate and
part retrieval, and the cumulative co-segmentation score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .render import (BACKGROUND, CameraPose, LabeledSilhouette, SilhouetteImage,
                     extract_contour, render_silhouette, subdivide_loop)

N_BINS = 64
GRID = 24
MAX_RUN_DISTANCE = 2.0


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SilhouetteDescriptor:
    """Angular profile of centroid-to-contour distances, occupancy thumbnail,
    area ratio and aspect.

    Bin k of ``histogram`` covers directions [k, k+1) * 2pi/64 around the
    foreground centroid (image y axis pointing up); its value is the largest
    contour distance in that sector, normalized by the overall largest
    distance, then the profile is scaled to sum to 1. ``occupancy`` is the
    foreground on a 24 x 24 grid spanning the centroid +- the largest
    centroid-to-pixel distance (2 x 2 subsamples per pixel), summing to 1.
    """

    histogram: np.ndarray
    area_ratio: float
    aspect: float
    occupancy: np.ndarray = field(default_factory=lambda: np.full(GRID * GRID, 1.0 / (GRID * GRID)))

    def vector(self) -> np.ndarray:
        return np.r_[self.histogram, self.occupancy, self.area_ratio, self.aspect]


def _angular_profile(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    ang = np.arctan2(dy, dx)
    dist = np.hypot(dx, dy)
    bins = np.floor((ang + math.pi) / (2 * math.pi) * N_BINS).astype(int) % N_BINS
    hist = np.zeros(N_BINS)
    np.maximum.at(hist, bins, dist)
    top = hist.max()
    if top <= 0:
        return np.full(N_BINS, 1.0 / N_BINS)
    hist = hist / top
    return hist / hist.sum()


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(row, col) of foreground pixels with a 4-neighbor in the background or off-image."""
    pad = np.pad(mask, 1)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return np.argwhere(mask & ~interior)


def _occupancy(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    n = len(rows)
    sr, sc = int(rows.sum()), int(cols.sum())
    # pixel-center offsets from the centroid in units of 1/(4n) pixel, exact in integers
    x = 4 * (n * cols.astype(np.int64) - sc) + 2 * n
    y = 4 * (n * rows.astype(np.int64) - sr) + 2 * n
    radius = math.sqrt(float((x * x + y * y).max())) or 1.0
    sub = np.array([-n, n], dtype=np.int64)
    xs = np.broadcast_to((x[:, None] + sub)[:, :, None], (n, 2, 2)).ravel()
    ys = np.broadcast_to((y[:, None] + sub)[:, None, :], (n, 2, 2)).ravel()
    ix = np.clip(np.floor((xs / radius + 1) / 2 * GRID).astype(int), 0, GRID - 1)
    iy = np.clip(np.floor((ys / radius + 1) / 2 * GRID).astype(int), 0, GRID - 1)
    occ = np.bincount(iy * GRID + ix, minlength=GRID * GRID).astype(float)
    return occ / occ.sum()


def descriptor(img: SilhouetteImage) -> SilhouetteDescriptor:
    mask = img.mask
    rows, cols = np.nonzero(mask)
    n = len(rows)
    if n == 0:
        raise RetrievalError("descriptor needs at least one foreground pixel")
    # integer arithmetic keeps the result bitwise translation invariant
    sr, sc = int(rows.sum()), int(cols.sum())
    b = boundary_pixels(mask).astype(np.int64)
    dx = (n * b[:, 1] - sc).astype(float)
    dy = (sr - n * b[:, 0]).astype(float)
    hist = _angular_profile(dx, dy)
    w = cols.max() - cols.min() + 1
    h = rows.max() - rows.min() + 1
    return SilhouetteDescriptor(hist, n / mask.size, w / h, _occupancy(rows, cols))


def point_descriptor(points: np.ndarray) -> np.ndarray:
    """Angular profile of an open point set (a contour run) about its own centroid."""
    p = np.asarray(points, dtype=float)
    c = p.mean(axis=0)
    return _angular_profile(p[:, 0] - c[0], c[1] - p[:, 1])


def descriptor_distance(a: SilhouetteDescriptor, b: SilhouetteDescriptor) -> float:
    return float(np.abs(a.vector() - b.vector()).sum())


class PoseCandidate(NamedTuple):
    shape: int
    pose_index: int
    pose: CameraPose
    score: float


@dataclass
class PoseEstimate:
    ranking: list

    @property
    def best(self) -> PoseCandidate:
        return self.ranking[0]

    def to_json(self) -> list:
        return [{"shape": c.shape, "pose_index": c.pose_index,
                 "azimuth_deg": math.degrees(c.pose.azimuth),
                 "elevation_deg": math.degrees(c.pose.elevation), "score": c.score}
                for c in self.ranking]


class DescriptorIndex:
    """Descriptors of a tagged rendered set, with the pose of every entry."""

    def __init__(self, rendered: Sequence[SilhouetteImage]):
        if not rendered:
            raise RetrievalError("rendered set is empty")
        self.tags = np.array([img.tag for img in rendered], dtype=np.int64).reshape(-1, 2)
        self.poses = [img.view.pose if img.view is not None else None for img in rendered]
        self.matrix = np.stack([descriptor(img).vector() for img in rendered])

    @classmethod
    def from_arrays(cls, matrix: np.ndarray, tags: np.ndarray, poses: Sequence) -> "DescriptorIndex":
        if len(matrix) == 0:
            raise RetrievalError("rendered set is empty")
        index = cls.__new__(cls)
        index.matrix = np.asarray(matrix, dtype=float)
        index.tags = np.asarray(tags, dtype=np.int64).reshape(-1, 2)
        index.poses = list(poses)
        return index

    def query(self, target: SilhouetteImage, k: int = 5) -> PoseEstimate:
        if k < 1:
            raise RetrievalError("k must be >= 1")
        q = descriptor(target).vector()
        dist = np.abs(self.matrix - q).sum(axis=1)
        order = np.lexsort((self.tags[:, 1], self.tags[:, 0], dist))[:k]
        return PoseEstimate([PoseCandidate(int(self.tags[i, 0]), int(self.tags[i, 1]),
                                           self.poses[i], float(dist[i])) for i in order])


def estimate_pose(target: SilhouetteImage, rendered: Sequence[SilhouetteImage], k: int = 5) -> PoseEstimate:
    """Rank tagged renders by L1 descriptor distance to the target; ties by (shape, pose index)."""
    return DescriptorIndex(rendered).query(target, k)


class CoSegScore(NamedTuple):
    score: float
    n_same: int
    n_diff: int

    @property
    def undetermined(self) -> bool:
        """True when no image had both pixels in the foreground (score is then 0.5)."""
        return self.n_same + self.n_diff == 0


def cumulative_similarity(rendered: Sequence[SilhouetteImage], p, q) -> CoSegScore:
    """Fraction of renders, among those covering both pixels, that put them in the same part."""
    if not rendered:
        return CoSegScore(0.5, 0, 0)
    shape = rendered[0].labels.shape
    for img in rendered:
        if img.labels.shape != shape:
            raise RetrievalError("rendered images must share one resolution")
    (pr, pc), (qr, qc) = p, q
    if not (0 <= pr < shape[0] and 0 <= pc < shape[1] and 0 <= qr < shape[0] and 0 <= qc < shape[1]):
        raise RetrievalError("pixel outside image bounds")
    stack = np.stack([img.labels for img in rendered])
    a, b = stack[:, pr, pc], stack[:, qr, qc]
    both = (a != BACKGROUND) & (b != BACKGROUND)
    same = int(np.sum(both & (a == b)))
    diff = int(np.sum(both & (a != b)))
    if same + diff == 0:
        return CoSegScore(0.5, 0, 0)
    return CoSegScore(same / (same + diff), same, diff)


def label_point_sets(sil: LabeledSilhouette) -> dict:
    """Pixel-edge midpoints of the silhouette grouped by label."""
    groups: dict = {}
    for loop, labs in zip(sil.loops, sil.labels):
        if labs is None:
            raise RetrievalError("silhouette is unlabeled")
        pts, lab = subdivide_loop(loop, labs)
        mids = (pts[:-1] + pts[1:]) / 2
        for l in np.unique(lab):
            groups.setdefault(int(l), []).append(mids[lab == l])
    return {l: np.vstack(v) for l, v in sorted(groups.items())}


def segment_distance(a: dict, b: dict) -> float:
    """Mean per-label run distance; labels present on one side only cost the maximum."""
    labels = sorted(set(a) | set(b))
    total = 0.0
    for l in labels:
        if l in a and l in b:
            total += float(np.abs(point_descriptor(a[l]) - point_descriptor(b[l])).sum())
        else:
            total += MAX_RUN_DISTANCE
    return total / len(labels)


def retrieve_candidate(target: LabeledSilhouette, library: Sequence, pose: CameraPose,
                       resolution: int = 256) -> list[tuple[int, float]]:
    """Rank library entries ``(mesh, controllers)`` by labeled-segment similarity at ``pose``."""
    if not library:
        raise RetrievalError("library is empty")
    tgt = label_point_sets(target)
    scored = []
    for i, entry in enumerate(library):
        mesh = entry[0] if isinstance(entry, tuple) else entry
        sil = extract_contour(render_silhouette(mesh, pose, resolution))
        scored.append((segment_distance(tgt, label_point_sets(sil)), i))
    scored.sort()
    return [(i, d) for d, i in scored]


def retrieve_part(segment: np.ndarray, library_parts: Sequence) -> list[tuple[int, int, float]]:
    """Rank ``(model id, part id, run points)`` entries by run-descriptor distance."""
    if not library_parts:
        raise RetrievalError("part library is empty")
    q = point_descriptor(segment)
    scored = sorted((float(np.abs(q - point_descriptor(pts)).sum()), m, p)
                    for m, p, pts in library_parts)
    return [(m, p, d) for d, m, p in scored]
