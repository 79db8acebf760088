"""Point, curve and segment correspondence between two closed silhouettes, and
projection-based part-label transfer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .render import (CameraPose, LabeledSilhouette, extract_contour, label_runs,
                     render_silhouette, signed_area, simplify_loop, subdivide_loop)

DEFAULT_SAMPLES = 128
MIN_RUN = 3


class CorrespondenceError(ValueError):
    pass


@dataclass(eq=False)
class ContourParam:
    """Closed contour resampled uniformly in arc length (CCW).

    ``directions`` is the unit direction of the source edge each sample lies
    on; ``labels`` the label of that edge (``None`` for unlabeled input).
    """

    points: np.ndarray
    arc: np.ndarray
    turning: np.ndarray
    directions: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return len(self.points)


def _turning(points: np.ndarray) -> np.ndarray:
    prev = points - np.roll(points, 1, axis=0)
    nxt = np.roll(points, -1, axis=0) - points
    cross = prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0]
    dot = (prev * nxt).sum(axis=1)
    return np.arctan2(cross, dot)


def parameterize(loop: np.ndarray, n: int = DEFAULT_SAMPLES, labels=None) -> ContourParam:
    loop = np.asarray(loop, dtype=float)
    if n < 8:
        raise CorrespondenceError("need at least 8 samples")
    if len(loop) < 4 or not np.array_equal(loop[0], loop[-1]):
        raise CorrespondenceError("loop must be closed with >= 3 distinct points")
    if len(np.unique(loop[:-1], axis=0)) < 3:
        raise CorrespondenceError("degenerate loop")
    if labels is not None:
        labels = np.asarray(labels)
    if signed_area(loop) < 0:
        loop = loop[::-1]
        labels = None if labels is None else labels[::-1]
    seg = np.diff(loop, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 0
    starts, seg, seg_len = loop[:-1][keep], seg[keep], seg_len[keep]
    if labels is not None:
        labels = labels[keep]
    cum = np.r_[0.0, np.cumsum(seg_len)]
    total = cum[-1]
    s = np.arange(n) * (total / n)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / seg_len[k]
    pts = starts[k] + frac[:, None] * seg[k]
    return ContourParam(pts, np.arange(n) / n, _turning(pts), seg[k] / seg_len[k][:, None],
                        None if labels is None else labels[k].astype(int))


@dataclass
class PointCorrespondence:
    pairs: np.ndarray
    cost: float
    offset: tuple = (0, 0)

    def to_json(self) -> dict:
        return {"pairs": self.pairs.tolist(), "cost": self.cost}


def _cuts(na: int, nb: int) -> list[tuple[int, int]]:
    return [(k, l) for k in range(na) for l in range(nb)]


def local_costs(a: ContourParam, b: ContourParam, cuts) -> np.ndarray:
    """Squared feature differences with arc positions re-based at each cut."""
    ia, ib = np.arange(a.n), np.arange(b.n)
    out = np.empty((len(cuts), a.n, b.n))
    for c, (k, l) in enumerate(cuts):
        ra = np.r_[ia[k:], ia[:k]]
        rb = np.r_[ib[l:], ib[:l]]
        ds = a.arc[:, None] - b.arc[None, :]
        dt = a.turning[ra][:, None] - b.turning[rb][None, :]
        out[c] = ds * ds + dt * dt
    return out


def _dtw_batch(cost: np.ndarray) -> np.ndarray:
    """Accumulated DTW cost for a stack of (na, nb) matrices, by anti-diagonals."""
    m, na, nb = cost.shape
    acc = np.full((m, na + 1, nb + 1), np.inf)
    acc[:, 0, 0] = 0.0
    for d in range(na + nb - 1):
        i = np.arange(max(0, d - nb + 1), min(na, d + 1))
        j = d - i
        best = np.minimum(np.minimum(acc[:, i, j], acc[:, i, j + 1]), acc[:, i + 1, j])
        acc[:, i + 1, j + 1] = cost[:, i, j] + best
    return acc


def _backtrack(acc: np.ndarray) -> list[tuple[int, int]]:
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        steps = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(steps, key=lambda s: s[0])
        path.append((i - 1, j - 1))
    return path[::-1]


@njit(cache=True)
def _final_costs_kernel(arc_a, arc_b, turn_a, turn_b):
    na, nb = len(arc_a), len(arc_b)
    out = np.empty(na * nb)
    prev = np.empty(nb + 1)
    cur = np.empty(nb + 1)
    for k in range(na):
        for l in range(nb):
            prev[:] = np.inf
            prev[0] = 0.0
            for i in range(na):
                cur[0] = np.inf
                ta = turn_a[(k + i) % na]
                for j in range(nb):
                    ds = arc_a[i] - arc_b[j]
                    dt = ta - turn_b[(l + j) % nb]
                    best = min(min(prev[j], prev[j + 1]), cur[j])
                    cur[j + 1] = (ds * ds + dt * dt) + best
                prev, cur = cur, prev
                prev[0] = np.inf
            out[k * nb + l] = prev[nb]
    return out


def _final_costs(a: ContourParam, b: ContourParam) -> np.ndarray:
    """DTW end cost of every cut (k, l) in row-major order, bitwise equal to :func:`_dtw_batch`."""
    return _final_costs_kernel(a.arc, b.arc, a.turning, b.turning)


def match_points(a: ContourParam, b: ContourParam) -> PointCorrespondence:
    """Minimal-cost cyclically monotone alignment of two parameterized contours.

    Every pair of start samples (k, l) is tried, with arc positions re-based
    at the start; the first minimal pair in row-major order wins.
    """
    if a.n < 8 or b.n < 8:
        raise CorrespondenceError("contours need >= 8 samples")
    cuts = _cuts(a.n, b.n)
    finals = _final_costs(a, b)
    best = int(np.argmin(finals))
    k, l = cuts[best]
    acc = _dtw_batch(local_costs(a, b, [(k, l)]))[0]
    path = _backtrack(acc)
    pairs = np.array([((i + k) % a.n, (j + l) % b.n) for i, j in path], dtype=np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return PointCorrespondence(pairs[order], float(finals[best]), (k, l))


@dataclass
class SegmentPair:
    label: int
    c_indices: np.ndarray
    o_indices: np.ndarray
    pairs: np.ndarray


@dataclass
class SegmentCorrespondence:
    segments: list = field(default_factory=list)

    def labels(self) -> set:
        return {s.label for s in self.segments}

    def to_json(self) -> list:
        return [{"label": s.label, "candidate": s.c_indices.tolist(), "object": s.o_indices.tolist(),
                 "pairs": s.pairs.tolist()} for s in self.segments]

    @classmethod
    def from_json(cls, doc: list) -> "SegmentCorrespondence":
        return cls([SegmentPair(int(d["label"]), np.array(d["candidate"], dtype=np.int64),
                                np.array(d["object"], dtype=np.int64),
                                np.array(d["pairs"], dtype=np.int64).reshape(-1, 2)) for d in doc])


def lift_to_segments(corr: PointCorrespondence, candidate_labels: np.ndarray, n_object: int) -> SegmentCorrespondence:
    """Map each maximal same-label run of the candidate onto an object index interval."""
    labels = np.asarray(candidate_labels)
    n = len(labels)
    by_c: dict = {}
    for i, j in corr.pairs:
        by_c.setdefault(int(i), []).append(int(j))
    out = SegmentCorrespondence()
    for lab, start, length in label_runs(labels):
        idx = np.array([(start + t) % n for t in range(length)])
        if length == n:
            o_idx = np.arange(n_object)
        else:
            j0 = by_c[int(idx[0])][0]
            j1 = by_c[int(idx[-1])][-1]
            span = (j1 - j0) % n_object
            o_idx = (j0 + np.arange(span + 1)) % n_object
        if len(np.unique(o_idx)) < MIN_RUN:
            continue
        in_run = np.isin(corr.pairs[:, 0], idx)
        pairs = corr.pairs[in_run]
        # keep the run's own cyclic order
        pos = {int(v): t for t, v in enumerate(idx)}
        pairs = pairs[np.argsort([pos[int(p)] for p in pairs[:, 0]], kind="stable")]
        out.segments.append(SegmentPair(lab, idx, o_idx, pairs))
    return out


def _normalize_points(p: np.ndarray) -> np.ndarray:
    c = p.mean(axis=0)
    scale = np.sqrt(((p - c) ** 2).sum(axis=1).mean())
    return (p - c) / (scale if scale > 0 else 1.0)


def _absorb_short_runs(points: np.ndarray, labels: np.ndarray, min_len: int = MIN_RUN) -> np.ndarray:
    labels = labels.copy()
    n = len(labels)
    while True:
        runs = label_runs(labels)
        if len(runs) <= 1:
            return labels
        short = [(length, tuple(points[s]), r) for r, (lab, s, length) in enumerate(runs) if length < min_len]
        if not short:
            return labels
        _, _, r = min(short)
        lab, s, length = runs[r]
        prev_run = runs[r - 1]
        next_run = runs[(r + 1) % len(runs)]
        fill = prev_run[0] if prev_run[2] >= next_run[2] else next_run[0]
        labels[[(s + t) % n for t in range(length)]] = fill


def clean_labels(sil: LabeledSilhouette) -> LabeledSilhouette:
    """Absorb label runs shorter than three pixel edges into their longer neighbor."""
    loops, labels = [], []
    for loop, labs in zip(sil.loops, sil.labels):
        pts, lab = subdivide_loop(loop, labs)
        sp, sl = simplify_loop(pts, _absorb_short_runs(pts, lab))
        loops.append(sp)
        labels.append(sl)
    return LabeledSilhouette(loops, labels)


def transfer_labels(representative, pose: CameraPose, target: LabeledSilhouette,
                    resolution: int = 256, align: bool = True) -> LabeledSilhouette:
    """Label every target contour edge with the nearest representative contour edge.

    With ``align`` both silhouettes are centered on their edge-midpoint
    centroid and scaled to unit RMS radius first; without it they are compared
    in shared pixel coordinates (both rendered with the same fixed framing).
    Runs shorter than three pixel edges are absorbed by their longer neighbor.
    """
    mesh = representative[0] if isinstance(representative, tuple) else representative
    if not target.loops:
        raise CorrespondenceError("target silhouette is empty")
    rep = clean_labels(extract_contour(render_silhouette(mesh, pose, resolution)))
    rep_mid, rep_lab = [], []
    for loop, labs in zip(rep.loops, rep.labels):
        pts, lab = subdivide_loop(loop, labs)
        rep_mid.append((pts[:-1] + pts[1:]) / 2)
        rep_lab.append(lab)
    rep_mid = np.vstack(rep_mid)
    rep_lab = np.concatenate(rep_lab)
    tgt_loops = [subdivide_loop(loop)[0] for loop in target.loops]
    tgt_mid = [(p[:-1] + p[1:]) / 2 for p in tgt_loops]
    all_mid = np.vstack(tgt_mid)
    c_t, s_t, c_r, s_r = np.zeros(2), 1.0, np.zeros(2), 1.0
    if align:
        c_t = all_mid.mean(axis=0)
        s_t = np.sqrt(((all_mid - c_t) ** 2).sum(axis=1).mean())
        c_r = rep_mid.mean(axis=0)
        s_r = np.sqrt(((rep_mid - c_r) ** 2).sum(axis=1).mean())
    tree = cKDTree((rep_mid - c_r) / s_r)
    loops, labels = [], []
    for pts, mids in zip(tgt_loops, tgt_mid):
        _, nn = tree.query((mids - c_t) / s_t)
        lab = _absorb_short_runs(pts, rep_lab[nn])
        sp, sl = simplify_loop(pts, lab)
        loops.append(sp)
        labels.append(sl)
    return LabeledSilhouette(loops, labels)


def outer_param(sil: LabeledSilhouette, n: int = DEFAULT_SAMPLES) -> ContourParam:
    k = sil.outer_index()
    return parameterize(sil.loops[k], n, sil.labels[k])
