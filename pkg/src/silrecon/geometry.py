"""Core geometric types, model/image normalization and OBJ mesh I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TARGET_SIDE = 500


class MeshError(ValueError):
    """Raised for unreadable or invalid mesh data."""


@dataclass(frozen=True)
class Mesh:
    """Indexed triangle mesh with one part label per face."""

    vertices: np.ndarray
    faces: np.ndarray
    face_part: np.ndarray
    part_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        p = np.ascontiguousarray(self.face_part, dtype=np.int64).reshape(-1)
        if len(p) != len(f):
            raise MeshError("face_part length does not match face count")
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError("face references undefined vertex")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face (repeated vertex index)")
            labels = np.unique(p)
            if labels[0] != 0 or labels[-1] != len(labels) - 1:
                raise MeshError("part labels must be contiguous from 0")
        for a in (v, f, p):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "face_part", p)
        names = tuple(self.part_names) or tuple(f"part{i}" for i in range(self.n_parts))
        object.__setattr__(self, "part_names", names)

    @property
    def n_parts(self) -> int:
        return int(self.face_part.max()) + 1 if len(self.face_part) else 0

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def part_faces(self, part: int) -> np.ndarray:
        return self.faces[self.face_part == part]

    def part_vertex_ids(self, part: int) -> np.ndarray:
        return np.unique(self.part_faces(part))

    def vertex_part(self) -> np.ndarray:
        """Part label of every vertex (first face wins; -1 for unreferenced)."""
        out = np.full(len(self.vertices), -1, dtype=np.int64)
        # reversed so that the earliest face assignment is written last
        for col in range(3):
            out[self.faces[::-1, col]] = self.face_part[::-1]
        return out

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces, self.face_part, self.part_names)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        used = self.vertices[np.unique(self.faces)] if len(self.faces) else self.vertices
        return used.min(axis=0), used.max(axis=0)


@dataclass(frozen=True)
class RigidSimilarity:
    """x -> scale * rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation


@dataclass(frozen=True)
class ImageFrame:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image frame sides must be >= 1")


def _parse_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise MeshError(f"line {lineno}: malformed face index {token!r}") from None
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if idx < 0 or idx >= n_vertices:
        raise MeshError(f"line {lineno}: face references undefined vertex {head}")
    return idx


def load_mesh(path) -> Mesh:
    """Read an ASCII OBJ file; each ``g`` group becomes one part.

    Polygonal faces are fan-triangulated. Groups that own no faces are skipped
    so part labels stay contiguous.
    """
    path = Path(path)
    if not path.is_file():
        raise MeshError(f"mesh file not found: {path}")
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    face_group: list[int] = []
    group_names: list[str] = []
    current = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            kind = tok[0]
            if kind == "v":
                try:
                    vertices.append([float(t) for t in tok[1:4]])
                except ValueError:
                    raise MeshError(f"line {lineno}: malformed vertex") from None
                if len(vertices[-1]) != 3:
                    raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
            elif kind == "g":
                name = " ".join(tok[1:]) or f"group{len(group_names)}"
                group_names.append(name)
                current = len(group_names) - 1
            elif kind == "f":
                if len(tok) < 4:
                    raise MeshError(f"line {lineno}: face needs at least 3 vertices")
                if current < 0:
                    raise MeshError(f"line {lineno}: face outside any group (unsegmented model)")
                idx = [_parse_index(t, len(vertices), lineno) for t in tok[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
                    face_group.append(current)
            elif kind in ("vn", "vt", "o", "s", "usemtl", "mtllib", "l", "vp"):
                continue
            else:
                raise MeshError(f"line {lineno}: unknown directive {kind!r}")
    if not group_names:
        raise MeshError("OBJ has zero groups (unsegmented model)")
    used = sorted(set(face_group))
    remap = {g: i for i, g in enumerate(used)}
    parts = np.array([remap[g] for g in face_group], dtype=np.int64)
    names = tuple(group_names[g] for g in used)
    return Mesh(np.array(vertices, dtype=float).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3), parts, names)


def save_mesh(mesh: Mesh, path) -> None:
    """Write ``mesh`` as OBJ with one group per part (faces grouped by part)."""
    lines = ["# silrecon mesh"]
    lines += ["v %.9g %.9g %.9g" % tuple(v) for v in mesh.vertices]
    for part in range(mesh.n_parts):
        lines.append(f"g {mesh.part_names[part]}")
        for f in mesh.part_faces(part):
            lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def normalize_model(mesh: Mesh) -> tuple[Mesh, RigidSimilarity]:
    """Center at the bounding-box center and scale the longest side to 1."""
    if mesh.is_empty():
        raise MeshError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    longest = float(np.max(hi - lo))
    if longest <= 0:
        raise MeshError("zero-extent bounding box")
    center = (lo + hi) / 2
    s = 1.0 / longest
    transform = RigidSimilarity(np.eye(3), -s * center, s)
    out = (mesh.vertices - center) * s
    return mesh.with_vertices(out), transform


def normalize_frame(frame: ImageFrame) -> tuple[ImageFrame, float]:
    s = TARGET_SIDE / max(frame.width, frame.height)
    w = int(math.floor(frame.width * s + 0.5))
    h = int(math.floor(frame.height * s + 0.5))
    return ImageFrame(max(w, 1), max(h, 1)), s


def merge_meshes(parts: Sequence[Mesh]) -> Mesh:
    """Concatenate meshes, offsetting part labels so every input keeps its own parts."""
    verts, faces, labels, names = [], [], [], []
    v_off = p_off = 0
    for m in parts:
        verts.append(m.vertices)
        faces.append(m.faces + v_off)
        labels.append(m.face_part + p_off)
        names.extend(m.part_names)
        v_off += len(m.vertices)
        p_off += m.n_parts
    return Mesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(labels), tuple(names))
