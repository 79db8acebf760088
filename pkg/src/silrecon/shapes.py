"""Procedural segmented meshes for tests, demos and synthetic experiments."""

from __future__ import annotations

import numpy as np

from .geometry import Mesh, merge_meshes

_BOX_FACES = np.array([
    [0, 2, 1], [0, 3, 2],  # -z
    [4, 5, 6], [4, 6, 7],  # +z
    [0, 1, 5], [0, 5, 4],  # -y
    [3, 7, 6], [3, 6, 2],  # +y
    [0, 4, 7], [0, 7, 3],  # -x
    [1, 2, 6], [1, 6, 5],  # +x
])


def box(center=(0, 0, 0), size=(1, 1, 1), rotation=None, name="box") -> Mesh:
    c = np.asarray(center, dtype=float)
    h = np.asarray(size, dtype=float) / 2
    corners = np.array([[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
                        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float) * h
    if rotation is not None:
        corners = corners @ np.asarray(rotation, dtype=float).T
    return Mesh(corners + c, _BOX_FACES, np.zeros(12, dtype=int), (name,))


def _lathe(profile_r, profile_y, segments: int, name: str, caps=True) -> Mesh:
    """Surface of revolution about +y from (radius, height) rings."""
    ang = 2 * np.pi * np.arange(segments) / segments
    verts, faces = [], []
    for r, y in zip(profile_r, profile_y):
        verts.extend([[r * np.cos(a), y, r * np.sin(a)] for a in ang])
    n_rings = len(profile_r)
    for i in range(n_rings - 1):
        for j in range(segments):
            a = i * segments + j
            b = i * segments + (j + 1) % segments
            c = (i + 1) * segments + (j + 1) % segments
            d = (i + 1) * segments + j
            faces += [[a, d, c], [a, c, b]]
    if caps:
        for ring, y, flip in ((0, profile_y[0], True), (n_rings - 1, profile_y[-1], False)):
            if profile_r[ring] <= 0:
                continue
            ci = len(verts)
            verts.append([0.0, y, 0.0])
            for j in range(segments):
                a = ring * segments + j
                b = ring * segments + (j + 1) % segments
                faces.append([ci, b, a] if flip else [ci, a, b])
    return Mesh(np.array(verts), np.array(faces), np.zeros(len(faces), dtype=int), (name,))


def cylinder(radius=0.2, height=1.0, segments=32, rings=11, name="cylinder") -> Mesh:
    ys = np.linspace(-height / 2, height / 2, rings)
    return _lathe(np.full(rings, radius), ys, segments, name)


def cone(base_radius=0.3, height=1.0, segments=32, rings=21, name="cone") -> Mesh:
    ys = np.linspace(-height / 2, height / 2, rings)
    rs = base_radius * (1 - (ys - ys[0]) / height)
    rs[-1] = 1e-3 * base_radius
    return _lathe(rs, ys, segments, name)


def sphere(radius=0.5, segments=64, rings=33, name="sphere") -> Mesh:
    phi = np.linspace(0, np.pi, rings)[1:-1]
    ys = -radius * np.cos(phi)
    rs = radius * np.sin(phi)
    ring_mesh = _lathe(rs, ys, segments, name, caps=False)
    v = ring_mesh.vertices
    faces = [f for f in ring_mesh.faces]
    bottom, top = len(v), len(v) + 1
    last = (len(rs) - 1) * segments
    for j in range(segments):
        faces.append([bottom, j, (j + 1) % segments])
        faces.append([top, last + (j + 1) % segments, last + j])
    verts = np.vstack([v, [[0, -radius, 0], [0, radius, 0]]])
    return Mesh(verts, np.array(faces), np.zeros(len(faces), dtype=int), (name,))


def translate(mesh: Mesh, offset) -> Mesh:
    return mesh.with_vertices(mesh.vertices + np.asarray(offset, dtype=float))


def chair(leg_length=0.45, leg_width=0.06, seat=(0.5, 0.06, 0.5), back_height=0.5,
          arms=False) -> Mesh:
    """Chair parts: seat, four legs (front-left, front-right, back-left, back-right), back, arms.

    The model is mirror-symmetric about x = 0; the floor sits at y = 0.
    """
    sx, sy, sz = seat
    seat_y = leg_length + sy / 2
    lx = sx / 2 - leg_width / 2
    lz = sz / 2 - leg_width / 2
    parts = [box((0, seat_y, 0), seat, name="seat")]
    for name, x, z in (("leg_fl", -lx, lz), ("leg_fr", lx, lz), ("leg_bl", -lx, -lz), ("leg_br", lx, -lz)):
        parts.append(box((x, leg_length / 2, z), (leg_width, leg_length, leg_width), name=name))
    top = leg_length + sy
    parts.append(box((0, top + back_height / 2, -sz / 2 + 0.03), (sx, back_height, 0.06), name="back"))
    if arms:
        for name, x in (("arm_l", -sx / 2 + 0.03), ("arm_r", sx / 2 - 0.03)):
            parts.append(box((x, top + 0.15, 0.0), (0.06, 0.06, sz * 0.9), name=name))
    return merge_meshes(parts)


def table(leg_length=0.5, top=(0.9, 0.05, 0.6), leg_radius=0.035) -> Mesh:
    """Table with a cuboid top and four cylindrical legs; symmetric about x = 0."""
    tx, ty, tz = top
    parts = [box((0, leg_length + ty / 2, 0), top, name="top")]
    lx, lz = tx / 2 - 0.08, tz / 2 - 0.08
    for name, x, z in (("leg_fl", -lx, lz), ("leg_fr", lx, lz), ("leg_bl", -lx, -lz), ("leg_br", lx, -lz)):
        leg = cylinder(leg_radius, leg_length, segments=16, rings=6, name=name)
        parts.append(translate(leg, (x, leg_length / 2, z)))
    return merge_meshes(parts)


def lamp() -> Mesh:
    """Asymmetric desk lamp: base, vertical post, offset arm box, cone shade."""
    parts = [
        box((0.1, 0.03, 0.05), (0.4, 0.06, 0.3), name="base"),
        translate(cylinder(0.03, 0.6, segments=16, rings=7, name="post"), (-0.02, 0.36, 0.0)),
        box((0.15, 0.66, 0.08), (0.38, 0.04, 0.05), name="arm"),
    ]
    shade = cone(0.12, 0.2, segments=16, rings=6, name="shade")
    parts.append(translate(shade, (0.33, 0.55, 0.12)))
    return merge_meshes(parts)


def stool_asym() -> Mesh:
    """Three-legged stool with legs placed off-symmetrically."""
    parts = [box((0, 0.5, 0), (0.5, 0.06, 0.42), name="seat")]
    for i, (x, z) in enumerate(((-0.2, 0.15), (0.18, 0.12), (0.02, -0.17))):
        parts.append(box((x, 0.235, z), (0.05, 0.47, 0.05), name=f"leg{i}"))
    parts.append(box((0.1, 0.78, -0.18), (0.3, 0.5, 0.04), name="back"))
    return merge_meshes(parts)


def desk() -> Mesh:
    """Asymmetric desk: top, drawer pedestal on one side, a single panel leg, shelf, monitor."""
    return merge_meshes([
        box((0.0, 0.52, 0.0), (1.0, 0.04, 0.5), name="top"),
        box((-0.33, 0.25, 0.02), (0.3, 0.5, 0.44), name="pedestal"),
        box((0.46, 0.25, -0.05), (0.05, 0.5, 0.36), name="panel"),
        box((0.1, 0.12, -0.2), (0.62, 0.03, 0.08), name="shelf"),
        box((0.2, 0.71, -0.12), (0.36, 0.3, 0.04), name="monitor"),
    ])
