"""Icosahedral sphere point sets and the 26-neighbour rhombicuboctahedron router."""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

SQRT2 = math.sqrt(2.0)
MAX_LEVEL = 4


@dataclass(frozen=True)
class SpherePointSet:
    """Unit vectors from a subdivided icosahedron.

    ``faces`` indexes triangles of the subdivided mesh (kept for mesh
    checks); ``points`` are read-only.
    """

    points: np.ndarray
    level: int
    faces: np.ndarray

    def __len__(self):
        return len(self.points)


def _icosahedron():
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


@functools.lru_cache(maxsize=None)
def icosphere(level=MAX_LEVEL):
    """Icosahedron subdivided ``level`` times with vertices on the unit sphere.

    Vertices keep construction order: the 12 icosahedron corners first, then
    edge midpoints in the order they are first met. Midpoints are shared per
    edge, so no vertex is emitted twice.
    """
    if not 0 <= level <= MAX_LEVEL:
        raise DomainError(f"icosphere level must be in 0..{MAX_LEVEL}, got {level}")
    verts, faces = _icosahedron()
    points = [v for v in verts]
    for _ in range(level):
        midpoint = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = points[i] + points[j]
                points.append(m / np.linalg.norm(m))
                midpoint[key] = len(points) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    pts = np.array(points)
    faces = np.array(faces, dtype=np.int64)
    pts.setflags(write=False)
    faces.setflags(write=False)
    return SpherePointSet(pts, level, faces)


def nearest_point(v, sphere):
    """Index of the sphere point with the largest dot product with ``v``."""
    return int(np.argmax(sphere.points @ np.asarray(v, dtype=float)))


def angular_spacing(sphere):
    """Largest nearest-neighbour angle between points of the set (radians)."""
    P = sphere.points
    G = np.clip(P @ P.T, -1.0, 1.0)
    np.fill_diagonal(G, -2.0)
    return float(np.arccos(G.max(axis=1)).max())


# -- router ------------------------------------------------------------------

NEIGHBOR_OFFSETS = np.array(
    [o for o in itertools.product((-1, 0, 1), repeat=3) if any(o)], dtype=np.int64)
NEIGHBOR_OFFSETS.setflags(write=False)


def rhombicuboctahedron_vertices():
    """The 24 vertices: all permutations of ``(+-1, +-1, +-(1 + sqrt 2))``."""
    verts = set()
    for sx, sy, sz in itertools.product((-1, 1), repeat=3):
        base = (sx * 1.0, sy * 1.0, sz * (1.0 + SQRT2))
        verts.update(itertools.permutations(base))
    return np.array(sorted(verts))


@dataclass(frozen=True)
class RouterTable:
    """Face normals, plane distances and offsets of the 26 faces.

    Row ``f`` of every array refers to the same face; offsets are in
    lexicographic ``(ox, oy, oz)`` order, which is also the tie-break order.
    """

    normals: np.ndarray
    distances: np.ndarray
    offsets: np.ndarray
    vertices: np.ndarray

    def face_vertices(self, f, tol=1e-9):
        """Indices of the polyhedron vertices lying on face ``f``."""
        on = np.abs(self.vertices @ self.normals[f] - self.distances[f]) < tol
        return np.flatnonzero(on)

    def adjacent(self, a, b):
        """True when offsets ``a`` and ``b`` are equal or their faces touch."""
        fa, fb = self.face_index(a), self.face_index(b)
        if fa == fb:
            return True
        return bool(set(self.face_vertices(fa)) & set(self.face_vertices(fb)))

    def face_index(self, offset):
        o = tuple(int(c) for c in offset)
        return (o[0] + 1) * 9 + (o[1] + 1) * 3 + (o[2] + 1) - (1 if o > (0, 0, 0) else 0)


@functools.lru_cache(maxsize=None)
def build_router():
    """Router for the canonical rhombicuboctahedron.

    Every face normal is its normalised offset direction; each plane
    distance is the support value ``max_v v . n`` over the 24 vertices, which
    gives ``1 + sqrt 2`` for the 18 squares and ``(3 + sqrt 2)/sqrt 3`` for
    the 8 triangles.
    """
    offsets = NEIGHBOR_OFFSETS
    normals = offsets / np.linalg.norm(offsets, axis=1, keepdims=True)
    verts = rhombicuboctahedron_vertices()
    distances = (verts @ normals.T).max(axis=0)
    for arr in (normals, distances, verts):
        arr.setflags(write=False)
    return RouterTable(normals, distances, offsets, verts)


def _check_unit(v, tol=1e-6):
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > tol:
        raise DomainError(f"route() needs a unit vector, got norm {n:.8g}")


def route(v, table=None):
    """Lattice offset of the face through which the ray along ``v`` exits.

    Maximises ``(v . n_f) / d_f`` over the 26 faces; exact ties go to the
    lexicographically smallest offset.
    """
    table = table or build_router()
    v = np.asarray(v, dtype=float)
    _check_unit(v)
    f = int(np.argmax((table.normals @ v) / table.distances))
    return tuple(int(c) for c in table.offsets[f])


def route_many(V, table=None):
    """Vectorised :func:`route` over rows of ``V``; returns offsets ``(M, 3)``."""
    table = table or build_router()
    V = np.asarray(V, dtype=float)
    norms = np.linalg.norm(V, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise DomainError("route_many() needs unit vectors")
    f = np.argmax((V @ table.normals.T) / table.distances, axis=1)
    return table.offsets[f]
