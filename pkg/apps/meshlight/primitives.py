"""
Mallas simples: campo de alturas, plano, esfera UV, disco y cono.

Todas las caras quedan orientadas en sentido antihorario vistas desde fuera.
"""

import numpy as np

from .mesh import Mesh


def grid_mesh(heights: np.ndarray, spacing: float = 1.0, origin=(0.0, 0.0), name: str = '') -> Mesh:
    """Campo de alturas (filas = y, columnas = x) triangulado en dos triángulos por celda."""
    heights = np.asarray(heights, dtype=np.float64)
    rows, cols = heights.shape
    ys, xs = np.mgrid[0:rows, 0:cols]
    vertices = np.stack([origin[0] + xs * spacing, origin[1] + ys * spacing, heights], axis=-1).reshape(-1, 3)

    index = np.arange(rows * cols).reshape(rows, cols)
    v00 = index[:-1, :-1].ravel()
    v10 = index[:-1, 1:].ravel()
    v01 = index[1:, :-1].ravel()
    v11 = index[1:, 1:].ravel()
    faces = np.concatenate([np.stack([v00, v10, v11], axis=1), np.stack([v00, v11, v01], axis=1)])
    return Mesh.from_arrays(vertices, faces, name=name)


def plane(size: float = 1.0, divisions: int = 1, z: float = 0.0) -> Mesh:
    heights = np.full((divisions + 1, divisions + 1), z)
    return grid_mesh(heights, spacing=size / divisions, name='plane')


def uv_sphere(radius: float = 1.0, latitudes: int = 64, longitudes: int = 128) -> Mesh:
    polar = np.pi * np.arange(1, latitudes) / latitudes
    azimuth = 2 * np.pi * np.arange(longitudes) / longitudes
    t, p = np.meshgrid(polar, azimuth, indexing='ij')
    ring = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1).reshape(-1, 3)
    unit = np.concatenate([[[0.0, 0.0, 1.0]], ring, [[0.0, 0.0, -1.0]]])

    top, bottom = 0, len(unit) - 1
    ring_index = 1 + np.arange((latitudes - 1) * longitudes).reshape(latitudes - 1, longitudes)
    nxt = np.roll(ring_index, -1, axis=1)
    faces = [np.stack([np.full(longitudes, top), ring_index[0], nxt[0]], axis=1)]
    a, b, c, d = ring_index[:-1], ring_index[1:], nxt[1:], nxt[:-1]
    faces.append(np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1))
    faces.append(np.stack([a.ravel(), c.ravel(), d.ravel()], axis=1))
    faces.append(np.stack([np.full(longitudes, bottom), nxt[-1], ring_index[-1]], axis=1))
    return Mesh.from_arrays(unit * radius, np.concatenate(faces), vertex_normals=unit, name='sphere')


def disc(radius: float = 1.0, segments: int = 64, rings: int = 8) -> Mesh:
    angles = 2 * np.pi * np.arange(segments) / segments
    radii = radius * np.arange(1, rings + 1) / rings
    r, a = np.meshgrid(radii, angles, indexing='ij')
    ring = np.stack([r * np.cos(a), r * np.sin(a), np.zeros_like(r)], axis=-1).reshape(-1, 3)
    vertices = np.concatenate([[[0.0, 0.0, 0.0]], ring])

    ring_index = 1 + np.arange(rings * segments).reshape(rings, segments)
    nxt = np.roll(ring_index, -1, axis=1)
    faces = [np.stack([np.zeros(segments, dtype=np.int64), ring_index[0], nxt[0]], axis=1)]
    inner, outer, outer_next, inner_next = ring_index[:-1], ring_index[1:], nxt[1:], nxt[:-1]
    faces.append(np.stack([inner.ravel(), outer.ravel(), outer_next.ravel()], axis=1))
    faces.append(np.stack([inner.ravel(), outer_next.ravel(), inner_next.ravel()], axis=1))
    return Mesh.from_arrays(vertices, np.concatenate(faces), name='disc')


def cone(radius: float = 1.0, height: float = 1.0, segments: int = 64) -> Mesh:
    angles = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles), np.zeros(segments)], axis=1)
    vertices = np.concatenate([[[0.0, 0.0, height]], ring, [[0.0, 0.0, 0.0]]])
    ring_index = 1 + np.arange(segments)
    nxt = np.roll(ring_index, -1)
    apex, base = 0, segments + 1
    faces = np.concatenate([
        np.stack([np.full(segments, apex), ring_index, nxt], axis=1),
        np.stack([np.full(segments, base), nxt, ring_index], axis=1),
    ])
    return Mesh.from_arrays(vertices, faces, name='cone')
