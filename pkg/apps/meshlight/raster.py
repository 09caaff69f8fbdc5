"""
Rasterizador ortográfico con z-buffer y sombreado Phong / curvatura.

La cámara mira en −z; un fragmento con z mayor está más cerca. Los centros de
píxel están en (i + 0.5, j + 0.5) y el eje y de la imagen apunta hacia abajo.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from apps.core.exceptions import ConfigError

from .mesh import Mesh

logger = logging.getLogger(__name__)

BUCKETS = (1, 2, 4, 8, 16, 32, 64)
CANDIDATES_PER_CHUNK = 1 << 20
INSIDE_TOLERANCE = 1e-9
DEFAULT_AZIMUTHS = (0, 45, 90, 135, 180, 225, 270, 315)
VIEW = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class LightSpec:
    """Luz direccional y coeficientes Phong."""
    azimuth_deg: float = 0.0
    polar_deg: float = 45.0
    ambient: float = 0.1
    diffuse: float = 0.8
    specular: float = 0.1
    shininess: float = 5.0

    def __post_init__(self):
        for name in ('ambient', 'diffuse', 'specular'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"LightSpec.{name} debe estar en [0, 1], recibió {value}")
        if self.shininess <= 0:
            raise ConfigError(f"LightSpec.shininess debe ser > 0, recibió {self.shininess}")

    def with_angles(self, azimuth_deg: float, polar_deg: float) -> 'LightSpec':
        return replace(self, azimuth_deg=azimuth_deg, polar_deg=polar_deg)

    def as_dict(self) -> dict:
        return {
            'azimuth_deg': self.azimuth_deg, 'polar_deg': self.polar_deg, 'ambient': self.ambient,
            'diffuse': self.diffuse, 'specular': self.specular, 'shininess': self.shininess,
        }


@dataclass(frozen=True)
class RenderConfig:
    width: int = 512
    height: int = 512
    background_gray: int = 0
    fill: float = 0.95
    side: str = 'front'

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"RenderConfig: tamaño inválido {self.width}x{self.height}")
        if not 0 <= self.background_gray <= 255:
            raise ConfigError(f"RenderConfig: background_gray fuera de [0, 255]: {self.background_gray}")
        if not 0 < self.fill <= 1:
            raise ConfigError(f"RenderConfig: fill fuera de (0, 1]: {self.fill}")
        if self.side not in ('front', 'back'):
            raise ConfigError(f"RenderConfig: lado desconocido '{self.side}'")


def light_direction(light: LightSpec) -> np.ndarray:
    """Dirección desde la que llega la luz; θ desde el eje de la cámara, φ desde +x."""
    theta = math.radians(light.polar_deg)
    phi = math.radians(light.azimuth_deg % 360.0)
    return np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])


@dataclass(frozen=True)
class ImageFit:
    """Ajuste ortográfico: el rectángulo envolvente ocupa `fill` de la imagen."""
    scale: float
    center_x: float
    center_y: float
    width: int
    height: int

    @classmethod
    def for_vertices(cls, vertices: np.ndarray, width: int, height: int, fill: float = 0.95) -> 'ImageFit':
        low = vertices[:, :2].min(axis=0)
        high = vertices[:, :2].max(axis=0)
        extent = np.maximum(high - low, 1e-12)
        scale = fill * min(width / extent[0], height / extent[1])
        center = (low + high) / 2
        return cls(float(scale), float(center[0]), float(center[1]), width, height)

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64)
        sx = self.width / 2 + self.scale * (points[:, 0] - self.center_x)
        sy = self.height / 2 - self.scale * (points[:, 1] - self.center_y)
        return np.stack([sx, sy], axis=1), points[:, 2]


@dataclass
class Fragments:
    """Fragmento visible por píxel cubierto."""
    pixels: np.ndarray
    faces: np.ndarray
    weights: np.ndarray
    width: int
    height: int


def rasterize(screen: np.ndarray, depth: np.ndarray, faces: np.ndarray, width: int, height: int) -> Fragments:
    """
    Cobertura por funciones de arista sobre centros de píxel, con resolución de
    profundidad: gana el z mayor y, a igual z, la cara de menor índice.
    """
    tri = screen[faces]
    tri_depth = depth[faces]
    low = tri.min(axis=1)
    high = tri.max(axis=1)
    i0 = np.maximum(np.ceil(low[:, 0] - 0.5), 0).astype(np.int64)
    i1 = np.minimum(np.floor(high[:, 0] - 0.5), width - 1).astype(np.int64)
    j0 = np.maximum(np.ceil(low[:, 1] - 0.5), 0).astype(np.int64)
    j1 = np.minimum(np.floor(high[:, 1] - 0.5), height - 1).astype(np.int64)
    box_w = i1 - i0 + 1
    box_h = j1 - j0 + 1
    edge_ab = tri[:, 1] - tri[:, 0]
    edge_ac = tri[:, 2] - tri[:, 0]
    area2 = edge_ab[:, 0] * edge_ac[:, 1] - edge_ab[:, 1] * edge_ac[:, 0]
    usable = (box_w > 0) & (box_h > 0) & (area2 != 0)
    extent = np.maximum(box_w, box_h)

    context = (tri, tri_depth, area2, i0, j0, box_w, box_h, width)
    pieces = []
    previous = 0
    for size in BUCKETS:
        ids = np.flatnonzero(usable & (extent > previous) & (extent <= size))
        chunk = max(1, CANDIDATES_PER_CHUNK // (size * size))
        for start in range(0, len(ids), chunk):
            pieces.append(_cover(ids[start:start + chunk], size, size, context))
        previous = size
    for face in np.flatnonzero(usable & (extent > previous)):
        pieces.append(_cover(np.array([face]), int(box_w[face]), int(box_h[face]), context))

    if not pieces:
        empty = np.zeros(0, dtype=np.int64)
        return Fragments(empty, empty, np.zeros((0, 3)), width, height)
    pixels, face_ids, weights, z = (np.concatenate(parts) for parts in zip(*pieces))

    order = np.lexsort((face_ids, -z, pixels))
    pixels, face_ids, weights = pixels[order], face_ids[order], weights[order]
    first = np.ones(len(pixels), dtype=bool)
    first[1:] = pixels[1:] != pixels[:-1]
    return Fragments(pixels[first], face_ids[first], weights[first], width, height)


def _cover(ids: np.ndarray, grid_w: int, grid_h: int, context):
    tri, tri_depth, area2, i0, j0, box_w, box_h, width = context
    dy, dx = np.divmod(np.arange(grid_w * grid_h), grid_w)
    px = i0[ids, None] + dx
    py = j0[ids, None] + dy
    valid = (dx < box_w[ids, None]) & (dy < box_h[ids, None])
    cx = px + 0.5
    cy = py + 0.5
    a, b, c = tri[ids, 0], tri[ids, 1], tri[ids, 2]

    def edge(u, v):
        return (v[:, 0] - u[:, 0])[:, None] * (cy - u[:, 1][:, None]) \
            - (v[:, 1] - u[:, 1])[:, None] * (cx - u[:, 0][:, None])

    inv_area = 1.0 / area2[ids, None]
    l0 = edge(b, c) * inv_area
    l1 = edge(c, a) * inv_area
    l2 = edge(a, b) * inv_area
    inside = valid & (l0 >= -INSIDE_TOLERANCE) & (l1 >= -INSIDE_TOLERANCE) & (l2 >= -INSIDE_TOLERANCE)

    rows, cols = np.nonzero(inside)
    face_ids = ids[rows]
    weights = np.stack([l0[rows, cols], l1[rows, cols], l2[rows, cols]], axis=1)
    z = (weights * tri_depth[face_ids]).sum(axis=1)
    pixels = py[rows, cols] * width + px[rows, cols]
    return pixels, face_ids, weights, z


@dataclass
class Rasterized:
    """Malla proyectada lista para sombrear con distintas luces."""
    mesh: Mesh
    config: RenderConfig
    fit: ImageFit
    fragments: Fragments
    normals: np.ndarray = field(repr=False)

    def interpolate(self, values: np.ndarray) -> np.ndarray:
        corners = self.mesh.faces[self.fragments.faces]
        weights = self.fragments.weights
        if values.ndim == 1:
            return (weights * values[corners]).sum(axis=1)
        return (weights[:, :, None] * values[corners]).sum(axis=1)

    def compose(self, intensity: np.ndarray) -> np.ndarray:
        image = np.full((self.config.height, self.config.width), self.config.background_gray, dtype=np.uint8)
        image.reshape(-1)[self.fragments.pixels] = quantize(intensity)
        return image


def rasterize_mesh(mesh: Mesh, config: RenderConfig) -> Rasterized:
    oriented = mesh.for_side(config.side)
    fit = ImageFit.for_vertices(oriented.vertices, config.width, config.height, config.fill)
    screen, depth = fit.project(oriented.vertices)
    fragments = rasterize(screen, depth, oriented.faces, config.width, config.height)
    result = Rasterized(oriented, config, fit, fragments, normals=np.zeros((0, 3)))
    normals = result.interpolate(oriented.vertex_normals)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    result.normals = np.divide(normals, lengths, out=np.tile(VIEW, (len(normals), 1)), where=lengths > 0)
    logger.debug(f"{mesh.name}: {len(fragments.pixels)} píxeles cubiertos ({config.side})")
    return result


def quantize(intensity: np.ndarray) -> np.ndarray:
    """[0, 1] a 8 bits, redondeo medio hacia arriba tolerante a ruido de coma flotante."""
    return np.floor(np.clip(intensity, 0.0, 1.0) * 255.0 + 0.5 + 1e-9).astype(np.uint8)


def phong_intensity(normals: np.ndarray, light: LightSpec) -> np.ndarray:
    direction = light_direction(light)
    n_dot_l = normals @ direction
    lit = n_dot_l > 0
    reflected = 2.0 * n_dot_l[:, None] * normals - direction
    r_dot_v = np.maximum(reflected @ VIEW, 0.0)
    specular = np.where(lit, r_dot_v ** light.shininess, 0.0)
    return light.ambient + light.diffuse * np.maximum(n_dot_l, 0.0) + light.specular * specular


def shade_phong(rasterized: Rasterized, light: LightSpec) -> np.ndarray:
    return rasterized.compose(phong_intensity(rasterized.normals, light))


def render_phong(mesh: Mesh, light: LightSpec, config: RenderConfig) -> np.ndarray:
    return shade_phong(rasterize_mesh(mesh, config), light)


def orbit_augment(mesh: Mesh, config: RenderConfig, base_light: LightSpec = None,
                  azimuths: Sequence[float] = DEFAULT_AZIMUTHS,
                  polar_deg: float = 45.0) -> List[Tuple[np.ndarray, LightSpec]]:
    """Una imagen por azimut, en orden ascendente de φ, con θ fijo."""
    base_light = base_light or LightSpec()
    rasterized = rasterize_mesh(mesh, config)
    renders = []
    for azimuth in sorted(azimuths):
        light = base_light.with_angles(azimuth, polar_deg)
        renders.append((shade_phong(rasterized, light), light))
    return renders


def curvature_descriptor(mesh: Mesh, radii: Sequence[float]) -> np.ndarray:
    """
    Dispersión de normales multiescala por vértice, normalizada a [0, 1].

    Para cada radio: 1 − coseno medio entre la normal del vértice y las de los
    vértices dentro de la bola (incluido él mismo); luego promedio sobre radios.
    """
    radii = list(radii)
    if not radii or any(r <= 0 for r in radii):
        raise ConfigError(f"Radios de curvatura inválidos: {radii}")
    normals = mesh.vertex_normals
    count = len(normals)
    tree = cKDTree(mesh.vertices)
    descriptor = np.zeros(count)
    for radius in radii:
        pairs = tree.query_pairs(radius, output_type='ndarray')
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        cosines = np.einsum('ij,ij->i', normals[pairs[:, 0]], normals[pairs[:, 1]]) if len(pairs) else np.zeros(0)
        sums = np.ones(count) \
            + np.bincount(pairs[:, 0], weights=cosines, minlength=count) \
            + np.bincount(pairs[:, 1], weights=cosines, minlength=count)
        neighbours = np.ones(count) \
            + np.bincount(pairs[:, 0], minlength=count) + np.bincount(pairs[:, 1], minlength=count)
        descriptor += 1.0 - sums / neighbours
    descriptor /= len(radii)

    low, high = descriptor.min(), descriptor.max()
    if high - low <= 1e-15:
        return np.zeros(count)
    return (descriptor - low) / (high - low)


def render_curvature(mesh: Mesh, radii: Sequence[float], config: RenderConfig) -> np.ndarray:
    """Sustituto de la vista MSII: cuñas (mayor dispersión) oscuras sobre superficie clara."""
    descriptor = curvature_descriptor(mesh, radii)
    rasterized = rasterize_mesh(mesh, config)
    return rasterized.compose(1.0 - rasterized.interpolate(descriptor))


def render_mixed(phong: np.ndarray, curvature: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    if phong.shape != curvature.shape:
        raise ConfigError(f"render_mixed: tamaños distintos {phong.shape} y {curvature.shape}")
    if not 0 <= alpha <= 1:
        raise ConfigError(f"render_mixed: alpha fuera de [0, 1]: {alpha}")
    blend = alpha * curvature.astype(np.float64) + (1 - alpha) * phong.astype(np.float64)
    return np.floor(blend + 0.5).astype(np.uint8)
