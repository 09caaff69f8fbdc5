"""
Generador de tablillas sintéticas: un campo de alturas casi plano con
incisiones en V ("cuñas") y sus cajas de verdad en píxeles de imagen.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from apps.core.exceptions import DatasetError
from apps.core.utils import run_parallel
from apps.meshlight.mesh import Mesh, save_ply
from apps.meshlight.primitives import grid_mesh
from apps.meshlight.raster import ImageFit, LightSpec, RenderConfig
from apps.meshlight.services.rendering import RenderingService, RenderSettings

from ..annotations import AnnotationSet, BBox

logger = logging.getLogger(__name__)

GAP = 1.0


@dataclass(frozen=True)
class SynthSettings:
    """Geometría en unidades del modelo; el margen de caja en píxeles."""
    grid_size: int = 257
    spacing: float = 0.5
    relief_amplitude: float = 0.4
    relief_sigma: float = 24.0
    noise_amplitude: float = 0.03
    half_length: Tuple[float, float] = (4.0, 8.0)
    half_width: Tuple[float, float] = (2.0, 3.5)
    depth: Tuple[float, float] = (1.0, 2.0)
    margin_px: float = 2.0
    max_attempts: int = 500
    placement_retries: int = 3
    render: RenderConfig = field(default_factory=RenderConfig)
    light: LightSpec = field(default_factory=lambda: LightSpec(azimuth_deg=135.0, polar_deg=45.0))

    @property
    def extent(self) -> float:
        return (self.grid_size - 1) * self.spacing


@dataclass(frozen=True)
class Wedge:
    """Prisma triangular hundido: perfil en V a lo ancho, constante a lo largo."""
    center_x: float
    center_y: float
    angle: float
    half_length: float
    half_width: float
    depth: float

    @property
    def radius(self) -> float:
        return math.hypot(self.half_length, self.half_width)

    def local(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dx, dy = xs - self.center_x, ys - self.center_y
        cos_a, sin_a = math.cos(self.angle), math.sin(self.angle)
        return dx * cos_a + dy * sin_a, -dx * sin_a + dy * cos_a

    def indentation(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        u, v = self.local(xs, ys)
        profile = self.depth * np.maximum(0.0, 1.0 - np.abs(v) / self.half_width)
        return np.where(np.abs(u) <= self.half_length, profile, 0.0)

    def corners(self) -> np.ndarray:
        cos_a, sin_a = math.cos(self.angle), math.sin(self.angle)
        local = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * [self.half_length, self.half_width]
        rotation = np.array([[cos_a, -sin_a], [sin_a, cos_a]])
        return local @ rotation.T + [self.center_x, self.center_y]

    def overlaps(self, other: 'Wedge') -> bool:
        distance = math.hypot(self.center_x - other.center_x, self.center_y - other.center_y)
        return distance < self.radius + other.radius + GAP


@dataclass
class SynthSegment:
    stem: str
    mesh: Mesh
    wedges: List[Wedge]
    indentation: np.ndarray
    annotation: AnnotationSet


def wedge_count_range(wedges_per_segment: Union[range, Sequence[int], int]) -> Tuple[int, int]:
    """Acepta un entero, un par inclusivo (min, max) o un range."""
    if isinstance(wedges_per_segment, range):
        low, high = wedges_per_segment.start, wedges_per_segment.stop - 1
    elif isinstance(wedges_per_segment, int):
        low = high = wedges_per_segment
    else:
        low, high = (int(v) for v in wedges_per_segment)
    if low < 0 or high < low:
        raise DatasetError(f"Rango de cuñas inválido: {wedges_per_segment}")
    return low, high


def place_wedges(rng: np.random.Generator, count: int, settings: SynthSettings) -> List[Wedge]:
    """
    Muestreo por rechazo de cuñas que no se tocan y quedan dentro del campo.

    Lanza DatasetError si tras `max_attempts` candidatos faltan cuñas.
    """
    wedges = []
    attempts = 0
    while len(wedges) < count and attempts < settings.max_attempts:
        attempts += 1
        half_length = rng.uniform(*settings.half_length)
        half_width = rng.uniform(*settings.half_width)
        reach = math.hypot(half_length, half_width) + GAP
        if 2 * reach >= settings.extent:
            continue
        candidate = Wedge(
            center_x=rng.uniform(reach, settings.extent - reach),
            center_y=rng.uniform(reach, settings.extent - reach),
            angle=rng.uniform(0.0, math.pi),
            half_length=half_length,
            half_width=half_width,
            depth=rng.uniform(*settings.depth),
        )
        if not any(candidate.overlaps(other) for other in wedges):
            wedges.append(candidate)
    if len(wedges) < count:
        raise DatasetError(f"Solo se ubicaron {len(wedges)} de {count} cuñas tras {attempts} intentos")
    return wedges


def place_with_retries(rng: np.random.Generator, count: int, seed: int, index: int,
                       settings: SynthSettings) -> List[Wedge]:
    """
    Ubica exactamente `count` cuñas; si no caben reintenta con subsemillas
    (seed, index, intento) y al agotarlas lanza DatasetError.
    """
    for retry in range(settings.placement_retries + 1):
        placement_rng = rng if retry == 0 else np.random.default_rng([seed, index, retry])
        try:
            return place_wedges(placement_rng, count, settings)
        except DatasetError as e:
            logger.warning(f"Segmento {index}, intento {retry + 1}: {e}")
    raise DatasetError(f"Segmento {index}: no caben {count} cuñas tras {settings.placement_retries + 1} intentos")


def wedge_box(wedge: Wedge, fit: ImageFit, settings: SynthSettings) -> BBox:
    """Huella proyectada de la cuña con margen; cubre la celda de malla vecina al borde."""
    screen, _ = fit.project(np.column_stack([wedge.corners(), np.zeros(4)]))
    margin = settings.margin_px + fit.scale * settings.spacing
    low, high = screen.min(axis=0) - margin, screen.max(axis=0) + margin
    box = BBox(float(low[0]), float(low[1]), float(high[0]), float(high[1]))
    return box.clipped(0, 0, fit.width, fit.height)


def generate_segment(index: int, wedge_range: Tuple[int, int], seed: int,
                     settings: SynthSettings = None) -> SynthSegment:
    """Un segmento; depende solo de (seed, index), no del total generado."""
    settings = settings or SynthSettings()
    rng = np.random.default_rng([seed, index])
    stem = f"synth_{index:04d}"

    size = settings.grid_size
    relief = gaussian_filter(rng.standard_normal((size, size)), sigma=settings.relief_sigma, mode='reflect')
    relief *= settings.relief_amplitude / max(float(np.abs(relief).max()), 1e-12)
    base = relief + settings.noise_amplitude * rng.standard_normal((size, size))

    count = int(rng.integers(wedge_range[0], wedge_range[1] + 1))
    wedges = place_with_retries(rng, count, seed, index, settings)

    coords = np.arange(size) * settings.spacing
    xs, ys = np.meshgrid(coords, coords)
    indentation = np.zeros((size, size))
    for wedge in wedges:
        indentation = np.maximum(indentation, wedge.indentation(xs, ys))

    mesh = grid_mesh(base - indentation, spacing=settings.spacing, name=stem)
    render = settings.render
    fit = ImageFit.for_vertices(mesh.vertices, render.width, render.height, render.fill)
    boxes = [box for box in (wedge_box(w, fit, settings) for w in wedges) if box is not None]

    segment_id = RenderingService.segment_id(Path(stem), 'front')
    image = Path('renders') / 'vl' / RenderingService.image_name(segment_id, settings.light)
    annotation = AnnotationSet(
        segment_id=segment_id, side='front', image=image.as_posix(), width=render.width,
        height=render.height, source_type='vl', boxes=boxes,
    )
    return SynthSegment(stem, mesh, wedges, indentation.ravel(), annotation)


def synth_generate(n_segments: int, wedges_per_segment=(3, 8), seed: int = 0,
                   settings: SynthSettings = None) -> Tuple[List[Mesh], List[AnnotationSet]]:
    if n_segments < 1:
        raise DatasetError(f"Se necesita al menos un segmento, recibió {n_segments}")
    wedge_range = wedge_count_range(wedges_per_segment)
    segments = [generate_segment(i, wedge_range, seed, settings) for i in range(n_segments)]
    return [s.mesh for s in segments], [s.annotation for s in segments]


class SynthService:
    """Escribe un conjunto sintético completo: mallas, anotaciones y renders VL."""

    @staticmethod
    def write_segment(job: Tuple[int, Tuple[int, int], int, SynthSettings, str]) -> str:
        index, wedge_range, seed, settings, out_dir = job
        segment = generate_segment(index, wedge_range, seed, settings)
        out_dir = Path(out_dir)
        save_ply(segment.mesh, out_dir / 'meshes' / f"{segment.stem}.ply")
        segment.annotation.save(out_dir / 'annotations' / f"{segment.annotation.segment_id}.json")
        return segment.stem

    @staticmethod
    def generate_dataset(out_dir, n_segments: int, wedges_per_segment=(3, 8), seed: int = 0,
                         settings: SynthSettings = None, render: bool = True, workers: int = 1) -> Dict:
        settings = settings or SynthSettings()
        if n_segments < 1:
            raise DatasetError(f"Se necesita al menos un segmento, recibió {n_segments}")
        wedge_range = wedge_count_range(wedges_per_segment)
        out_dir = Path(out_dir)
        jobs = [(i, wedge_range, seed, settings, str(out_dir)) for i in range(n_segments)]
        results = run_parallel(SynthService.write_segment, jobs, workers=workers)
        failed = [str(error) for _, _, error in results if error is not None]
        if failed:
            raise DatasetError(f"Falló la generación de {len(failed)} segmentos: {failed[0]}")

        summary = {'segments': n_segments, 'seed': seed, 'wedges': list(wedge_range), 'out_dir': str(out_dir)}
        if render:
            render_settings = RenderSettings(render_type='vl', config=settings.render,
                                             light=settings.light, sides=('front',))
            manifest = RenderingService.render_directory(out_dir / 'meshes', out_dir / 'renders' / 'vl',
                                                         render_settings, workers=workers)
            summary['images'] = len(manifest['images'])
        logger.info(f"Sintético: {n_segments} segmentos en {out_dir}")
        return summary
