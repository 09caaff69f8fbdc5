"""
Servicio de renderizado por lotes: mallas -> PNG en escala de grises + manifiesto.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from apps.core.exceptions import ConfigError, CuneispotError
from apps.core.imaging import save_png
from apps.core.utils import dump_json, run_parallel

from ..mesh import load_mesh
from ..raster import (
    DEFAULT_AZIMUTHS, LightSpec, RenderConfig, curvature_descriptor, rasterize_mesh,
    render_mixed, shade_phong,
)

logger = logging.getLogger(__name__)

RENDER_TYPES = ('vl', 'msii', 'mixed')
MESH_SUFFIXES = ('.ply', '.obj')
MANIFEST_NAME = 'manifest.json'


@dataclass(frozen=True)
class RenderSettings:
    """Todo lo que define una corrida de renderizado."""
    render_type: str = 'vl'
    config: RenderConfig = field(default_factory=RenderConfig)
    light: LightSpec = field(default_factory=lambda: LightSpec(azimuth_deg=135.0, polar_deg=45.0))
    sides: Tuple[str, ...] = ('front', 'back')
    ia: bool = False
    azimuths: Tuple[float, ...] = DEFAULT_AZIMUTHS
    ia_polar: float = 45.0
    mixed_alpha: float = 0.5
    curvature_radii: Tuple[float, ...] = (2.0, 4.0)

    def __post_init__(self):
        if self.render_type not in RENDER_TYPES:
            raise ConfigError(f"Tipo de render desconocido '{self.render_type}' (use {', '.join(RENDER_TYPES)})")
        if not self.sides:
            raise ConfigError("Se necesita al menos un lado para renderizar")

    def lights(self) -> List[LightSpec]:
        if self.ia:
            return [self.light.with_angles(azimuth, self.ia_polar) for azimuth in sorted(self.azimuths)]
        return [self.light]

    def as_dict(self) -> Dict:
        return {
            'render_type': self.render_type,
            'width': self.config.width,
            'height': self.config.height,
            'background_gray': self.config.background_gray,
            'fill': self.config.fill,
            'sides': list(self.sides),
            'ia': self.ia,
            'azimuths': [float(a) for a in sorted(self.azimuths)],
            'ia_polar': self.ia_polar,
            'light': self.light.as_dict(),
            'mixed_alpha': self.mixed_alpha,
            'curvature_radii': list(self.curvature_radii),
        }


class RenderingService:
    """Convierte un directorio de mallas en imágenes por lado y luz."""

    @staticmethod
    def segment_id(mesh_path: Path, side: str) -> str:
        return f"{Path(mesh_path).stem}_{side}"

    @staticmethod
    def image_name(segment_id: str, light: Optional[LightSpec]) -> str:
        if light is None:
            return f"{segment_id}_msii.png"
        return f"{segment_id}_az{light.azimuth_deg:g}_pol{light.polar_deg:g}.png"

    @staticmethod
    def render_mesh_images(mesh, side: str, settings: RenderSettings) -> List[Tuple[np.ndarray, Optional[LightSpec]]]:
        """Imágenes de un lado de una malla según el tipo pedido."""
        config = replace(settings.config, side=side)
        rasterized = rasterize_mesh(mesh, config)
        if settings.render_type == 'vl':
            return [(shade_phong(rasterized, light), light) for light in settings.lights()]

        descriptor = curvature_descriptor(mesh, settings.curvature_radii)
        curvature = rasterized.compose(1.0 - rasterized.interpolate(descriptor))
        if settings.render_type == 'msii':
            return [(curvature, None)]
        return [
            (render_mixed(shade_phong(rasterized, light), curvature, settings.mixed_alpha), light)
            for light in settings.lights()
        ]

    @staticmethod
    def render_mesh_file(job: Tuple[str, str, RenderSettings]) -> List[Dict]:
        """Trabajo de un proceso: una malla, todos sus lados."""
        mesh_path, out_dir, settings = job
        mesh_path, out_dir = Path(mesh_path), Path(out_dir)
        mesh = load_mesh(mesh_path)
        entries = []
        for side in settings.sides:
            segment = RenderingService.segment_id(mesh_path, side)
            for image, light in RenderingService.render_mesh_images(mesh, side, settings):
                name = RenderingService.image_name(segment, light)
                save_png(image, out_dir / name)
                entries.append({
                    'file': name,
                    'segment_id': segment,
                    'side': side,
                    'mesh': mesh_path.name,
                    'render_type': settings.render_type,
                    'light': light.as_dict() if light is not None else None,
                    'width': settings.config.width,
                    'height': settings.config.height,
                })
        logger.info(f"{mesh_path.name}: {len(entries)} imágenes")
        return entries

    @staticmethod
    def find_meshes(meshes_dir: Path) -> List[Path]:
        meshes_dir = Path(meshes_dir)
        if not meshes_dir.is_dir():
            raise CuneispotError(f"No existe el directorio de mallas {meshes_dir}")
        return sorted(p for p in meshes_dir.iterdir() if p.suffix.lower() in MESH_SUFFIXES)

    @staticmethod
    def render_directory(meshes_dir, out_dir, settings: RenderSettings, workers: int = 1) -> Dict:
        """
        Renderiza cada malla del directorio y escribe `manifest.json`.

        Los fallos por archivo se registran; si fallan todos se lanza error.
        """
        out_dir = Path(out_dir)
        meshes = RenderingService.find_meshes(meshes_dir)
        if not meshes:
            raise CuneispotError(f"No hay mallas PLY/OBJ en {meshes_dir}")

        jobs = [(str(path), str(out_dir), settings) for path in meshes]
        results = run_parallel(RenderingService.render_mesh_file, jobs, workers=workers)

        images, failures = [], []
        for (mesh_path, _, _), entries, error in results:
            if error is not None:
                failures.append({'mesh': Path(mesh_path).name, 'error': str(error)})
                continue
            images.extend(entries)
        if not images:
            raise CuneispotError(f"Fallaron las {len(meshes)} mallas de {meshes_dir}")

        manifest = {
            'render_type': settings.render_type,
            'settings': settings.as_dict(),
            'images': sorted(images, key=lambda entry: entry['file']),
            'failures': failures,
        }
        dump_json(manifest, out_dir / MANIFEST_NAME)
        logger.info(f"Render {settings.render_type}: {len(images)} imágenes, {len(failures)} fallos -> {out_dir}")
        return manifest

