"""
Fotos sintéticas a partir de renders VL. Al render se le aplica una afín
aleatoria y luego tinte y ruido de sensor; las cajas siguen a la afín.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import cv2
import numpy as np

from apps.core.exceptions import DatasetError
from apps.core.imaging import load_image, save_png, to_gray_uint8
from apps.core.utils import load_json

from ..annotations import AnnotationSet, BBox
from .tiling import mean_pad_value
from .transforms import transform_boxes

logger = logging.getLogger(__name__)

PHOTO_IMAGES_DIR = 'images'
PHOTO_ANNOTATIONS_DIR = 'annotations'


@dataclass(frozen=True)
class PhotoSettings:
    tint: float = 0.15
    noise_std: float = 6.0
    max_rotation_deg: float = 4.0
    scale_range: Tuple[float, float] = (0.92, 1.08)
    max_shift: float = 0.03
    seed: int = 0

    def __post_init__(self):
        low, high = self.scale_range
        if not 0 < low <= high:
            raise DatasetError(f"Rango de escala inválido {self.scale_range}")
        if not 0 <= self.tint < 1:
            raise DatasetError(f"El tinte debe estar en [0, 1), recibió {self.tint}")


def random_affine(width: int, height: int, rng: np.random.Generator, settings: PhotoSettings) -> np.ndarray:
    """Afín 2×3 alrededor del centro de la imagen, desplazada una fracción de su tamaño."""
    angle = rng.uniform(-settings.max_rotation_deg, settings.max_rotation_deg)
    scale = rng.uniform(*settings.scale_range)
    matrix = cv2.getRotationMatrix2D((width / 2.0, height / 2.0), angle, scale)
    matrix[:, 2] += rng.uniform(-settings.max_shift, settings.max_shift, size=2) * (width, height)
    return matrix


def photo_proxy(image: np.ndarray, boxes: List[BBox], rng: np.random.Generator,
                settings: PhotoSettings = PhotoSettings()) -> Tuple[np.ndarray, List[BBox], np.ndarray]:
    """
    Imagen RGB uint8 con aspecto de foto, sus cajas transformadas y la afín usada.

    El borde que descubre la afín se rellena con la media del render.
    """
    gray = to_gray_uint8(image)
    height, width = gray.shape
    affine = random_affine(width, height, rng, settings)
    border = mean_pad_value(gray)
    warped = cv2.warpAffine(gray, affine, (width, height), flags=cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_CONSTANT, borderValue=border)

    gains = 1.0 + rng.uniform(-settings.tint, settings.tint, size=3)
    color = warped.astype(np.float64)[..., None] * gains
    color += rng.normal(0.0, settings.noise_std, size=color.shape)
    photo = np.clip(np.floor(color + 0.5), 0, 255).astype(np.uint8)
    return photo, transform_boxes(boxes, affine, width, height), affine


class PhotoService:

    @staticmethod
    def photo_directory(annotations: Dict[str, AnnotationSet], manifest_path, out_dir,
                        settings: PhotoSettings = PhotoSettings()) -> Dict[str, AnnotationSet]:
        """
        Una foto sintética por segmento del manifiesto de renders VL.

        Escribe `images/` y `annotations/` bajo `out_dir`, que queda como raíz de datos.
        """
        manifest_path, out_dir = Path(manifest_path), Path(out_dir)
        manifest = load_json(manifest_path)
        if manifest['render_type'] != 'vl':
            raise DatasetError(f"Las fotos sintéticas parten de renders VL, no de '{manifest['render_type']}'")

        result = {}
        entries = sorted(manifest['images'], key=lambda entry: entry['file'])
        for index, entry in enumerate(entries):
            annotation = annotations.get(entry['segment_id'])
            if annotation is None:
                logger.warning(f"{entry['file']}: sin anotación para '{entry['segment_id']}', se omite")
                continue
            if (entry['width'], entry['height']) != (annotation.width, annotation.height):
                logger.warning(f"{entry['file']}: tamaño distinto de la anotación, se omite")
                continue
            if annotation.segment_id in result:
                continue
            rng = np.random.default_rng([settings.seed, index])
            image = load_image(manifest_path.parent / entry['file'])
            photo, boxes, _ = photo_proxy(image, annotation.boxes, rng, settings)

            name = f"{PHOTO_IMAGES_DIR}/{annotation.segment_id}.png"
            save_png(photo, out_dir / name)
            photo_annotation = annotation.with_image(name, source_type='photo', width=photo.shape[1],
                                                     height=photo.shape[0])
            photo_annotation.boxes = boxes
            photo_annotation.save(out_dir / PHOTO_ANNOTATIONS_DIR / f"{annotation.segment_id}.json")
            result[annotation.segment_id] = photo_annotation
        if not result:
            raise DatasetError(f"Ninguna imagen de {manifest_path} tiene anotación")
        logger.info(f"Fotos sintéticas: {len(result)} segmentos -> {out_dir}")
        return result
