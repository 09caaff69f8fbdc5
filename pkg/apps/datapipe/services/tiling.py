"""
Recorte de segmentos en parches cuadrados con solape y su índice `patches.json`.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from apps.core.exceptions import DatasetError
from apps.core.imaging import load_image, save_png, to_gray_uint8
from apps.core.utils import dump_json, load_json, run_parallel

from ..annotations import AnnotationSet, BBox, Patch

logger = logging.getLogger(__name__)

PATCH_INDEX_NAME = 'patches.json'
DEFAULT_WINDOW = 512
DEFAULT_STRIDE = 256
DEFAULT_KEEP_FRACTION = 0.5


def window_origins(length: int, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> List[int]:
    """
    Orígenes de ventana sobre un eje: 0, stride, 2·stride, ... y, si la última
    se pasaría del borde, una ventana final pegada al borde. Un eje más corto
    que la ventana da un único origen negativo (relleno centrado).
    """
    if window <= 0 or stride <= 0:
        raise DatasetError(f"Ventana y paso deben ser positivos (window={window}, stride={stride})")
    if length < window:
        return [-((window - length) // 2)]
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] + window < length:
        origins.append(length - window)
    return origins


def crop_window(pixels: np.ndarray, x0: int, y0: int, window: int, pad_value) -> np.ndarray:
    """Ventana window×window; lo que cae fuera de la imagen se rellena."""
    height, width = pixels.shape[:2]
    crop = np.full((window, window), pad_value, dtype=pixels.dtype)
    src_x0, src_y0 = max(x0, 0), max(y0, 0)
    src_x1, src_y1 = min(x0 + window, width), min(y0 + window, height)
    crop[src_y0 - y0:src_y1 - y0, src_x0 - x0:src_x1 - x0] = pixels[src_y0:src_y1, src_x0:src_x1]
    return crop


def local_boxes(boxes: Sequence[BBox], x0: int, y0: int, window: int,
                keep_fraction: float = DEFAULT_KEEP_FRACTION) -> List[BBox]:
    """
    Cajas que caen al menos `keep_fraction` dentro de la ventana, recortadas
    a ella y llevadas a coordenadas del parche.
    """
    kept = []
    for box in boxes:
        inside = box.clipped(x0, y0, x0 + window, y0 + window)
        if inside is None or inside.area < keep_fraction * box.area:
            continue
        kept.append(BBox(inside.x_min - x0, inside.y_min - y0, inside.x_max - x0, inside.y_max - y0))
    return kept


def mean_pad_value(pixels: np.ndarray) -> int:
    """Relleno de fotos: media de la imagen redondeada con .5 hacia arriba."""
    return int(np.floor(float(np.mean(pixels)) + 0.5))


def tile_pixels(pixels: np.ndarray, boxes: Sequence[BBox], window: int = DEFAULT_WINDOW,
                stride: int = DEFAULT_STRIDE, keep_fraction: float = DEFAULT_KEEP_FRACTION,
                pad_value=0) -> List[Tuple[Tuple[int, int], np.ndarray, List[BBox]]]:
    height, width = pixels.shape[:2]
    tiles = []
    for y0 in window_origins(height, window, stride):
        for x0 in window_origins(width, window, stride):
            tiles.append((
                (x0, y0),
                crop_window(pixels, x0, y0, window, pad_value),
                local_boxes(boxes, x0, y0, window, keep_fraction),
            ))
    return tiles


def tile(annotation: AnnotationSet, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE,
         pixels: Optional[np.ndarray] = None, data_root=None, keep_fraction: float = DEFAULT_KEEP_FRACTION,
         background: int = 0, variant: str = '', augmented: bool = False) -> List[Patch]:
    """
    Parches de un segmento. Si no se pasan `pixels` se lee la imagen de la anotación.

    El relleno de ejes cortos usa `background` para renders y la media de la
    imagen para fotos.
    """
    if pixels is None:
        pixels = load_image(annotation.image_path(data_root or '.'))
    gray = to_gray_uint8(pixels)
    if gray.shape != (annotation.height, annotation.width):
        raise DatasetError(
            f"{annotation.segment_id}: la imagen mide {gray.shape[1]}x{gray.shape[0]}, "
            f"la anotación declara {annotation.width}x{annotation.height}"
        )
    pad_value = mean_pad_value(gray) if annotation.source_type == 'photo' else background
    variant = variant or Path(annotation.image).stem
    return [
        Patch(annotation.segment_id, origin, crop, boxes, variant=variant,
              source_type=annotation.source_type, augmented=augmented)
        for origin, crop, boxes in tile_pixels(gray, annotation.boxes, window, stride, keep_fraction, pad_value)
    ]


def patch_entry(patch: Patch) -> Dict:
    return {
        'file': f"{patch.name}.png",
        'segment_id': patch.segment_id,
        'variant': patch.variant,
        'source_type': patch.source_type,
        'augmented': patch.augmented,
        'origin': list(patch.origin),
        'boxes': [list(box.as_tuple()) for box in patch.boxes],
    }


@dataclass(frozen=True)
class TileJob:
    annotation: AnnotationSet
    image_path: str
    out_dir: str
    variant: str
    source_type: str
    augmented: bool
    window: int
    stride: int
    keep_fraction: float
    background: int


@dataclass
class PatchIndex:
    """Índice de parches escrito por `tile`; las rutas son relativas a su directorio."""
    root: Path
    window: int
    stride: int
    entries: List[Dict] = field(default_factory=list)

    @classmethod
    def load(cls, path) -> 'PatchIndex':
        path = Path(path)
        if path.is_dir():
            path = path / PATCH_INDEX_NAME
        if not path.exists():
            raise DatasetError(f"No existe el índice de parches {path}")
        data = load_json(path)
        return cls(root=path.parent, window=int(data['window']), stride=int(data['stride']),
                   entries=list(data['patches']))

    def segment_ids(self) -> List[str]:
        return sorted({entry['segment_id'] for entry in self.entries})

    def select(self, segment_ids=None, augmented: Optional[bool] = None) -> List[Dict]:
        wanted = set(segment_ids) if segment_ids is not None else None
        return [
            entry for entry in self.entries
            if (wanted is None or entry['segment_id'] in wanted)
            and (augmented is None or entry['augmented'] == augmented)
        ]

    def load_patch(self, entry: Dict) -> Patch:
        pixels = to_gray_uint8(load_image(self.root / entry['file']))
        return Patch(
            segment_id=entry['segment_id'],
            origin=(int(entry['origin'][0]), int(entry['origin'][1])),
            pixels=pixels,
            boxes=[BBox.from_sequence(box) for box in entry['boxes']],
            variant=entry['variant'],
            source_type=entry['source_type'],
            augmented=entry['augmented'],
        )

    def patches(self, segment_ids=None, augmented: Optional[bool] = None) -> Iterator[Patch]:
        for entry in self.select(segment_ids, augmented):
            yield self.load_patch(entry)


class TilingService:
    """Recorta anotaciones (o un manifiesto de renders) a parches en disco."""

    @staticmethod
    def tile_job(job: TileJob) -> List[Dict]:
        image_path = Path(job.image_path)
        if not image_path.exists():
            raise DatasetError(f"{job.annotation.segment_id}: no existe la imagen {image_path}")
        annotation = job.annotation
        patches = tile(annotation, job.window, job.stride, pixels=load_image(image_path),
                       keep_fraction=job.keep_fraction, background=job.background,
                       variant=job.variant, augmented=job.augmented)
        entries = []
        for patch in patches:
            patch.source_type = job.source_type
            entry = patch_entry(patch)
            save_png(patch.pixels, Path(job.out_dir) / entry['file'])
            entries.append(entry)
        logger.debug(f"{job.variant}: {len(entries)} parches")
        return entries

    @staticmethod
    def jobs_from_annotations(annotations: Dict[str, AnnotationSet], data_root, out_dir, **params) -> List[TileJob]:
        return [
            TileJob(annotation, str(annotation.image_path(data_root)), str(out_dir),
                    Path(annotation.image).stem, annotation.source_type, False, **params)
            for _, annotation in sorted(annotations.items())
        ]

    @staticmethod
    def jobs_from_manifest(annotations: Dict[str, AnnotationSet], manifest_path, out_dir, **params) -> List[TileJob]:
        """Un trabajo por imagen del manifiesto, emparejada por segment_id con su anotación."""
        manifest_path = Path(manifest_path)
        manifest = load_json(manifest_path)
        augmented = bool(manifest.get('settings', {}).get('ia', False))
        jobs = []
        for image in manifest['images']:
            annotation = annotations.get(image['segment_id'])
            if annotation is None:
                logger.warning(f"{image['file']}: sin anotación para '{image['segment_id']}', se omite")
                continue
            if (image['width'], image['height']) != (annotation.width, annotation.height):
                logger.warning(
                    f"{image['file']}: tamaño {image['width']}x{image['height']} distinto de la anotación "
                    f"{annotation.width}x{annotation.height}, se omite"
                )
                continue
            jobs.append(TileJob(
                annotation, str(manifest_path.parent / image['file']), str(out_dir),
                Path(image['file']).stem, manifest['render_type'], augmented, **params,
            ))
        return jobs

    @staticmethod
    def tile_dataset(annotations: Dict[str, AnnotationSet], out_dir, data_root=None, manifest_path=None,
                     window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE,
                     keep_fraction: float = DEFAULT_KEEP_FRACTION, background: int = 0,
                     workers: int = 1) -> Dict:
        out_dir = Path(out_dir)
        params = dict(window=window, stride=stride, keep_fraction=keep_fraction, background=background)
        if manifest_path is not None:
            jobs = TilingService.jobs_from_manifest(annotations, manifest_path, out_dir, **params)
        else:
            jobs = TilingService.jobs_from_annotations(annotations, data_root or '.', out_dir, **params)
        if not jobs:
            raise DatasetError("No hay imágenes anotadas para recortar")

        entries, failures = [], []
        for job, result, error in run_parallel(TilingService.tile_job, jobs, workers=workers):
            if error is not None:
                failures.append({'image': Path(job.image_path).name, 'error': str(error)})
                continue
            entries.extend(result)
        if not entries:
            raise DatasetError(f"Fallaron las {len(jobs)} imágenes a recortar")

        index = {
            'window': window,
            'stride': stride,
            'keep_fraction': keep_fraction,
            'patches': sorted(entries, key=lambda entry: entry['file']),
            'failures': failures,
        }
        dump_json(index, out_dir / PATCH_INDEX_NAME)
        logger.info(f"Recorte: {len(entries)} parches de {len(jobs) - len(failures)} imágenes, "
                    f"{len(failures)} fallos -> {out_dir}")
        return index
