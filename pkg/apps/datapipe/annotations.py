"""
Tipos del conjunto de datos: cajas, anotaciones por segmento, parches y particiones.

Formato de anotación (un JSON por segmento):

    {"segment_id": str, "side": "front"|"back", "image": ruta, "width": int,
     "height": int, "source_type": "photo"|"vl"|"msii"|"mixed",
     "boxes": [{"x_min": f, "y_min": f, "x_max": f, "y_max": f}, ...]}

La ruta `image` es relativa a la raíz de datos (el padre del directorio de
anotaciones) salvo que sea absoluta.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from apps.core.exceptions import AnnotationError, SplitError
from apps.core.serializers import validate_payload
from apps.core.utils import dump_json, load_json

from .serializers import SIDES, SOURCE_TYPES, SPLITS, AnnotationSetSerializer, SplitManifestSerializer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        values = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not np.all(np.isfinite(values)):
            raise AnnotationError(f"Caja con coordenadas no finitas: {values}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise AnnotationError(f"Caja sin área: {values}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> 'BBox':
        x_min, y_min, x_max, y_max = (float(v) for v in values)
        return cls(x_min, y_min, x_max, y_max)

    @classmethod
    def from_dict(cls, data: Dict) -> 'BBox':
        return cls(float(data['x_min']), float(data['y_min']), float(data['x_max']), float(data['y_max']))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_dict(self) -> Dict[str, float]:
        return {'x_min': self.x_min, 'y_min': self.y_min, 'x_max': self.x_max, 'y_max': self.y_max}

    def translated(self, dx: float, dy: float) -> 'BBox':
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def scaled(self, factor: float) -> 'BBox':
        return BBox(self.x_min * factor, self.y_min * factor, self.x_max * factor, self.y_max * factor)

    def intersection_area(self, other: 'BBox') -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return max(0.0, w) * max(0.0, h)

    def clipped(self, x_min: float, y_min: float, x_max: float, y_max: float) -> Optional['BBox']:
        """Recorte a un rectángulo; None si no queda área."""
        left, top = max(self.x_min, x_min), max(self.y_min, y_min)
        right, bottom = min(self.x_max, x_max), min(self.y_max, y_max)
        if left >= right or top >= bottom:
            return None
        return BBox(left, top, right, bottom)


@dataclass
class AnnotationSet:
    segment_id: str
    side: str
    image: str
    width: int
    height: int
    source_type: str
    boxes: List[BBox] = field(default_factory=list)

    def __post_init__(self):
        if not self.segment_id:
            raise AnnotationError("segment_id vacío")
        if self.side not in SIDES:
            raise AnnotationError(f"{self.segment_id}: lado desconocido '{self.side}'")
        if self.source_type not in SOURCE_TYPES:
            raise AnnotationError(f"{self.segment_id}: source_type desconocido '{self.source_type}'")
        kept = []
        for box in self.boxes:
            clipped = box.clipped(0, 0, self.width, self.height)
            if clipped is None:
                logger.warning(f"{self.segment_id}: caja {box.as_tuple()} fuera de la imagen, descartada")
                continue
            kept.append(clipped)
        self.boxes = kept

    @classmethod
    def from_dict(cls, data: Dict, source: str = '') -> 'AnnotationSet':
        validated = validate_payload(AnnotationSetSerializer, data, AnnotationError, source=source)
        boxes = [BBox.from_dict(box) for box in validated.pop('boxes')]
        return cls(boxes=boxes, **validated)

    @classmethod
    def load(cls, path) -> 'AnnotationSet':
        path = Path(path)
        try:
            data = load_json(path)
        except ValueError as e:
            raise AnnotationError(f"{path}: JSON inválido ({e})")
        return cls.from_dict(data, source=str(path))

    def to_dict(self) -> Dict:
        return {
            'segment_id': self.segment_id,
            'side': self.side,
            'image': self.image,
            'width': self.width,
            'height': self.height,
            'source_type': self.source_type,
            'boxes': [box.as_dict() for box in self.boxes],
        }

    def save(self, path) -> Path:
        return dump_json(self.to_dict(), path)

    def with_image(self, image: str, source_type: str = None, width: int = None, height: int = None) -> 'AnnotationSet':
        return replace(
            self, image=image, source_type=source_type or self.source_type,
            width=width or self.width, height=height or self.height, boxes=list(self.boxes),
        )

    def image_path(self, data_root) -> Path:
        path = Path(self.image)
        return path if path.is_absolute() else Path(data_root) / path


def load_annotation_dir(annotations_dir) -> Dict[str, AnnotationSet]:
    """Todas las anotaciones `*.json` de un directorio, indexadas por segment_id."""
    annotations_dir = Path(annotations_dir)
    if not annotations_dir.is_dir():
        raise AnnotationError(f"No existe el directorio de anotaciones {annotations_dir}")
    result = {}
    for path in sorted(annotations_dir.glob('*.json')):
        annotation = AnnotationSet.load(path)
        if annotation.segment_id in result:
            raise AnnotationError(f"{path}: segment_id duplicado '{annotation.segment_id}'")
        result[annotation.segment_id] = annotation
    return result


@dataclass
class Patch:
    """Recorte cuadrado de un segmento con sus cajas en coordenadas locales."""
    segment_id: str
    origin: Tuple[int, int]
    pixels: np.ndarray
    boxes: List[BBox] = field(default_factory=list)
    variant: str = ''
    source_type: str = 'vl'
    augmented: bool = False

    @property
    def window(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def name(self) -> str:
        return f"{self.variant or self.segment_id}_x{self.origin[0]}_y{self.origin[1]}"

    def global_boxes(self) -> List[BBox]:
        return [box.translated(*self.origin) for box in self.boxes]


@dataclass
class SplitManifest:
    seed: int
    assignments: Dict[str, str]

    def segments(self, split: str) -> List[str]:
        if split not in SPLITS:
            raise SplitError(f"Partición desconocida '{split}'")
        return sorted(sid for sid, assigned in self.assignments.items() if assigned == split)

    def counts(self) -> Tuple[int, int, int]:
        return tuple(len(self.segments(split)) for split in SPLITS)

    def split_of(self, segment_id: str) -> Optional[str]:
        return self.assignments.get(segment_id)

    def to_dict(self) -> Dict:
        return {'seed': self.seed, 'assignments': dict(sorted(self.assignments.items()))}

    @classmethod
    def from_dict(cls, data: Dict, source: str = '') -> 'SplitManifest':
        validated = validate_payload(SplitManifestSerializer, data, SplitError, source=source)
        return cls(seed=validated['seed'], assignments=dict(validated['assignments']))

    @classmethod
    def load(cls, path) -> 'SplitManifest':
        try:
            data = load_json(path)
        except (OSError, ValueError) as e:
            raise SplitError(f"{path}: no se pudo leer ({e})") from e
        return cls.from_dict(data, source=str(path))

    def save(self, path) -> Path:
        return dump_json(self.to_dict(), path)
