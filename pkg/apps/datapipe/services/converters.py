"""
Importador de anotaciones estilo COCO a un JSON por segmento.
"""

import logging
from collections import defaultdict
from pathlib import Path
from typing import List

from apps.core.exceptions import AnnotationError
from apps.core.serializers import validate_payload
from apps.core.utils import load_json

from ..annotations import AnnotationSet, BBox
from ..serializers import SIDES, CocoDocumentSerializer

logger = logging.getLogger(__name__)


def side_from_stem(stem: str) -> str:
    """`tablilla_back` -> back; cualquier otro nombre se toma como anverso."""
    for side in SIDES:
        if stem.endswith(f"_{side}"):
            return side
    return 'front'


def coco_to_annotations(document: dict, source_type: str = 'photo', image_prefix: str = '',
                        source: str = '') -> List[AnnotationSet]:
    """
    Una AnnotationSet por imagen COCO; bbox [x, y, w, h] pasa a (x_min, y_min, x_max, y_max).

    El segment_id es el nombre de archivo sin extensión; si no termina en
    `_front`/`_back` se le agrega el lado.
    """
    validated = validate_payload(CocoDocumentSerializer, document, AnnotationError, source=source)
    boxes_by_image = defaultdict(list)
    for item in validated['annotations']:
        x, y, w, h = item['bbox']
        boxes_by_image[item['image_id']].append(BBox(x, y, x + w, y + h))

    known = {image['id'] for image in validated['images']}
    orphans = sorted(set(boxes_by_image) - known)
    if orphans:
        logger.warning(f"{source or 'COCO'}: anotaciones de imágenes inexistentes {orphans}, se omiten")

    annotations, seen = [], set()
    for image in sorted(validated['images'], key=lambda item: item['file_name']):
        stem = Path(image['file_name']).stem
        side = side_from_stem(stem)
        segment_id = stem if stem.endswith(f"_{side}") else f"{stem}_{side}"
        if segment_id in seen:
            raise AnnotationError(f"{source}: segment_id repetido '{segment_id}'")
        seen.add(segment_id)
        annotations.append(AnnotationSet(
            segment_id=segment_id,
            side=side,
            image=f"{image_prefix}{image['file_name']}",
            width=image['width'],
            height=image['height'],
            source_type=source_type,
            boxes=boxes_by_image.get(image['id'], []),
        ))
    return annotations


def import_coco(coco_path, out_dir, source_type: str = 'photo', image_prefix: str = '') -> List[Path]:
    coco_path = Path(coco_path)
    try:
        document = load_json(coco_path)
    except (OSError, ValueError) as e:
        raise AnnotationError(f"{coco_path}: no se pudo leer ({e})")
    written = []
    for annotation in coco_to_annotations(document, source_type, image_prefix, source=str(coco_path)):
        written.append(annotation.save(Path(out_dir) / f"{annotation.segment_id}.json"))
    logger.info(f"COCO {coco_path.name}: {len(written)} anotaciones -> {out_dir}")
    return written
