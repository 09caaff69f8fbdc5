"""
Parches anotados con OpenCV: verdad en negro, verdaderos positivos en amarillo,
falsos negativos en rojo y falsos positivos en azul.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple

import cv2
import numpy as np

from apps.core.exceptions import EvaluationError
from apps.datapipe.annotations import BBox, Patch
from apps.detector.geometry import Detection, iou_matrix

logger = logging.getLogger(__name__)

# BGR
GT_COLOR = (0, 0, 0)
TP_COLOR = (0, 255, 255)
FN_COLOR = (0, 0, 255)
FP_COLOR = (255, 0, 0)


def classify_patch(detections: Sequence[Detection], gt: Sequence[BBox],
                   threshold: float = 0.5) -> Tuple[List[Detection], List[Detection], List[BBox]]:
    """(verdaderos positivos, falsos positivos, falsos negativos) con la regla de emparejamiento de la AP."""
    gt_boxes = np.array([box.as_tuple() for box in gt], dtype=np.float64).reshape(-1, 4)
    matched = np.zeros(len(gt_boxes), dtype=bool)
    tp, fp = [], []
    for detection in sorted(detections, key=lambda d: -d.score):
        if len(gt_boxes):
            overlaps = iou_matrix(detection.box.as_tuple(), gt_boxes)[0]
            overlaps[matched] = -1.0
            best = int(np.argmax(overlaps))
            if overlaps[best] >= threshold:
                matched[best] = True
                tp.append(detection)
                continue
        fp.append(detection)
    fn = [box for box, hit in zip(gt, matched) if not hit]
    return tp, fp, fn


def _draw(canvas: np.ndarray, box: BBox, color) -> None:
    x0, y0, x1, y1 = (int(round(v)) for v in box.as_tuple())
    cv2.rectangle(canvas, (x0, y0), (max(x1 - 1, x0), max(y1 - 1, y0)), color, 1)


def draw_overlay(patch: Patch, detections: Sequence[Detection], threshold: float = 0.5) -> np.ndarray:
    canvas = cv2.cvtColor(np.ascontiguousarray(patch.pixels, dtype=np.uint8), cv2.COLOR_GRAY2BGR)
    tp, fp, fn = classify_patch(detections, patch.boxes, threshold)
    for box in patch.boxes:
        _draw(canvas, box, GT_COLOR)
    for box in fn:
        _draw(canvas, box, FN_COLOR)
    for detection in fp:
        _draw(canvas, detection.box, FP_COLOR)
    for detection in tp:
        _draw(canvas, detection.box, TP_COLOR)
    return canvas


def write_overlays(patches: Sequence[Patch], detections: Sequence[Sequence[Detection]], out_dir,
                   min_score: float = 0.5, threshold: float = 0.5) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for patch, patch_detections in zip(patches, detections):
        shown = [d for d in patch_detections if d.score >= min_score]
        path = out_dir / f"{patch.name}.png"
        if not cv2.imwrite(str(path), draw_overlay(patch, shown, threshold)):
            raise EvaluationError(f"No se pudo escribir {path}")
        written.append(path)
    logger.info(f"{len(written)} superposiciones en {out_dir}")
    return written
