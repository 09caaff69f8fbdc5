"""
Post-proceso y métricas: IoU, NMS, fusión de parches y AP interpolada de 11 puntos.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from apps.datapipe.annotations import BBox
from apps.detector.geometry import Detection, iou_matrix

RECALL_LEVELS = tuple(i / 10 for i in range(11))
RECALL_TOLERANCE = 1e-12
DEFAULT_NMS_THRESHOLD = 0.4


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix([a.as_tuple()], [b.as_tuple()])[0, 0])


def _boxes(detections: Sequence[Detection]) -> np.ndarray:
    return np.array([d.box.as_tuple() for d in detections], dtype=np.float64).reshape(-1, 4)


def nms(detections: Sequence[Detection], threshold: float = DEFAULT_NMS_THRESHOLD) -> List[Detection]:
    """
    Supresión voraz: por puntaje descendente (empates: menor área, luego orden
    de entrada) se conserva una detección y se descartan las que la superan en
    IoU > threshold. La salida queda ordenada por puntaje.
    """
    detections = list(detections)
    if not detections:
        return []
    boxes = _boxes(detections)
    scores = np.array([d.score for d in detections])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    order = np.lexsort((np.arange(len(detections)), areas, -scores))

    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        overlaps = iou_matrix(boxes[i], boxes[order[1:]])[0]
        order = order[1:][overlaps <= threshold]
    return [detections[i] for i in keep]


def merge_patches(per_patch: Sequence[Tuple[Tuple[int, int], Sequence[Detection]]], width: int, height: int,
                  threshold: float = DEFAULT_NMS_THRESHOLD) -> List[Detection]:
    """Lleva las detecciones de cada parche a coordenadas del segmento, recorta y aplica NMS global."""
    merged = []
    for (x0, y0), detections in per_patch:
        for detection in detections:
            box = detection.box.translated(x0, y0).clipped(0, 0, width, height)
            if box is not None:
                merged.append(Detection(box, detection.score))
    return nms(merged, threshold)


@dataclass
class APResult:
    threshold: float
    ap: Optional[float]
    precisions: List[float] = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0
    recall: List[float] = field(default_factory=list)
    precision: List[float] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            'threshold': self.threshold,
            'ap': self.ap,
            'interpolated_precision': self.precisions,
            'tp': self.tp,
            'fp': self.fp,
            'fn': self.fn,
        }


def match_detections(detections_per_image: Sequence[Sequence[Detection]],
                     gt_per_image: Sequence[Sequence[BBox]], threshold: float):
    """
    Orden global por puntaje; cada detección toma, entre las cajas de su imagen
    aún libres, la de mayor IoU ≥ threshold (empate: menor índice).

    Devuelve (puntajes, es_tp) en orden de evaluación.
    """
    if len(detections_per_image) != len(gt_per_image):
        raise ValueError(f"{len(detections_per_image)} imágenes con detecciones y {len(gt_per_image)} con GT")
    flat = [(d.score, image, d) for image, dets in enumerate(detections_per_image) for d in dets]
    order = sorted(range(len(flat)), key=lambda i: -flat[i][0])

    gt_boxes = [_boxes_from_bbox(gt) for gt in gt_per_image]
    matched = [np.zeros(len(gt), dtype=bool) for gt in gt_per_image]
    scores, hits = [], []
    for i in order:
        score, image, detection = flat[i]
        hit = False
        if len(gt_boxes[image]):
            overlaps = iou_matrix(detection.box.as_tuple(), gt_boxes[image])[0]
            overlaps[matched[image]] = -1.0
            best = int(np.argmax(overlaps))
            if overlaps[best] >= threshold:
                matched[image][best] = True
                hit = True
        scores.append(score)
        hits.append(hit)
    return np.array(scores, dtype=np.float64), np.array(hits, dtype=bool)


def _boxes_from_bbox(boxes: Sequence[BBox]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def eleven_point_precisions(recall: np.ndarray, precision: np.ndarray) -> List[float]:
    values = []
    for level in RECALL_LEVELS:
        reached = recall >= level - RECALL_TOLERANCE
        values.append(float(precision[reached].max()) if reached.any() else 0.0)
    return values


def interpolated_ap(detections_per_image: Sequence[Sequence[Detection]], gt_per_image: Sequence[Sequence[BBox]],
                    threshold: float = 0.5) -> APResult:
    """
    AP interpolada de 11 puntos: media de la precisión máxima con recall ≥ r
    para r en {0, 0.1, ..., 1}.

    Sin GT y con detecciones la AP es 0; sin ambos queda indefinida (None).
    """
    scores, hits = match_detections(detections_per_image, gt_per_image, threshold)
    positives = sum(len(gt) for gt in gt_per_image)
    tp = int(hits.sum())
    fp = int(len(hits) - tp)

    if positives == 0:
        ap = 0.0 if len(hits) else None
        precisions = [0.0] * len(RECALL_LEVELS) if ap is not None else []
        return APResult(threshold, ap, precisions, tp=tp, fp=fp, fn=0, scores=scores.tolist())

    cum_tp = np.cumsum(hits)
    cum_fp = np.cumsum(~hits)
    recall = cum_tp / positives
    precision = cum_tp / np.maximum(cum_tp + cum_fp, np.finfo(np.float64).eps)
    precisions = eleven_point_precisions(recall, precision)
    return APResult(
        threshold=threshold,
        ap=float(np.mean(precisions)),
        precisions=precisions,
        tp=tp,
        fp=fp,
        fn=positives - tp,
        recall=recall.tolist(),
        precision=precision.tolist(),
        scores=scores.tolist(),
    )
