"""
Asignación de objetivos por celda del mapa de características.

Todas las cajas de este módulo están en coordenadas del mapa (imagen / paso).
"""

from dataclasses import asdict, dataclass
from typing import List, Sequence

import numpy as np

from apps.core.exceptions import ConfigError
from apps.datapipe.annotations import BBox
from apps.detector.geometry import box_areas, iou_matrix, points_to_box
from apps.detector.network import HeadOutput
from apps.tensor_core.ops import IGNORE, NEGATIVE, POSITIVE

ASSIGNMENT_MODES = ('paper_literal', 'standard')


@dataclass(frozen=True)
class LossWeights:
    """
    Pesos de la pérdida y umbrales de asignación.

    paper_literal: θ_FP ≤ IoU < θ_TP es fondo y IoU < θ_FP se ignora.
    standard: IoU < θ_FP es fondo y la banda intermedia se ignora.
    """
    lambda_loc1: float = 50.0
    lambda_loc2: float = 100.0
    lambda_class: float = 1.0
    theta_tp: float = 0.7
    theta_fp: float = 0.6
    assignment_mode: str = 'paper_literal'
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        mode = self.assignment_mode.replace('-', '_')
        if mode not in ASSIGNMENT_MODES:
            raise ConfigError(f"assignment_mode desconocido '{self.assignment_mode}' (use {', '.join(ASSIGNMENT_MODES)})")
        object.__setattr__(self, 'assignment_mode', mode)
        if not 0 < self.theta_fp < self.theta_tp < 1:
            raise ConfigError(f"Se requiere 0 < θ_FP < θ_TP < 1, recibió θ_FP={self.theta_fp}, θ_TP={self.theta_tp}")
        for name in ('lambda_loc1', 'lambda_loc2', 'lambda_class'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} debe ser positivo, recibió {getattr(self, name)}")
        if not 0 <= self.focal_alpha <= 1 or self.focal_gamma < 0:
            raise ConfigError(f"focal_alpha={self.focal_alpha}, focal_gamma={self.focal_gamma} fuera de rango")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AssignmentResult:
    """
    Objetivos de un lote, con forma (N, H, W) en máscaras y etiquetas y
    (N, H, W, 4) en cajas; las cajas fuera de su máscara valen cero.
    """
    loc1_mask: np.ndarray
    loc1_targets: np.ndarray
    loc2_mask: np.ndarray
    loc2_targets: np.ndarray
    labels: np.ndarray

    @property
    def positives(self) -> int:
        return int((self.labels == POSITIVE).sum())

    def counts(self) -> dict:
        return {
            'centers': int(self.loc1_mask.sum()),
            'sign': self.positives,
            'background': int((self.labels == NEGATIVE).sum()),
            'ignore': int((self.labels == IGNORE).sum()),
        }

    @classmethod
    def stack(cls, results: Sequence['AssignmentResult']) -> 'AssignmentResult':
        return cls(*(np.stack([getattr(r, name) for r in results]) for name in
                     ('loc1_mask', 'loc1_targets', 'loc2_mask', 'loc2_targets', 'labels')))


def feature_boxes(gt: Sequence[BBox], stride: int) -> np.ndarray:
    return np.array([box.as_tuple() for box in gt], dtype=np.float64).reshape(-1, 4) / stride


def center_targets(boxes: np.ndarray, height: int, width: int):
    """
    Cada centro de GT cae en la celda floor(centro); si dos comparten celda
    gana la de menor área (empate: menor índice).
    """
    mask = np.zeros((height, width), dtype=bool)
    targets = np.zeros((height, width, 4))
    if not len(boxes):
        return mask, targets
    cx = np.clip(np.floor((boxes[:, 0] + boxes[:, 2]) / 2).astype(np.int64), 0, width - 1)
    cy = np.clip(np.floor((boxes[:, 1] + boxes[:, 3]) / 2).astype(np.int64), 0, height - 1)
    # orden inverso de prioridad: el último en escribir gana
    order = np.lexsort((-np.arange(len(boxes)), -box_areas(boxes)))
    for i in order:
        mask[cy[i], cx[i]] = True
        targets[cy[i], cx[i]] = boxes[i]
    return mask, targets


def classify_overlaps(best_iou: np.ndarray, weights: LossWeights) -> np.ndarray:
    labels = np.full(best_iou.shape, IGNORE, dtype=np.int64)
    labels[best_iou >= weights.theta_tp] = POSITIVE
    if weights.assignment_mode == 'paper_literal':
        band = (best_iou >= weights.theta_fp) & (best_iou < weights.theta_tp)
        labels[band] = NEGATIVE
    else:
        labels[best_iou < weights.theta_fp] = NEGATIVE
    return labels


def assign_from_boxes(gt: Sequence[BBox], p1_boxes: np.ndarray, stride: int,
                      weights: LossWeights) -> AssignmentResult:
    """Asignación de una imagen a partir de sus pseudo-cajas P1 (H, W, 4) en coordenadas del mapa."""
    height, width = p1_boxes.shape[:2]
    boxes = feature_boxes(gt, stride)
    loc1_mask, loc1_targets = center_targets(boxes, height, width)

    flat = p1_boxes.reshape(-1, 4)
    if len(boxes):
        overlaps = iou_matrix(flat, boxes)
        best = overlaps.argmax(axis=1)
        best_iou = overlaps[np.arange(len(flat)), best]
    else:
        best = np.zeros(len(flat), dtype=np.int64)
        best_iou = np.zeros(len(flat))

    labels = classify_overlaps(best_iou, weights)
    loc2_mask = labels == POSITIVE
    loc2_targets = np.zeros((len(flat), 4))
    loc2_targets[loc2_mask] = boxes[best[loc2_mask]]
    return AssignmentResult(
        loc1_mask=loc1_mask,
        loc1_targets=loc1_targets,
        loc2_mask=loc2_mask.reshape(height, width),
        loc2_targets=loc2_targets.reshape(height, width, 4),
        labels=labels.reshape(height, width),
    )


def assign_targets(gt: Sequence[BBox], head: HeadOutput, cfg, weights: LossWeights, index: int = 0) -> AssignmentResult:
    """Objetivos de la imagen `index` del lote; `gt` en píxeles de la imagen."""
    p1_boxes = points_to_box(head.p1_points().data[index])
    return assign_from_boxes(gt, p1_boxes, cfg.stride, weights)


def assign_batch(gt_per_image: Sequence[Sequence[BBox]], head: HeadOutput, cfg,
                 weights: LossWeights) -> AssignmentResult:
    p1_boxes = points_to_box(head.p1_points().data)
    results: List[AssignmentResult] = [
        assign_from_boxes(gt, p1_boxes[i], cfg.stride, weights) for i, gt in enumerate(gt_per_image)
    ]
    return AssignmentResult.stack(results)
