"""
Conjuntos de puntos, pseudo-cajas y detecciones.

Los puntos viven en coordenadas del mapa de características: la celda (x_f, y_f)
está en (x_f, y_f) y la imagen se obtiene multiplicando por el paso.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from apps.datapipe.annotations import BBox
from apps.tensor_core import ops
from apps.tensor_core.tensor import Tensor


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    origin: Optional[Tuple[int, int]] = None

    def translated(self, dx: float, dy: float) -> 'Detection':
        return Detection(self.box.translated(dx, dy), self.score, None)

    def as_dict(self) -> dict:
        return {'box': list(self.box.as_tuple()), 'score': self.score}


def cell_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) con (x, y) de cada celda."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def points_to_box(points) -> np.ndarray:
    """
    Envolvente min-max de un conjunto de puntos (..., k, 2) -> (..., 4).

    Un conjunto con todos los puntos iguales da una caja de área cero.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim < 2 or points.shape[-1] != 2 or points.shape[-2] < 1:
        raise ValueError(f"Se esperaban puntos (..., k, 2), forma {points.shape}")
    low = points.min(axis=-2)
    high = points.max(axis=-2)
    return np.concatenate([low, high], axis=-1)


def offsets_to_points(offsets: Tensor, base: Tensor = None) -> Tensor:
    """
    Desplazamientos (N, 2k, H, W) a puntos (N, H, W, k, 2).

    El canal 2j es Δx del punto j y 2j+1 su Δy. Sin `base` los puntos se
    anclan en la celda; con `base` se suman a esos puntos.
    """
    n, channels, h, w = offsets.shape
    k = channels // 2
    deltas = offsets.reshape(n, k, 2, h, w).transpose(0, 3, 4, 1, 2)
    if base is None:
        return deltas + cell_grid(h, w)[None, :, :, None, :]
    return base + deltas


def pseudo_boxes(points: Tensor) -> Tensor:
    """Envolvente diferenciable: puntos (N, H, W, k, 2) -> cajas (N, H, W, 4)."""
    coords = points.transpose(4, 0, 1, 2, 3)
    xs, ys = coords[0], coords[1]
    return ops.stack([xs.min(axis=3), ys.min(axis=3), xs.max(axis=3), ys.max(axis=3)], axis=3)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.maximum(boxes[..., 2] - boxes[..., 0], 0.0) * np.maximum(boxes[..., 3] - boxes[..., 1], 0.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU entre cada caja de `a` (M, 4) y de `b` (N, 4); unión nula da 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    left = np.maximum(a[:, None, 0], b[None, :, 0])
    top = np.maximum(a[:, None, 1], b[None, :, 1])
    right = np.minimum(a[:, None, 2], b[None, :, 2])
    bottom = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(right - left, 0.0) * np.maximum(bottom - top, 0.0)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
