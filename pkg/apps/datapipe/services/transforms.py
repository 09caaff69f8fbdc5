import logging
from typing import List, Optional, Sequence

import numpy as np

from apps.core.exceptions import TransformError

from ..annotations import BBox

logger = logging.getLogger(__name__)

SINGULAR_TOLERANCE = 1e-12


def transform_boxes(boxes: Sequence[BBox], affine, width: Optional[int] = None,
                    height: Optional[int] = None) -> List[BBox]:
    """
    Lleva cajas a otra imagen con una afín 2×3: transforma las 4 esquinas y toma
    la envolvente alineada a los ejes, recortada a la imagen destino si se da su tamaño.
    """
    matrix = np.asarray(affine, dtype=np.float64)
    if matrix.shape != (2, 3):
        raise TransformError(f"La afín debe ser 2×3, recibió {matrix.shape}")
    if abs(np.linalg.det(matrix[:, :2])) < SINGULAR_TOLERANCE:
        raise TransformError(f"Afín singular: {matrix.tolist()}")

    result = []
    for box in boxes:
        corners = np.array([
            [box.x_min, box.y_min], [box.x_max, box.y_min],
            [box.x_min, box.y_max], [box.x_max, box.y_max],
        ])
        mapped = corners @ matrix[:, :2].T + matrix[:, 2]
        low, high = mapped.min(axis=0), mapped.max(axis=0)
        hull = BBox(float(low[0]), float(low[1]), float(high[0]), float(high[1]))
        if width is not None and height is not None:
            hull = hull.clipped(0, 0, width, height)
            if hull is None:
                logger.warning(f"Caja {box.as_tuple()} queda fuera de la imagen destino")
                continue
        result.append(hull)
    return result
