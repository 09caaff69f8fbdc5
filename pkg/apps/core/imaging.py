"""
Lectura y escritura de imágenes con Pillow.
"""

from pathlib import Path

import numpy as np
from PIL import Image

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def save_png(image: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format='PNG')
    return path


def load_image(path) -> np.ndarray:
    """PNG (u otro formato de Pillow) como arreglo; conserva color si lo hay."""
    with Image.open(path) as image:
        if image.mode not in ('L', 'RGB'):
            image = image.convert('RGB')
        return np.asarray(image)


def to_luma(image: np.ndarray) -> np.ndarray:
    """Luminancia Rec.601 en float64; una imagen gris pasa sin cambios."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


def to_gray_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2 and image.dtype == np.uint8:
        return image
    return np.clip(np.floor(to_luma(image) + 0.5), 0, 255).astype(np.uint8)
