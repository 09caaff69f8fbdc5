import numpy as np

from apps.core.imaging import to_luma

MIN_STD = 1e-6


def normalize_photo(image: np.ndarray) -> np.ndarray:
    """
    Gris Rec.601 y z-score por imagen (media 0, desviación 1).

    Se aplica igual a fotos y renders; una imagen constante queda en ceros.
    """
    gray = to_luma(image)
    mean = gray.mean()
    std = max(float(gray.std()), MIN_STD)
    return (gray - mean) / std
