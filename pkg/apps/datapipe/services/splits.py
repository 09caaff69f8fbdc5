"""
Partición train/val/test a nivel de segmento.
"""

import logging
from typing import Iterable, Sequence, Tuple

import numpy as np

from apps.core.exceptions import SplitError

from ..annotations import SplitManifest
from ..serializers import SPLITS

logger = logging.getLogger(__name__)

MIN_SEGMENTS = 4


def split_counts(total: int, ratio: Sequence[float] = (2, 1, 1)) -> Tuple[int, int, int]:
    """
    Cantidades por partición con la regla del mayor resto: piso de cada cuota
    y las unidades sobrantes a los restos más grandes (empate: orden train, val, test).
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    if ratio.shape != (3,) or np.any(ratio <= 0):
        raise SplitError(f"La proporción debe tener 3 valores positivos, recibió {ratio.tolist()}")
    quotas = total * ratio / ratio.sum()
    counts = np.floor(quotas).astype(int)
    remainders = quotas - counts
    leftover = total - int(counts.sum())
    for index in sorted(range(3), key=lambda i: (-remainders[i], i))[:leftover]:
        counts[index] += 1
    return tuple(int(c) for c in counts)


def split_segments(segment_ids: Iterable[str], ratio: Sequence[float] = (2, 1, 1), seed: int = 0) -> SplitManifest:
    """Barajado determinista por semilla y asignación contigua según la proporción."""
    ids = sorted(set(segment_ids))
    if len(ids) < MIN_SEGMENTS:
        raise SplitError(f"Se necesitan al menos {MIN_SEGMENTS} segmentos para particionar, hay {len(ids)}")

    counts = split_counts(len(ids), ratio)
    if min(counts) == 0:
        raise SplitError(f"La proporción {list(ratio)} deja una partición vacía con {len(ids)} segmentos")

    order = np.random.default_rng(seed).permutation(len(ids))
    labels = np.repeat(np.arange(3), counts)
    assignments = {ids[position]: SPLITS[label] for position, label in zip(order, labels)}
    logger.info(f"Partición seed={seed}: train={counts[0]} val={counts[1]} test={counts[2]}")
    return SplitManifest(seed=seed, assignments=assignments)
