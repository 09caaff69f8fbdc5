"""
Decodificación de la cabeza y predicción sobre parches o segmentos completos.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from apps.core.exceptions import CheckpointError
from apps.datapipe.annotations import BBox, Patch
from apps.datapipe.services.normalization import normalize_photo
from apps.datapipe.services.tiling import tile_pixels
from apps.evald.metrics import DEFAULT_NMS_THRESHOLD, merge_patches, nms
from apps.tensor_core.checkpoint import load_checkpoint, save_checkpoint
from apps.tensor_core.ops import sigmoid
from apps.tensor_core.tensor import Tensor, default_dtype

from ..config import DetectorConfig
from ..geometry import Detection, cell_grid, points_to_box
from ..network import HeadOutput, SignDetector, build_detector

logger = logging.getLogger(__name__)

DEFAULT_SCORE_FLOOR = 0.05
ORACLE_KIND = 'oracle'


def decode(out: HeadOutput, cfg: DetectorConfig, score_threshold: float = DEFAULT_SCORE_FLOOR,
           index: int = 0) -> List[Detection]:
    """
    Detecciones de la imagen `index` del lote, en píxeles de la entrada.

    Por celda la caja es la envolvente de P2 multiplicada por el paso y recortada
    a la imagen; se descartan las de área nula y las de puntaje bajo el umbral.
    """
    _, channels, h, w = out.p1_offsets.shape
    k = channels // 2
    grid = cell_grid(h, w)[:, :, None, :]
    d1 = out.p1_offsets.data[index].reshape(k, 2, h, w).transpose(2, 3, 0, 1)
    d2 = out.p2_offsets.data[index].reshape(k, 2, h, w).transpose(2, 3, 0, 1)
    points = (d1 + grid) + d2
    limit = float(cfg.input_size)
    boxes = np.clip(points_to_box(points) * cfg.stride, 0.0, limit).reshape(-1, 4)
    scores = sigmoid(out.logits.data[index, 0].astype(np.float64)).reshape(-1)

    keep = (scores >= score_threshold) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return [Detection(BBox.from_sequence(boxes[i]), float(scores[i])) for i in np.flatnonzero(keep)]


def decode_batch(out: HeadOutput, cfg: DetectorConfig, score_threshold: float = DEFAULT_SCORE_FLOOR) -> List[List[Detection]]:
    return [decode(out, cfg, score_threshold, index) for index in range(out.logits.shape[0])]


def prepare_batch(images: Sequence[np.ndarray]) -> Tensor:
    """Lote (N, 1, S, S) normalizado por imagen."""
    batch = np.stack([normalize_photo(image) for image in images])[:, None]
    return Tensor(batch, dtype=default_dtype())


class DetectorPredictor:
    """Predicción con pesos entrenados."""

    def __init__(self, detector: SignDetector, metadata: Dict = None):
        self.detector = detector.eval()
        self.cfg = detector.cfg
        self.metadata = metadata or {}

    def predict_images(self, images: Sequence[np.ndarray], score_threshold: float = DEFAULT_SCORE_FLOOR,
                       nms_threshold: Optional[float] = DEFAULT_NMS_THRESHOLD,
                       batch_size: int = 8) -> List[List[Detection]]:
        results = []
        for start in range(0, len(images), batch_size):
            out = self.detector(prepare_batch(images[start:start + batch_size]))
            for detections in decode_batch(out, self.cfg, score_threshold):
                results.append(nms(detections, nms_threshold) if nms_threshold is not None else detections)
        return results

    def predict_patches(self, patches: Sequence[Patch], **kwargs) -> List[List[Detection]]:
        return self.predict_images([patch.pixels for patch in patches], **kwargs)


class OraclePredictor:
    """Devuelve la verdad de cada parche con puntaje 1; cota superior para evaluar."""

    cfg = None
    metadata = {'kind': ORACLE_KIND}

    def predict_patches(self, patches: Sequence[Patch], **kwargs) -> List[List[Detection]]:
        return [[Detection(box, 1.0) for box in patch.boxes] for patch in patches]

    def predict_images(self, images: Sequence[np.ndarray], **kwargs) -> List[List[Detection]]:
        return [[] for _ in images]


class InferenceService:

    @staticmethod
    def save_detector(detector: SignDetector, path, extra: Dict = None) -> Path:
        metadata = {'kind': 'detector', 'detector': detector.cfg.as_dict()}
        metadata.update(extra or {})
        return save_checkpoint(path, detector.state_dict(), metadata)

    @staticmethod
    def write_oracle_checkpoint(path) -> Path:
        return save_checkpoint(path, {}, {'kind': ORACLE_KIND})

    @staticmethod
    def load_predictor(path):
        """Reconstruye el detector desde los metadatos del checkpoint."""
        state, metadata = load_checkpoint(path)
        kind = metadata.get('kind', 'detector')
        if kind == ORACLE_KIND:
            logger.info(f"{path}: checkpoint oráculo")
            return OraclePredictor()
        if 'detector' not in metadata:
            raise CheckpointError(f"{path}: el checkpoint no trae la configuración del detector")
        detector = build_detector(DetectorConfig.from_dict(metadata['detector']))
        detector.load_state_dict({name: values.astype(default_dtype()) for name, values in state.items()})
        return DetectorPredictor(detector, metadata)

    @staticmethod
    def detect_segment(predictor, image: np.ndarray, window: int, stride: int,
                       score_threshold: float = DEFAULT_SCORE_FLOOR,
                       nms_threshold: float = DEFAULT_NMS_THRESHOLD,
                       background: int = 0) -> List[Detection]:
        """Recorta, predice por parche y fusiona en coordenadas del segmento."""
        height, width = image.shape[:2]
        tiles = tile_pixels(image, [], window, stride, pad_value=background)
        per_patch = predictor.predict_images([crop for _, crop, _ in tiles], score_threshold=score_threshold,
                                             nms_threshold=nms_threshold)
        merged = merge_patches([(origin, dets) for (origin, _, _), dets in zip(tiles, per_patch)],
                               width, height, nms_threshold)
        logger.debug(f"Segmento {width}x{height}: {len(tiles)} parches, {len(merged)} detecciones")
        return merged

    @staticmethod
    def detections_document(image_name: str, width: int, height: int, detections: Sequence[Detection]) -> Dict:
        return {
            'image': image_name,
            'width': width,
            'height': height,
            'detections': [d.as_dict() for d in detections],
        }

    @staticmethod
    def check_window(predictor, window: int) -> None:
        cfg = getattr(predictor, 'cfg', None)
        if cfg is not None and cfg.input_size != window:
            raise CheckpointError(f"El detector espera entradas de {cfg.input_size}px, la ventana es {window}px")
