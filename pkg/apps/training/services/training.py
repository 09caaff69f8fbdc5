"""
Ciclo de entrenamiento: barajado con semilla, asignación, pérdida, SGD y
selección del mejor checkpoint por AP@50 de validación al final de cada época.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from django.utils import timezone

from apps.core.exceptions import ConfigError, DatasetError, NonFiniteError, TrainingDivergedError
from apps.core.models import EstadoCorrida
from apps.core.utils import config_hash, dump_json
from apps.datapipe.annotations import Patch
from apps.detector.config import DetectorConfig
from apps.detector.network import SignDetector, build_detector
from apps.detector.services.inference import (
    DEFAULT_SCORE_FLOOR, DetectorPredictor, InferenceService, prepare_batch,
)
from apps.evald.metrics import DEFAULT_NMS_THRESHOLD, interpolated_ap
from apps.tensor_core.optim import SgdState, sgd_step
from apps.tensor_core.tensor import precision

from ..assignment import LossWeights, assign_batch
from ..losses import total_loss
from ..models import TrainingRun

logger = logging.getLogger(__name__)

HISTORY_NAME = 'history.json'
BEST_CHECKPOINT_NAME = 'best.cspt'
DEFAULT_EPOCHS = {'toy': 30, 'full': 60}
DEFAULT_BATCH_SIZE = {'toy': 2, 'full': 8}


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    seed: int = 0
    precision: int = 64
    score_floor: float = DEFAULT_SCORE_FLOOR
    nms_threshold: float = DEFAULT_NMS_THRESHOLD

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"epochs={self.epochs}, batch_size={self.batch_size} fuera de rango")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision debe ser 32 o 64, recibió {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingResult:
    detector: SignDetector
    history: List[Dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_ap50: Optional[float] = None
    checkpoint_path: Optional[Path] = None


def step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def batches(patches: Sequence[Patch], batch_size: int, rng: np.random.Generator) -> List[List[Patch]]:
    order = rng.permutation(len(patches))
    return [[patches[i] for i in order[start:start + batch_size]] for start in range(0, len(order), batch_size)]


def validation_ap50(detector: SignDetector, patches: Sequence[Patch], settings: TrainSettings) -> float:
    predictor = DetectorPredictor(detector)
    detections = predictor.predict_patches(patches, score_threshold=settings.score_floor,
                                           nms_threshold=settings.nms_threshold, batch_size=settings.batch_size)
    result = interpolated_ap(detections, [patch.boxes for patch in patches], 0.5)
    return result.ap if result.ap is not None else 0.0


def train_step(detector: SignDetector, batch: Sequence[Patch], weights: LossWeights, state: SgdState) -> Dict:
    params = detector.parameters()
    out = detector(prepare_batch([patch.pixels for patch in batch]))
    assignment = assign_batch([patch.boxes for patch in batch], out, detector.cfg, weights)
    breakdown = total_loss(out, assignment, weights)
    detector.zero_grad()
    breakdown.total.backward()
    sgd_step(params, [param.grad for param in params], state)
    return breakdown.as_dict()


def train_loop(train_patches: Sequence[Patch], val_patches: Sequence[Patch], cfg: DetectorConfig,
               weights: LossWeights = None, settings: TrainSettings = None, out_dir=None) -> TrainingResult:
    """
    Entrena desde cero y devuelve el detector con los pesos de la mejor época.

    Con `out_dir` escribe best.cspt e history.json. Con epochs=0 devuelve los
    pesos iniciales y un historial vacío.
    """
    weights = weights or LossWeights()
    settings = settings or TrainSettings()
    if settings.epochs and (not train_patches or not val_patches):
        raise DatasetError(f"Se requieren parches de entrenamiento y validación "
                           f"({len(train_patches)} / {len(val_patches)})")
    out_dir = Path(out_dir) if out_dir is not None else None

    with precision(settings.dtype):
        detector = build_detector(cfg)
        params = detector.parameters()
        state = SgdState.for_parameters(params, learning_rate=settings.learning_rate,
                                        momentum=settings.momentum, weight_decay=settings.weight_decay)
        result = TrainingResult(detector)
        best_state = detector.state_dict()

        for epoch in range(1, settings.epochs + 1):
            rng = np.random.default_rng([settings.seed, epoch])
            totals = {'loss': 0.0, 'loc1': 0.0, 'loc2': 0.0, 'class': 0.0}
            epoch_batches = batches(train_patches, settings.batch_size, rng)
            detector.train()
            for step, batch in enumerate(epoch_batches):
                detector.reseed(step_seed(settings.seed, epoch, step))
                try:
                    losses = train_step(detector, batch, weights, state)
                except NonFiniteError as e:
                    raise TrainingDivergedError(f"Época {epoch}, paso {step}: la pérdida divergió ({e})") from e
                if not np.isfinite(losses['loss']):
                    raise TrainingDivergedError(f"Época {epoch}, paso {step}: pérdida {losses['loss']}")
                for key in totals:
                    totals[key] += losses[key]
                logger.debug(f"Época {epoch} paso {step}: " + ', '.join(f"{k}={v:.4f}" for k, v in losses.items()))

            count = len(epoch_batches)
            val_ap50 = validation_ap50(detector, val_patches, settings)
            entry = {
                'epoch': epoch,
                'train_loss': totals['loss'] / count,
                'loc1': totals['loc1'] / count,
                'loc2': totals['loc2'] / count,
                'class': totals['class'] / count,
                'val_ap50': val_ap50,
            }
            result.history.append(entry)
            logger.info(f"Época {epoch}/{settings.epochs}: pérdida {entry['train_loss']:.4f}, AP@50 val {val_ap50:.4f}")

            if result.best_val_ap50 is None or val_ap50 > result.best_val_ap50:
                result.best_epoch = epoch
                result.best_val_ap50 = val_ap50
                best_state = detector.state_dict()

        detector.load_state_dict(best_state)
        detector.eval()

    if out_dir is not None:
        extra = {
            'epoch': result.best_epoch,
            'val_ap50': result.best_val_ap50,
            'loss': weights.as_dict(),
            'training': settings.as_dict(),
        }
        result.checkpoint_path = InferenceService.save_detector(detector, out_dir / BEST_CHECKPOINT_NAME, extra)
        dump_json(result.history, out_dir / HISTORY_NAME)
    return result


class TrainingService:
    """Entrenamiento con registro en la base de datos."""

    @staticmethod
    def run(train_patches: Sequence[Patch], val_patches: Sequence[Patch], cfg: DetectorConfig,
            weights: LossWeights, settings: TrainSettings, out_dir, record: bool = True,
            resolved_config: Dict = None) -> TrainingResult:
        run = None
        if record:
            run = TrainingRun.objects.create(
                config_hash=config_hash(resolved_config or {'detector': cfg.as_dict(), 'loss': weights.as_dict(),
                                                            'training': settings.as_dict()}),
                preset=cfg.preset,
                assignment_mode=weights.assignment_mode,
                seed=settings.seed,
                estado=EstadoCorrida.ENTRENANDO,
            )
        try:
            result = train_loop(train_patches, val_patches, cfg, weights, settings, out_dir)
        except Exception as e:
            logger.error(f"Entrenamiento fallido: {e}")
            if run is not None:
                run.estado = EstadoCorrida.ERROR
                run.error_mensaje = str(e)
                run.save()
            raise

        if run is not None:
            run.estado = EstadoCorrida.COMPLETADO
            run.epochs_run = len(result.history)
            run.best_epoch = result.best_epoch
            run.best_val_ap50 = result.best_val_ap50
            run.history = result.history
            run.checkpoint_path = str(result.checkpoint_path or '')
            run.completado_at = timezone.now()
            run.save()
        return result
