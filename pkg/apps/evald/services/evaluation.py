"""
Evaluación sobre parches de prueba: umbral de puntaje, NMS por parche y AP
interpolada de 11 puntos en IoU 0.5 / 0.75 / 0.9.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from apps.core.exceptions import DatasetError, EvaluationError
from apps.core.utils import config_hash, dump_json
from apps.datapipe.annotations import Patch, SplitManifest
from apps.datapipe.services.tiling import PatchIndex
from apps.detector.geometry import Detection
from apps.detector.services.inference import DEFAULT_SCORE_FLOOR, InferenceService

from ..metrics import DEFAULT_NMS_THRESHOLD, APResult, interpolated_ap
from ..models import EvaluationRecord
from ..overlays import write_overlays

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLDS = (0.5, 0.75, 0.9)
REPORT_NAME = 'report.json'
PR_CURVE_NAME = 'pr_curve.csv'

# Resultados publicados sobre parches recortados de 512 px, solo como referencia
REFERENCE_RESULTS = {
    'msii_to_msii': {'ap50': 0.602, 'ap75': 0.437},
    'complete_ia_to_mixed': {'ap50': 0.636},
    'complete_ia_to_vl': {'ap75': 0.545},
}


@dataclass
class EvalReport:
    results: List[APResult]
    dataset: Dict
    config_hash: str
    score_floor: float
    nms_threshold: float
    checkpoint: Dict = field(default_factory=dict)

    def ap(self, threshold: float) -> Optional[float]:
        for result in self.results:
            if abs(result.threshold - threshold) < 1e-9:
                return result.ap
        return None

    def as_dict(self) -> Dict:
        return {
            'results': [result.as_dict() for result in self.results],
            'dataset': self.dataset,
            'config_hash': self.config_hash,
            'score_floor': self.score_floor,
            'nms_threshold': self.nms_threshold,
            'checkpoint': self.checkpoint,
            'reference': REFERENCE_RESULTS,
        }


def evaluate_patches(predictor, patches: Sequence[Patch], thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
                     score_floor: float = DEFAULT_SCORE_FLOOR,
                     nms_threshold: float = DEFAULT_NMS_THRESHOLD) -> Tuple[List[APResult], List[List[Detection]]]:
    detections = predictor.predict_patches(patches, score_threshold=score_floor, nms_threshold=nms_threshold)
    gt = [patch.boxes for patch in patches]
    results = [interpolated_ap(detections, gt, threshold) for threshold in thresholds]
    return results, detections


def write_pr_curve(results: Sequence[APResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['threshold', 'rank', 'score', 'recall', 'precision'])
        for result in results:
            for rank, (score, recall, precision) in enumerate(zip(result.scores, result.recall, result.precision), 1):
                writer.writerow([result.threshold, rank, f"{score:.6f}", f"{recall:.6f}", f"{precision:.6f}"])
    return path


class EvaluationService:

    @staticmethod
    def load_test_patches(index: PatchIndex, manifest: Optional[SplitManifest] = None,
                          split: str = 'test') -> Tuple[List[Patch], List[str]]:
        """Parches de la partición pedida; las imágenes ausentes se listan y se omiten."""
        segment_ids = manifest.segments(split) if manifest is not None else None
        patches, missing = [], []
        for entry in index.select(segment_ids):
            if not (index.root / entry['file']).exists():
                missing.append(entry['file'])
                continue
            patches.append(index.load_patch(entry))
        if missing:
            logger.warning(f"{len(missing)} imágenes de prueba no existen y se omiten")
        return patches, missing

    @staticmethod
    def evaluate(checkpoint_path, patch_index_path, split_manifest_path=None, split: str = 'test',
                 thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
                 score_floor: float = DEFAULT_SCORE_FLOOR,
                 nms_threshold: float = DEFAULT_NMS_THRESHOLD,
                 out_dir=None, pr_curve: bool = False, overlays: bool = False, overlay_score: float = 0.5,
                 resolved_config: Dict = None, record: bool = False, training_run=None) -> EvalReport:
        predictor = InferenceService.load_predictor(checkpoint_path)
        try:
            index = PatchIndex.load(patch_index_path)
            manifest = SplitManifest.load(split_manifest_path) if split_manifest_path else None
        except DatasetError as e:
            raise EvaluationError(str(e)) from e
        InferenceService.check_window(predictor, index.window)

        patches, missing = EvaluationService.load_test_patches(index, manifest, split)
        if not patches:
            raise EvaluationError(f"No hay parches de prueba en {patch_index_path} (partición {split})")

        results, detections = evaluate_patches(predictor, patches, thresholds, score_floor, nms_threshold)
        report = EvalReport(
            results=results,
            dataset={
                'patch_index': Path(patch_index_path).name,
                'split': split if manifest else None,
                'segments': len({patch.segment_id for patch in patches}),
                'patches': len(patches),
                'gt_boxes': sum(len(patch.boxes) for patch in patches),
                'missing': sorted(missing),
            },
            config_hash=config_hash(resolved_config or {'thresholds': list(thresholds), 'score_floor': score_floor,
                                                        'nms_threshold': nms_threshold}),
            score_floor=score_floor,
            nms_threshold=nms_threshold,
            checkpoint={'file': Path(checkpoint_path).name, 'kind': predictor.metadata.get('kind', 'detector')},
        )
        summary = ', '.join(f"AP@{int(r.threshold * 100)}={r.ap if r.ap is None else round(r.ap, 4)}" for r in results)
        logger.info(f"Evaluación de {len(patches)} parches: {summary}")

        if out_dir is not None:
            out_dir = Path(out_dir)
            dump_json(report.as_dict(), out_dir / REPORT_NAME)
            if pr_curve:
                write_pr_curve(results, out_dir / PR_CURVE_NAME)
            if overlays:
                write_overlays(patches, detections, out_dir / 'overlays', min_score=overlay_score)

        if record:
            EvaluationRecord.objects.create(
                training_run=training_run,
                checkpoint_path=str(checkpoint_path),
                test_descriptor=report.dataset,
                ap50=report.ap(0.5),
                ap75=report.ap(0.75),
                ap90=report.ap(0.9),
                report=report.as_dict(),
            )
        return report
