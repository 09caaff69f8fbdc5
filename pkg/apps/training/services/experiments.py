"""
Experimentos sobre el conjunto sintético: matriz de fuentes de render
(entrenamiento × prueba) y comparación con/sin aumento por iluminación.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from apps.core.exceptions import ConfigError
from apps.core.utils import dump_json, log_duration
from apps.datapipe.annotations import Patch, SplitManifest, load_annotation_dir
from apps.datapipe.services.photo import PhotoService, PhotoSettings
from apps.datapipe.services.splits import split_segments
from apps.datapipe.services.tiling import (
    DEFAULT_KEEP_FRACTION, DEFAULT_STRIDE, DEFAULT_WINDOW, PatchIndex, TilingService,
)
from apps.detector.config import DetectorConfig
from apps.detector.services.inference import DetectorPredictor
from apps.evald.services.evaluation import REFERENCE_RESULTS, evaluate_patches
from apps.meshlight.raster import DEFAULT_AZIMUTHS, LightSpec, RenderConfig
from apps.meshlight.services.rendering import MANIFEST_NAME, RenderingService, RenderSettings

from ..assignment import LossWeights
from .training import TrainSettings, train_loop

logger = logging.getLogger(__name__)

BENCHMARK_NAME = 'benchmark.json'
IA_COMPARE_NAME = 'ia_compare.json'

# variante de render -> (tipo, con aumento por iluminación)
RENDER_VARIANTS = {
    'vl': ('vl', False),
    'vl_ia': ('vl', True),
    'msii': ('msii', False),
    'mixed': ('mixed', False),
    'mixed_ia': ('mixed', True),
}
# fotos sintéticas derivadas de los renders VL
PHOTO_VARIANT = 'photo'
VARIANTS = (*RENDER_VARIANTS, PHOTO_VARIANT)

TRAIN_SOURCES = {
    'photo': ('photo',),
    'vl': ('vl',),
    'msii': ('msii',),
    'mixed': ('mixed',),
    'complete': ('photo', 'vl', 'msii', 'mixed'),
    'vl_ia': ('vl_ia',),
    'complete_ia': ('photo', 'vl_ia', 'msii', 'mixed_ia'),
}
TEST_TARGETS = ('photo', 'vl', 'msii', 'mixed')


@dataclass(frozen=True)
class ExperimentSettings:
    render: RenderConfig = field(default_factory=RenderConfig)
    light: LightSpec = field(default_factory=lambda: LightSpec(azimuth_deg=135.0, polar_deg=45.0))
    azimuths: Tuple[float, ...] = DEFAULT_AZIMUTHS
    ia_polar: float = 45.0
    window: int = DEFAULT_WINDOW
    stride: int = DEFAULT_STRIDE
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    split_ratio: Tuple[float, ...] = (2, 1, 1)
    split_seed: int = 0
    photo: PhotoSettings = field(default_factory=PhotoSettings)
    workers: int = 1


def render_variant(synth_dir: Path, work_dir: Path, variant: str, settings: ExperimentSettings) -> Path:
    """Renderiza una variante si aún no está; devuelve la ruta de su manifiesto."""
    render_type, ia = RENDER_VARIANTS[variant]
    render_dir = work_dir / 'renders' / variant
    if not (render_dir / MANIFEST_NAME).exists():
        render_settings = RenderSettings(render_type=render_type, config=settings.render, light=settings.light,
                                         sides=('front',), ia=ia, azimuths=tuple(settings.azimuths),
                                         ia_polar=settings.ia_polar)
        RenderingService.render_directory(synth_dir / 'meshes', render_dir, render_settings, settings.workers)
    return render_dir / MANIFEST_NAME


def prepare_variants(synth_dir, work_dir, variants: Sequence[str], settings: ExperimentSettings) -> Dict[str, PatchIndex]:
    """
    Renderiza y recorta cada variante pedida; devuelve su índice de parches.

    La variante `photo` sale de los renders VL sin aumento.
    """
    synth_dir, work_dir = Path(synth_dir), Path(work_dir)
    annotations = load_annotation_dir(synth_dir / 'annotations')
    tiling = dict(window=settings.window, stride=settings.stride, keep_fraction=settings.keep_fraction,
                  background=settings.render.background_gray, workers=settings.workers)
    indices = {}
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"Variante de render desconocida '{variant}'")
        with log_duration(f"Variante {variant}", logger):
            if variant == PHOTO_VARIANT:
                manifest_path = render_variant(synth_dir, work_dir, 'vl', settings)
                photo_dir = work_dir / 'photos'
                photos = PhotoService.photo_directory(annotations, manifest_path, photo_dir, settings.photo)
                TilingService.tile_dataset(photos, work_dir / 'patches' / variant, data_root=photo_dir, **tiling)
            else:
                manifest_path = render_variant(synth_dir, work_dir, variant, settings)
                TilingService.tile_dataset(annotations, work_dir / 'patches' / variant,
                                           manifest_path=manifest_path, **tiling)
        indices[variant] = PatchIndex.load(work_dir / 'patches' / variant)
    return indices


def pooled_patches(indices: Dict[str, PatchIndex], variants: Sequence[str], segment_ids: Sequence[str]) -> List[Patch]:
    patches = []
    for variant in variants:
        patches.extend(indices[variant].patches(segment_ids))
    return patches


def split_for(indices: Dict[str, PatchIndex], settings: ExperimentSettings) -> SplitManifest:
    segment_ids = sorted({sid for index in indices.values() for sid in index.segment_ids()})
    return split_segments(segment_ids, settings.split_ratio, settings.split_seed)


def ap_row(predictor, patches: Sequence[Patch], train_settings: TrainSettings) -> Dict[str, float]:
    results, _ = evaluate_patches(predictor, patches, score_floor=train_settings.score_floor,
                                  nms_threshold=train_settings.nms_threshold)
    return {f"ap{int(round(r.threshold * 100))}": r.ap for r in results}


def batches_per_epoch(count: int, batch_size: int) -> int:
    return max(1, math.ceil(count / batch_size))


class ExperimentService:

    @staticmethod
    def benchmark(synth_dir, out_dir, cfg: DetectorConfig, weights: LossWeights, train_settings: TrainSettings,
                  settings: ExperimentSettings = None, sources: Sequence[str] = None,
                  targets: Sequence[str] = TEST_TARGETS) -> Dict:
        """
        Entrena una vez por fuente y evalúa cada modelo en la partición de prueba
        de cada objetivo. La validación usa las mismas variantes que el entrenamiento.
        """
        settings = settings or ExperimentSettings()
        sources = list(sources or TRAIN_SOURCES)
        unknown = [name for name in list(sources) if name not in TRAIN_SOURCES]
        unknown += [name for name in targets if name not in VARIANTS]
        if unknown:
            raise ConfigError(f"Fuentes u objetivos desconocidos: {unknown}")
        out_dir = Path(out_dir)

        needed = sorted({v for source in sources for v in TRAIN_SOURCES[source]} | set(targets))
        indices = prepare_variants(synth_dir, out_dir, needed, settings)
        manifest = split_for(indices, settings)
        manifest.save(out_dir / 'split.json')

        table = {}
        for source in sources:
            variants = TRAIN_SOURCES[source]
            with log_duration(f"Entrenamiento {source}", logger):
                result = train_loop(
                    pooled_patches(indices, variants, manifest.segments('train')),
                    pooled_patches(indices, variants, manifest.segments('val')),
                    cfg, weights, train_settings, out_dir / 'runs' / source,
                )
            predictor = DetectorPredictor(result.detector)
            table[source] = {
                'best_epoch': result.best_epoch,
                'best_val_ap50': result.best_val_ap50,
                'test': {
                    target: ap_row(predictor, pooled_patches(indices, [target], manifest.segments('test')),
                                   train_settings)
                    for target in targets
                },
            }
            logger.info(f"{source}: " + ', '.join(f"{t}={row['ap50']}" for t, row in table[source]['test'].items()))

        document = {
            'sources': sources,
            'targets': list(targets),
            'split': dict(zip(('train', 'val', 'test'), manifest.counts())),
            'table': table,
            'reference': REFERENCE_RESULTS,
        }
        dump_json(document, out_dir / BENCHMARK_NAME)
        return document

    @staticmethod
    def ia_compare(synth_dir, out_dir, cfg: DetectorConfig, weights: LossWeights, train_settings: TrainSettings,
                   seeds: Sequence[int] = (0, 1, 2), settings: ExperimentSettings = None) -> Dict:
        """
        AP@75 media sobre semillas con y sin aumento por iluminación, con el
        mismo presupuesto de pasos de SGD. Valida y prueba sobre renders VL sin aumento.
        """
        settings = settings or ExperimentSettings()
        out_dir = Path(out_dir)
        indices = prepare_variants(synth_dir, out_dir, ('vl', 'vl_ia'), settings)
        manifest = split_for(indices, settings)
        manifest.save(out_dir / 'split.json')

        val = pooled_patches(indices, ['vl'], manifest.segments('val'))
        test = pooled_patches(indices, ['vl'], manifest.segments('test'))
        train = {
            'without_ia': pooled_patches(indices, ['vl'], manifest.segments('train')),
            'with_ia': pooled_patches(indices, ['vl_ia'], manifest.segments('train')),
        }
        budget = train_settings.epochs * batches_per_epoch(len(train['without_ia']), train_settings.batch_size)
        per_epoch = {name: batches_per_epoch(len(patches), train_settings.batch_size) for name, patches in train.items()}
        epochs = {
            'without_ia': train_settings.epochs,
            'with_ia': max(1, round(budget / per_epoch['with_ia'])),
        }
        steps = {name: epochs[name] * per_epoch[name] for name in train}
        logger.info(f"Presupuesto de {budget} pasos: " + ', '.join(f"{name}={count}" for name, count in steps.items()))

        runs = {name: [] for name in train}
        for seed in seeds:
            for name, patches in train.items():
                run_settings = replace(train_settings, seed=seed, epochs=epochs[name])
                result = train_loop(patches, val, replace(cfg, seed=seed), weights, run_settings,
                                    out_dir / 'runs' / f"{name}_seed{seed}")
                row = ap_row(DetectorPredictor(result.detector), test, run_settings)
                runs[name].append({'seed': seed, 'epochs': epochs[name], 'steps': steps[name], **row})
                logger.info(f"IA {name} seed={seed}: AP@75={row['ap75']}")

        means = {name: float(np.mean([r['ap75'] or 0.0 for r in rows])) for name, rows in runs.items()}
        document = {
            'seeds': list(seeds),
            'step_budget': budget,
            'steps': steps,
            'runs': runs,
            'mean_ap75': means,
            'ia_not_worse': means['with_ia'] >= means['without_ia'],
        }
        dump_json(document, out_dir / IA_COMPARE_NAME)
        return document
