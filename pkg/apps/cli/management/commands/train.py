from pathlib import Path

from django.core.management.base import CommandError

from apps.datapipe.annotations import SplitManifest
from apps.datapipe.services.splits import split_segments
from apps.datapipe.services.tiling import PatchIndex
from apps.training.services.training import TrainingService

from ...base import CuneispotCommand


def load_indices(paths):
    indices = [PatchIndex.load(path) for path in paths]
    windows = {index.window for index in indices}
    if len(windows) != 1:
        raise CommandError(f"Los índices de parches mezclan ventanas distintas: {sorted(windows)}")
    return indices


def pooled(indices, segment_ids):
    return [patch for index in indices for patch in index.patches(segment_ids)]


class Command(CuneispotCommand):
    help = 'Entrena el detector RepPoints sobre uno o más índices de parches'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--patches', action='append', required=True,
                            help='patches.json o su directorio (repetible para combinar fuentes)')
        parser.add_argument('--split', help='split.json; si falta se calcula con split.ratio/split.seed')
        parser.add_argument('--val-patches', action='append',
                            help='Índices distintos para validación (p. ej. renders sin aumento)')
        parser.add_argument('--preset', choices=('toy', 'full'))
        parser.add_argument('--assignment-mode', choices=('paper-literal', 'paper_literal', 'standard'))
        parser.add_argument('--epochs', type=int)
        parser.add_argument('--batch-size', type=int)
        parser.add_argument('--precision', type=int, choices=(32, 64))
        parser.add_argument('--no-record', action='store_true', help='No registra la corrida en la base de datos')

    def config_overrides(self, options):
        return {
            'detector.preset': options.get('preset'),
            'loss.assignment_mode': options.get('assignment_mode'),
            'training.epochs': options.get('epochs'),
            'training.batch_size': options.get('batch_size'),
            'training.precision': options.get('precision'),
        }

    def run(self, **options):
        config = self.load_config(options)
        out_dir = self.output_dir(options, config, 'train')

        train_indices = load_indices(options['patches'])
        val_indices = load_indices(options['val_patches']) if options.get('val_patches') else train_indices
        window = train_indices[0].window
        if val_indices[0].window != window:
            raise CommandError('Entrenamiento y validación usan ventanas distintas')

        if options.get('split'):
            manifest = SplitManifest.load(options['split'])
        else:
            segment_ids = sorted({sid for index in train_indices for sid in index.segment_ids()})
            manifest = split_segments(segment_ids, config['split']['ratio'], config['split']['seed'])
            manifest.save(Path(out_dir) / 'split.json')

        train_patches = pooled(train_indices, manifest.segments('train'))
        val_patches = pooled(val_indices, manifest.segments('val'))
        self.stdout.write(f"Entrenando con {len(train_patches)} parches ({len(val_patches)} de validación)...")

        config.write(out_dir)
        result = TrainingService.run(
            train_patches, val_patches,
            config.detector_config(input_size=window), config.loss_weights(), config.train_settings(),
            out_dir, record=not options['no_record'], resolved_config=config.data,
        )

        if result.best_epoch is None:
            self.stdout.write(self.style.WARNING("[INFO] Sin épocas: se guardan los pesos iniciales"))
        else:
            self.stdout.write(self.style.SUCCESS(
                f"[OK] Mejor época {result.best_epoch} con AP@50 de validación {result.best_val_ap50:.4f}"
            ))
        if result.checkpoint_path:
            self.stdout.write(f"Checkpoint: {result.checkpoint_path}")
