from django.core.management.base import CommandError

from apps.evald.services.evaluation import REPORT_NAME, EvaluationService
from apps.training.models import TrainingRun

from ...base import CuneispotCommand


class Command(CuneispotCommand):
    help = 'Evalúa un checkpoint sobre la partición de prueba: AP@50/75/90 interpolado de 11 puntos'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('checkpoint', help='Archivo .cspt (o checkpoint oráculo)')
        parser.add_argument('--patches', required=True, help='patches.json o su directorio')
        parser.add_argument('--split', help='split.json; sin él se evalúan todos los parches')
        parser.add_argument('--split-name', default='test', choices=('train', 'val', 'test'))
        parser.add_argument('--pr-curve', action='store_true', help='Escribe pr_curve.csv')
        parser.add_argument('--overlays', action='store_true', help='Dibuja GT/TP/FP/FN por parche')
        parser.add_argument('--training-run', type=int, help='Id de TrainingRun a vincular')
        parser.add_argument('--no-record', action='store_true')

    def run(self, **options):
        config = self.load_config(options)
        out_dir = self.output_dir(options, config, 'eval')
        evaluation = config['evaluation']

        training_run = None
        if options.get('training_run') is not None:
            training_run = TrainingRun.objects.filter(pk=options['training_run']).first()
            if training_run is None:
                raise CommandError(f"No existe TrainingRun {options['training_run']}")

        report = EvaluationService.evaluate(
            options['checkpoint'], options['patches'],
            split_manifest_path=options.get('split'), split=options['split_name'],
            thresholds=evaluation['iou_thresholds'],
            score_floor=evaluation['score_floor'],
            nms_threshold=evaluation['nms_threshold'],
            out_dir=out_dir, pr_curve=options['pr_curve'], overlays=options['overlays'],
            overlay_score=evaluation['overlay_score'],
            resolved_config=config.data, record=not options['no_record'], training_run=training_run,
        )
        config.write(out_dir)

        for result in report.results:
            ap = 'n/a' if result.ap is None else f"{result.ap:.4f}"
            self.stdout.write(f"AP@{int(round(result.threshold * 100))}: {ap} "
                              f"(TP={result.tp} FP={result.fp} FN={result.fn})")
        self.stdout.write(self.style.SUCCESS(f"[OK] Reporte en {out_dir / REPORT_NAME}"))
