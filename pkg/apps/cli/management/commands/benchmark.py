from apps.training.services.experiments import (
    BENCHMARK_NAME, IA_COMPARE_NAME, TEST_TARGETS, TRAIN_SOURCES, ExperimentService,
)

from ...base import CuneispotCommand


class Command(CuneispotCommand):
    help = 'Matriz entrenamiento×prueba por fuente de render sobre datos sintéticos, o comparación con/sin IA'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--synth', required=True, help='Directorio escrito por el comando synth')
        parser.add_argument('--sources', nargs='+', choices=sorted(TRAIN_SOURCES))
        parser.add_argument('--targets', nargs='+', choices=TEST_TARGETS)
        parser.add_argument('--ia-compare', action='store_true',
                            help='AP@75 media con y sin aumento por iluminación, mismo presupuesto de pasos')
        parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
        parser.add_argument('--preset', choices=('toy', 'full'))
        parser.add_argument('--epochs', type=int)

    def config_overrides(self, options):
        return {'detector.preset': options.get('preset'), 'training.epochs': options.get('epochs')}

    def run(self, **options):
        config = self.load_config(options)
        out_dir = self.output_dir(options, config, 'benchmark')
        config.write(out_dir)
        common = dict(
            cfg=config.detector_config(),
            weights=config.loss_weights(),
            train_settings=config.train_settings(),
            settings=config.experiment_settings(),
        )

        if options['ia_compare']:
            document = ExperimentService.ia_compare(options['synth'], out_dir, seeds=options['seeds'], **common)
            means = document['mean_ap75']
            self.stdout.write(f"AP@75 medio: sin IA {means['without_ia']:.4f}, con IA {means['with_ia']:.4f}")
            style = self.style.SUCCESS if document['ia_not_worse'] else self.style.WARNING
            self.stdout.write(style(f"[OK] {out_dir / IA_COMPARE_NAME}"))
            return

        document = ExperimentService.benchmark(options['synth'], out_dir, sources=options.get('sources'),
                                               targets=options.get('targets') or TEST_TARGETS, **common)
        for source, row in document['table'].items():
            cells = ', '.join(f"{target}={values['ap50'] if values['ap50'] is None else round(values['ap50'], 3)}"
                              for target, values in row['test'].items())
            self.stdout.write(f"{source}: {cells}")
        self.stdout.write(self.style.SUCCESS(f"[OK] {out_dir / BENCHMARK_NAME}"))
