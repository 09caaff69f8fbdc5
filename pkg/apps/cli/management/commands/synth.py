import re

from django.core.management.base import CommandError

from apps.datapipe.services.synth import SynthService, SynthSettings

from ...base import CuneispotCommand


def parse_range(value: str):
    """'3..8' -> (3, 8); '5' -> (5, 5)."""
    match = re.fullmatch(r'\s*(\d+)\s*(?:\.\.\s*(\d+))?\s*', value)
    if not match:
        raise CommandError(f"Rango inválido '{value}' (use N o A..B)")
    low = int(match.group(1))
    return low, int(match.group(2) or low)


class Command(CuneispotCommand):
    help = 'Genera tablillas sintéticas con cuñas, sus anotaciones y renders VL'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--segments', type=int, required=True)
        parser.add_argument('--wedges', default='3..8', help='Cuñas por segmento, N o A..B')
        parser.add_argument('--no-render', action='store_true')

    def run(self, **options):
        config = self.load_config(options)
        out_dir = self.output_dir(options, config, 'synth')
        settings = SynthSettings(render=config.render_config(), light=config.light())

        summary = SynthService.generate_dataset(
            out_dir, options['segments'], parse_range(options['wedges']), seed=config['seed'],
            settings=settings, render=not options['no_render'], workers=config['workers'],
        )
        config.write(out_dir)
        self.stdout.write(self.style.SUCCESS(f"[OK] {summary['segments']} segmentos sintéticos en {out_dir}"))
