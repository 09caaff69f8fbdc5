from pathlib import Path

from django.core.management.base import CommandError

from apps.meshlight.services.rendering import RENDER_TYPES, RenderingService

from ...base import CuneispotCommand


class Command(CuneispotCommand):
    help = 'Renderiza un directorio de mallas PLY/OBJ (VL, MSII o mixto) y escribe manifest.json'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('meshes', help='Directorio de mallas')
        parser.add_argument('--type', dest='render_type', choices=RENDER_TYPES, default='vl')
        parser.add_argument('--ia', action='store_true', default=None,
                            help='Aumento por iluminación: una imagen por azimut configurado')

    def config_overrides(self, options):
        return {'augmentation.enabled': options.get('ia')}

    def run(self, **options):
        config = self.load_config(options)
        out_dir = self.output_dir(options, config, f"renders/{options['render_type']}")
        settings = config.render_settings(options['render_type'])

        self.stdout.write(f"Renderizando {options['meshes']} ({settings.render_type}, IA={settings.ia})...")
        manifest = RenderingService.render_directory(Path(options['meshes']), out_dir, settings,
                                                     workers=config['workers'])
        config.write(out_dir)

        self.stdout.write(self.style.SUCCESS(f"[OK] {len(manifest['images'])} imágenes en {out_dir}"))
        if manifest['failures']:
            names = ', '.join(failure['mesh'] for failure in manifest['failures'])
            raise CommandError(f"{len(manifest['failures'])} mallas fallaron: {names}")
