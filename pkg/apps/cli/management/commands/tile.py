from django.core.management.base import CommandError

from apps.datapipe.annotations import load_annotation_dir
from apps.datapipe.services.tiling import TilingService

from ...base import CuneispotCommand


class Command(CuneispotCommand):
    help = 'Recorta imágenes anotadas en parches de 512x512 con paso 256 y escribe patches.json'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--annotations', required=True, help='Directorio de anotaciones JSON')
        parser.add_argument('--manifest', help='manifest.json de un render; si falta se usan las imágenes anotadas')
        parser.add_argument('--data-root', help='Raíz contra la que se resuelven las rutas de imagen')
        parser.add_argument('--window', type=int)
        parser.add_argument('--stride', type=int)

    def config_overrides(self, options):
        return {
            'paths.data_root': options.get('data_root'),
            'tiling.window': options.get('window'),
            'tiling.stride': options.get('stride'),
        }

    def run(self, **options):
        config = self.load_config(options)
        out_dir = self.output_dir(options, config, 'patches')
        annotations = load_annotation_dir(options['annotations'])

        index = TilingService.tile_dataset(
            annotations, out_dir,
            data_root=config['paths']['data_root'],
            manifest_path=options.get('manifest'),
            workers=config['workers'],
            **config.tiling_params(),
        )
        config.write(out_dir)

        self.stdout.write(self.style.SUCCESS(f"[OK] {len(index['patches'])} parches en {out_dir}"))
        if index['failures']:
            names = ', '.join(failure['image'] for failure in index['failures'])
            raise CommandError(f"{len(index['failures'])} imágenes fallaron: {names}")
