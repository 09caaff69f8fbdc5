from apps.datapipe.serializers import SOURCE_TYPES
from apps.datapipe.services.converters import import_coco

from ...base import CuneispotCommand


class Command(CuneispotCommand):
    help = 'Convierte un JSON estilo COCO en un documento de anotación por segmento'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('coco', help='Archivo COCO')
        parser.add_argument('--source-type', choices=SOURCE_TYPES, default='photo')
        parser.add_argument('--image-prefix', default='', help='Prefijo de ruta relativo a la raíz de datos')

    def run(self, **options):
        config = self.load_config(options)
        out_dir = self.output_dir(options, config, 'annotations')
        written = import_coco(options['coco'], out_dir, options['source_type'], options['image_prefix'])
        self.stdout.write(self.style.SUCCESS(f"[OK] {len(written)} anotaciones en {out_dir}"))
