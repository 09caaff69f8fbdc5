from pathlib import Path

from django.core.management.base import CommandError

from apps.core.imaging import load_image, to_gray_uint8
from apps.core.utils import dump_json
from apps.datapipe.services.tiling import mean_pad_value
from apps.detector.services.inference import InferenceService

from ...base import CuneispotCommand

DETECTIONS_NAME = 'detections.json'


class Command(CuneispotCommand):
    help = 'Detecta signos en imágenes de segmentos completos (recorte + fusión de parches)'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('checkpoint', help='Archivo .cspt')
        parser.add_argument('images', nargs='+', help='Imágenes de segmentos')
        parser.add_argument('--photo', action='store_true',
                            help='Rellena los bordes con la media de la imagen en vez del fondo del render')
        parser.add_argument('--score', type=float, help='Puntaje mínimo (pisa evaluation.score_floor)')

    def config_overrides(self, options):
        return {'evaluation.score_floor': options.get('score')}

    def run(self, **options):
        config = self.load_config(options)
        out_dir = self.output_dir(options, config, 'detect')
        predictor = InferenceService.load_predictor(options['checkpoint'])
        tiling = config['tiling']
        InferenceService.check_window(predictor, tiling['window'])

        documents = []
        for name in options['images']:
            path = Path(name)
            try:
                image = to_gray_uint8(load_image(path))
            except OSError as e:
                raise CommandError(f"No se pudo leer {path}: {e}") from e
            background = mean_pad_value(image) if options['photo'] else config['rendering']['background_gray']
            detections = InferenceService.detect_segment(
                predictor, image, tiling['window'], tiling['stride'],
                score_threshold=config['evaluation']['score_floor'],
                nms_threshold=config['evaluation']['nms_threshold'],
                background=background,
            )
            height, width = image.shape
            documents.append(InferenceService.detections_document(path.name, width, height, detections))
            self.stdout.write(f"{path.name}: {len(detections)} detecciones")

        dump_json({'checkpoint': Path(options['checkpoint']).name, 'images': documents}, out_dir / DETECTIONS_NAME)
        config.write(out_dir)
        self.stdout.write(self.style.SUCCESS(f"[OK] {len(documents)} imágenes -> {out_dir / DETECTIONS_NAME}"))
