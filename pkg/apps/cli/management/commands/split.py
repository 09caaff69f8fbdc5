from pathlib import Path

from django.core.management.base import CommandError

from apps.datapipe.annotations import load_annotation_dir
from apps.datapipe.services.splits import split_segments
from apps.datapipe.services.tiling import PatchIndex

from ...base import CuneispotCommand

SPLIT_NAME = 'split.json'


class Command(CuneispotCommand):
    help = 'Particiona segmentos en train/val/test (2:1:1 por defecto) de forma determinista'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        source = parser.add_mutually_exclusive_group()
        source.add_argument('--annotations', help='Directorio de anotaciones')
        source.add_argument('--patches', help='patches.json (o su directorio)')
        parser.add_argument('--ratio', type=float, nargs=3, metavar=('TRAIN', 'VAL', 'TEST'))

    def config_overrides(self, options):
        return {'split.ratio': options.get('ratio'), 'split.seed': options.get('seed')}

    def run(self, **options):
        config = self.load_config(options)
        if options.get('annotations'):
            segment_ids = list(load_annotation_dir(options['annotations']))
        elif options.get('patches'):
            segment_ids = PatchIndex.load(options['patches']).segment_ids()
        else:
            raise CommandError('Indique --annotations o --patches')

        split = config['split']
        manifest = split_segments(segment_ids, split['ratio'], split['seed'])
        out_dir = self.output_dir(options, config, 'split')
        manifest.save(Path(out_dir) / SPLIT_NAME)
        config.write(out_dir)

        train, val, test = manifest.counts()
        self.stdout.write(self.style.SUCCESS(f"[OK] train={train} val={val} test={test} -> {out_dir / SPLIT_NAME}"))
