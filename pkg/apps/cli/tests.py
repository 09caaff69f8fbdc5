import json
import os
import tempfile
import unittest
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from apps.core.exceptions import ConfigError
from apps.core.imaging import save_png
from apps.core.utils import load_json
from apps.datapipe.annotations import AnnotationSet, BBox
from apps.detector.config import DetectorConfig
from apps.detector.network import build_detector
from apps.detector.services.inference import InferenceService
from apps.evald.models import EvaluationRecord
from apps.meshlight.mesh import save_ply
from apps.meshlight.primitives import disc, uv_sphere
from apps.training.models import TrainingRun

from .config import RESOLVED_CONFIG_NAME, RunConfig
from .management.commands.synth import parse_range

SLOW_TESTS = os.environ.get('CUNEISPOT_SLOW_TESTS', '').lower() in ('1', 'true', 'yes')

SMALL_CONFIG = {
    'rendering': {'width': 32, 'height': 32, 'curvature_radii': [1.0]},
    'tiling': {'window': 64, 'stride': 32},
    'detector': {'head_channels': 8},
    'training': {'epochs': 1, 'batch_size': 2},
}


class RunConfigTest(SimpleTestCase):

    def test_defaults(self):
        config = RunConfig.from_dict({})
        self.assertEqual(config['detector']['preset'], 'toy')
        self.assertEqual(config['tiling'], {'window': 512, 'stride': 256, 'keep_fraction': 0.5})
        self.assertEqual(config['augmentation']['azimuths'], [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0])
        self.assertEqual(config['evaluation']['iou_thresholds'], [0.5, 0.75, 0.9])
        self.assertEqual(config.loss_weights().lambda_loc2, 100.0)
        self.assertEqual(config.detector_config().input_size, 512)

    def test_training_defaults_follow_the_preset(self):
        toy = RunConfig.from_dict({})['training']
        full = RunConfig.from_dict({'detector': {'preset': 'full'}})['training']
        self.assertEqual((toy['epochs'], toy['batch_size']), (30, 2))
        self.assertEqual((full['epochs'], full['batch_size']), (60, 8))
        full = RunConfig.from_dict({'detector': {'preset': 'full'}, 'training': {'epochs': 3}})
        self.assertEqual(full.train_settings().epochs, 3)

    def test_unknown_keys_are_rejected(self):
        with self.assertRaisesMessage(ConfigError, 'colour'):
            RunConfig.from_dict({'colour': 1})
        with self.assertRaisesMessage(ConfigError, 'lr'):
            RunConfig.from_dict({'optimizer': {'lr': 0.1}})

    def test_invalid_values(self):
        for data in ({'loss': {'theta_tp': 0.5, 'theta_fp': 0.6}}, {'training': {'precision': 16}},
                     {'detector': {'preset': 'huge'}}, {'loss': {'assignment_mode': 'greedy'}},
                     {'split': {'ratio': [1, 1]}}):
            with self.subTest(data=data), self.assertRaises(ConfigError):
                RunConfig.from_dict(data)

    def test_overrides_win_over_file_values(self):
        config = RunConfig.from_dict({'training': {'epochs': 5}, 'seed': 1},
                                     {'training.epochs': 2, 'seed': None, 'loss.assignment_mode': 'paper-literal'})
        self.assertEqual(config['training']['epochs'], 2)
        self.assertEqual(config['seed'], 1)
        self.assertEqual(config.loss_weights().assignment_mode, 'paper_literal')

    def test_domain_objects(self):
        config = RunConfig.from_dict(SMALL_CONFIG, {'seed': 3})
        self.assertEqual(config.detector_config(), DetectorConfig(input_size=64, head_channels=8, seed=3))
        self.assertEqual(config.train_settings().batch_size, 2)
        self.assertEqual(config.render_settings('msii', ia=True).lights()[0].azimuth_deg, 0.0)
        self.assertEqual(config.tiling_params()['background'], 0)

    def test_load_and_write(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.json'
            path.write_text(json.dumps(SMALL_CONFIG))
            config = RunConfig.load(path)
            written = config.write(Path(tmp) / 'out')
            self.assertEqual(RunConfig.load(written).data, config.data)
            path.write_text('{not json')
            with self.assertRaises(ConfigError):
                RunConfig.load(path)
            with self.assertRaises(ConfigError):
                RunConfig.load(Path(tmp) / 'missing.json')


def write_segments(root: Path, count=4, size=64):
    """Segmentos de una sola ventana con dos cuadrados claros cada uno."""
    for index in range(count):
        pixels = np.full((size, size), 30, dtype=np.uint8)
        boxes = [BBox(8, 8, 24, 24), BBox(36 + index % 3, 32, 52 + index % 3, 48)]
        for box in boxes:
            x0, y0, x1, y1 = (int(v) for v in box.as_tuple())
            pixels[y0:y1, x0:x1] = 230
        save_png(pixels, root / 'images' / f"seg{index}.png")
        AnnotationSet(f"seg{index}", 'front', f"images/seg{index}.png", size, size, 'vl', boxes) \
            .save(root / 'annotations' / f"seg{index}.json")


class CommandTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = self.root / 'run.json'
        self.config.write_text(json.dumps(SMALL_CONFIG))

    def tearDown(self):
        self.tmp.cleanup()

    def call(self, name, *args, **options):
        out = StringIO()
        options.setdefault('config', str(self.config))
        call_command(name, *args, stdout=out, **options)
        return out.getvalue()

    def tile_fixture(self):
        write_segments(self.root)
        self.call('tile', annotations=str(self.root / 'annotations'), data_root=str(self.root),
                  out=str(self.root / 'patches'))
        return self.root / 'patches'


class RenderCommandTest(CommandTestCase):

    def test_ia_render_counts_and_config(self):
        meshes = self.root / 'meshes'
        save_ply(disc(4.0, 16, 2), meshes / 'a.ply')
        save_ply(uv_sphere(2.0, 8, 16), meshes / 'b.ply')
        output = self.call('render', str(meshes), render_type='vl', ia=True, out=str(self.root / 'renders'))
        manifest = load_json(self.root / 'renders' / 'manifest.json')
        self.assertEqual(len(manifest['images']), 2 * 2 * 8)
        self.assertIn('32 imágenes', output)
        resolved = load_json(self.root / 'renders' / RESOLVED_CONFIG_NAME)
        self.assertTrue(resolved['augmentation']['enabled'])

    def test_empty_directory_fails(self):
        (self.root / 'empty').mkdir()
        with self.assertRaises(CommandError):
            self.call('render', str(self.root / 'empty'), out=str(self.root / 'renders'))


    def test_partial_failure_exits_non_zero(self):
        meshes = self.root / 'meshes'
        save_ply(disc(4.0, 16, 2), meshes / 'a.ply')
        (meshes / 'broken.ply').write_bytes(b'not a mesh')
        with self.assertRaisesMessage(CommandError, 'broken.ply'):
            self.call('render', str(meshes), out=str(self.root / 'renders'))
        manifest = load_json(self.root / 'renders' / 'manifest.json')
        self.assertEqual(len(manifest['images']), 2)
        self.assertEqual([failure['mesh'] for failure in manifest['failures']], ['broken.ply'])


class DatasetCommandsTest(CommandTestCase):

    def test_corrupt_image_fails_the_command(self):
        write_segments(self.root)
        (self.root / 'images' / 'seg1.png').write_bytes(b'garbage')
        with self.assertRaisesMessage(CommandError, 'seg1.png'):
            self.call('tile', annotations=str(self.root / 'annotations'), data_root=str(self.root),
                      out=str(self.root / 'patches'))
        index = load_json(self.root / 'patches' / 'patches.json')
        self.assertEqual(len(index['patches']), 3)
        self.assertEqual([failure['image'] for failure in index['failures']], ['seg1.png'])

    def test_tile_large_image(self):
        save_png(np.zeros((768, 1024), dtype=np.uint8), self.root / 'images' / 'big.png')
        AnnotationSet('big', 'front', 'images/big.png', 1024, 768, 'vl', [BBox(10, 10, 40, 40)]) \
            .save(self.root / 'annotations' / 'big.json')
        self.call('tile', annotations=str(self.root / 'annotations'), data_root=str(self.root),
                  window=512, stride=256, out=str(self.root / 'patches'))
        index = load_json(self.root / 'patches' / 'patches.json')
        self.assertEqual(len(index['patches']), 6)
        self.assertEqual(sorted({tuple(p['origin']) for p in index['patches']}),
                         [(0, 0), (0, 256), (256, 0), (256, 256), (512, 0), (512, 256)])

    def test_split_is_reproducible(self):
        patches = self.tile_fixture()
        for name in ('a', 'b'):
            self.call('split', patches=str(patches), seed=7, out=str(self.root / name))
        first = (self.root / 'a' / 'split.json').read_bytes()
        self.assertEqual(first, (self.root / 'b' / 'split.json').read_bytes())
        manifest = load_json(self.root / 'a' / 'split.json')
        self.assertEqual(manifest['seed'], 7)
        self.assertEqual(sorted(manifest['assignments'].values()), ['test', 'train', 'train', 'val'])

    def test_split_needs_a_source(self):
        with self.assertRaises(CommandError):
            self.call('split', out=str(self.root / 'split'))

    def test_synth_box_counts(self):
        self.config.write_text('{}')
        self.call('synth', segments=5, wedges='3..8', no_render=True, out=str(self.root / 'synth'))
        documents = sorted((self.root / 'synth' / 'annotations').glob('*.json'))
        self.assertEqual(len(documents), 5)
        for path in documents:
            self.assertTrue(3 <= len(load_json(path)['boxes']) <= 8)
        self.assertFalse((self.root / 'synth' / 'renders').exists())

    def test_parse_range(self):
        self.assertEqual(parse_range('3..8'), (3, 8))
        self.assertEqual(parse_range('5'), (5, 5))
        with self.assertRaises(CommandError):
            parse_range('3-8')

    def test_import_coco(self):
        coco = {
            'images': [{'id': 1, 'file_name': 'tab_front.png', 'width': 100, 'height': 80}],
            'annotations': [{'id': 1, 'image_id': 1, 'bbox': [10, 10, 20, 30]}],
        }
        path = self.root / 'coco.json'
        path.write_text(json.dumps(coco))
        self.call('import_coco', str(path), out=str(self.root / 'annotations'))
        document = load_json(self.root / 'annotations' / 'tab_front.json')
        self.assertEqual(document['boxes'], [{'x_min': 10.0, 'y_min': 10.0, 'x_max': 30.0, 'y_max': 40.0}])


class ModelCommandsTest(CommandTestCase):

    def test_eval_with_oracle_checkpoint(self):
        patches = self.tile_fixture()
        oracle = InferenceService.write_oracle_checkpoint(self.root / 'oracle.cspt')
        output = self.call('eval', str(oracle), patches=str(patches), pr_curve=True, out=str(self.root / 'eval'))
        report = load_json(self.root / 'eval' / 'report.json')
        self.assertEqual([r['ap'] for r in report['results']], [1.0, 1.0, 1.0])
        self.assertIn('AP@50: 1.0000', output)
        self.assertTrue((self.root / 'eval' / 'pr_curve.csv').exists())
        self.assertEqual(EvaluationRecord.objects.get().ap75, 1.0)

    def test_eval_no_record_and_bad_checkpoint(self):
        patches = self.tile_fixture()
        oracle = InferenceService.write_oracle_checkpoint(self.root / 'oracle.cspt')
        self.call('eval', str(oracle), patches=str(patches), no_record=True, out=str(self.root / 'eval'))
        self.assertFalse(EvaluationRecord.objects.exists())
        (self.root / 'junk.cspt').write_bytes(b'nope')
        with self.assertRaises(CommandError):
            self.call('eval', str(self.root / 'junk.cspt'), patches=str(patches), out=str(self.root / 'eval'))

    def test_train_then_eval(self):
        patches = self.tile_fixture()
        self.call('train', patches=[str(patches)], assignment_mode='standard', seed=2, out=str(self.root / 'train'))
        run = TrainingRun.objects.get()
        self.assertEqual(run.estado, 'COMPLETADO')
        self.assertEqual(run.assignment_mode, 'standard')
        self.assertEqual(run.epochs_run, 1)
        self.assertTrue((self.root / 'train' / 'best.cspt').exists())
        self.assertTrue((self.root / 'train' / 'split.json').exists())
        self.assertEqual(load_json(self.root / 'train' / RESOLVED_CONFIG_NAME)['seed'], 2)

        self.call('eval', str(self.root / 'train' / 'best.cspt'), patches=str(patches),
                  split=str(self.root / 'train' / 'split.json'), training_run=run.pk, out=str(self.root / 'eval'))
        record = EvaluationRecord.objects.get()
        self.assertEqual(record.training_run, run)
        self.assertEqual(record.test_descriptor['segments'], 1)

    def test_train_rejects_unknown_config_key(self):
        patches = self.tile_fixture()
        self.config.write_text(json.dumps({'training': {'epoch': 3}}))
        with self.assertRaisesMessage(CommandError, 'epoch'):
            self.call('train', patches=[str(patches)], out=str(self.root / 'train'))
        self.assertFalse(TrainingRun.objects.exists())

    def test_detect_on_large_segment(self):
        detector = build_detector(DetectorConfig(input_size=64, backbone_channels=(4, 4, 8, 8), head_channels=8))
        checkpoint = InferenceService.save_detector(detector, self.root / 'model.cspt')
        save_png(np.random.default_rng(0).integers(0, 256, size=(100, 160)).astype(np.uint8),
                 self.root / 'segment.png')
        self.call('detect', str(checkpoint), str(self.root / 'segment.png'), out=str(self.root / 'detect'))
        document = load_json(self.root / 'detect' / 'detections.json')
        self.assertEqual(document['checkpoint'], 'model.cspt')
        image = document['images'][0]
        self.assertEqual((image['image'], image['width'], image['height']), ('segment.png', 160, 100))
        for detection in image['detections']:
            x0, y0, x1, y1 = detection['box']
            self.assertTrue(0 <= x0 < x1 <= 160 and 0 <= y0 < y1 <= 100)

    def test_training_is_byte_reproducible(self):
        patches = self.tile_fixture()
        for name in ('a', 'b'):
            self.call('train', patches=[str(patches)], seed=4, epochs=2, no_record=True, out=str(self.root / name))
        for artifact in ('best.cspt', 'history.json'):
            with self.subTest(artifact=artifact):
                self.assertEqual((self.root / 'a' / artifact).read_bytes(), (self.root / 'b' / artifact).read_bytes())
        self.assertEqual(len(load_json(self.root / 'a' / 'history.json')), 2)

    def test_detect_photo_segment(self):
        detector = build_detector(DetectorConfig(input_size=64, backbone_channels=(4, 4, 8, 8), head_channels=8))
        checkpoint = InferenceService.save_detector(detector, self.root / 'model.cspt')
        save_png(np.random.default_rng(1).integers(0, 256, size=(40, 50, 3)).astype(np.uint8),
                 self.root / 'photo.png')
        self.call('detect', str(checkpoint), str(self.root / 'photo.png'), photo=True, out=str(self.root / 'detect'))
        image = load_json(self.root / 'detect' / 'detections.json')['images'][0]
        self.assertEqual((image['width'], image['height']), (50, 40))

    def test_detect_window_mismatch(self):
        detector = build_detector(DetectorConfig(input_size=128, backbone_channels=(4, 4, 8, 8), head_channels=8))
        checkpoint = InferenceService.save_detector(detector, self.root / 'model.cspt')
        save_png(np.zeros((64, 64), dtype=np.uint8), self.root / 'segment.png')
        with self.assertRaises(CommandError):
            self.call('detect', str(checkpoint), str(self.root / 'segment.png'), out=str(self.root / 'detect'))


class ExperimentCommandsTest(CommandTestCase):

    def synth_fixture(self):
        self.call('synth', segments=4, wedges='2..3', no_render=True, out=str(self.root / 'synth'))
        return self.root / 'synth'

    def test_ia_compare_is_byte_reproducible(self):
        synth = self.synth_fixture()
        for name in ('a', 'b'):
            self.call('benchmark', synth=str(synth), ia_compare=True, seeds=[0], out=str(self.root / name))
        first = (self.root / 'a' / 'ia_compare.json').read_bytes()
        self.assertEqual(first, (self.root / 'b' / 'ia_compare.json').read_bytes())

        document = json.loads(first)
        self.assertEqual(document['step_budget'], 1)
        self.assertEqual(document['steps'], {'without_ia': 1, 'with_ia': 8})
        self.assertEqual([run['steps'] for run in document['runs']['with_ia']], [8])

    def test_benchmark_with_synthetic_photos(self):
        synth = self.synth_fixture()
        output = self.call('benchmark', synth=str(synth), sources=['photo'], targets=['photo', 'vl'],
                           out=str(self.root / 'bench'))
        self.assertIn('photo:', output)
        document = load_json(self.root / 'bench' / 'benchmark.json')
        self.assertEqual(list(document['table']['photo']['test']), ['photo', 'vl'])
        annotation = load_json(self.root / 'bench' / 'photos' / 'annotations' / 'synth_0000_front.json')
        self.assertEqual(annotation['source_type'], 'photo')
        index = load_json(self.root / 'bench' / 'patches' / 'photo' / 'patches.json')
        self.assertEqual({entry['source_type'] for entry in index['patches']}, {'photo'})
        self.assertEqual(len(index['patches']), 4)


@unittest.skipUnless(SLOW_TESTS, 'CUNEISPOT_SLOW_TESTS no está activo')
class SyntheticAcceptanceTest(TestCase):
    """Corrida completa synth -> tile -> split -> train -> eval sobre 60 segmentos."""

    def call(self, name, *args, **options):
        call_command(name, *args, stdout=StringIO(), **options)

    def test_end_to_end(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            self.call('synth', segments=60, seed=0, workers=4, out=str(root / 'synth'))
            self.call('tile', annotations=str(root / 'synth' / 'annotations'),
                      manifest=str(root / 'synth' / 'renders' / 'vl' / 'manifest.json'), out=str(root / 'patches'))
            self.call('split', patches=str(root / 'patches'), seed=0, out=str(root / 'split'))
            counts = sorted(load_json(root / 'split' / 'split.json')['assignments'].values())
            self.assertEqual((counts.count('train'), counts.count('val'), counts.count('test')), (30, 15, 15))

            self.call('train', patches=[str(root / 'patches')], split=str(root / 'split' / 'split.json'),
                      preset='toy', assignment_mode='standard', epochs=30, seed=0, out=str(root / 'train'))
            for name in ('eval', 'eval_again'):
                self.call('eval', str(root / 'train' / 'best.cspt'), patches=str(root / 'patches'),
                          split=str(root / 'split' / 'split.json'), out=str(root / name))
            report = load_json(root / 'eval' / 'report.json')
            self.assertEqual((root / 'eval' / 'report.json').read_bytes(),
                             (root / 'eval_again' / 'report.json').read_bytes())

        ap = {round(r['threshold'] * 100): r['ap'] for r in report['results']}
        self.assertGreaterEqual(ap[50], 0.5)
        self.assertGreaterEqual(ap[75], 0.25)
        self.assertLessEqual(ap[90], ap[75])

    def test_illumination_augmentation_is_not_worse(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            self.call('synth', segments=60, seed=0, no_render=True, workers=4, out=str(root / 'synth'))
            self.call('benchmark', synth=str(root / 'synth'), ia_compare=True, seeds=[0, 1, 2], workers=4,
                      out=str(root / 'bench'))
            document = load_json(root / 'bench' / 'ia_compare.json')
        self.assertTrue(document['ia_not_worse'])
