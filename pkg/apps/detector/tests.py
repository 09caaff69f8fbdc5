import itertools
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.core.exceptions import CheckpointError, ConfigError, DimensionError
from apps.datapipe.annotations import BBox, Patch
from apps.tensor_core.tensor import Tensor

from .config import DetectorConfig
from .geometry import Detection, cell_grid, iou_matrix, points_to_box
from .network import HeadOutput, build_detector
from .services.inference import InferenceService, OraclePredictor, decode


def small_config(**overrides):
    values = dict(preset='toy', input_size=64, head_channels=8, backbone_channels=(4, 4, 8, 8), seed=3)
    values.update(overrides)
    return DetectorConfig(**values)


def randomize(conv, rng, scale=0.1):
    conv.weight.data[...] = rng.normal(0, scale, conv.weight.shape)
    conv.bias.data[...] = rng.normal(0, scale, conv.bias.shape)


class DetectorConfigTest(SimpleTestCase):

    def test_defaults(self):
        cfg = DetectorConfig()
        self.assertEqual((cfg.k, cfg.stride, cfg.num_classes, cfg.feature_size), (9, 8, 1, 64))
        self.assertEqual((cfg.input_dropout, cfg.first_conv_dropout, cfg.later_dropout), (0.2, 0.2, 0.5))

    def test_invalid(self):
        for bad in ({'k': 2}, {'num_classes': 2}, {'stride': 16}, {'preset': 'huge'},
                    {'input_size': 100}, {'later_dropout': 1.0}, {'backbone_channels': (4, 4)}):
            with self.subTest(bad=bad), self.assertRaises(ConfigError):
                DetectorConfig(**bad)

    def test_dict_round_trip(self):
        cfg = small_config(preset='full', blocks_per_stage=1)
        self.assertEqual(DetectorConfig.from_dict(cfg.as_dict()), cfg)
        with self.assertRaises(ConfigError):
            DetectorConfig.from_dict(dict(cfg.as_dict(), depth=3))


class BackboneTest(SimpleTestCase):

    def test_toy_full_size_output_is_64(self):
        detector = build_detector(DetectorConfig(preset='toy')).eval()
        feature = detector.backbone_forward(Tensor(np.zeros((1, 1, 512, 512))))
        self.assertEqual(feature.shape[2:], (64, 64))

    def test_full_preset_keeps_stride_eight(self):
        detector = build_detector(small_config(preset='full', blocks_per_stage=1)).eval()
        feature = detector.backbone_forward(Tensor(np.random.default_rng(0).normal(size=(2, 1, 64, 64))))
        self.assertEqual(feature.shape, (2, 8, 8, 8))

    def test_zero_input_gives_zero_features(self):
        detector = build_detector(small_config())
        feature = detector.backbone_forward(Tensor(np.zeros((1, 1, 64, 64))))
        np.testing.assert_array_equal(feature.data, 0.0)

    def test_eval_mode_is_deterministic(self):
        detector = build_detector(small_config()).eval()
        image = Tensor(np.random.default_rng(1).normal(size=(1, 1, 64, 64)))
        first = detector(image)
        second = detector(image)
        np.testing.assert_array_equal(first.logits.data, second.logits.data)
        np.testing.assert_array_equal(first.p2_offsets.data, second.p2_offsets.data)

    def test_wrong_input_size(self):
        detector = build_detector(small_config())
        with self.assertRaises(DimensionError):
            detector(Tensor(np.zeros((1, 1, 32, 32))))

    def test_training_dropout_follows_seed(self):
        image = Tensor(np.random.default_rng(1).normal(size=(1, 1, 64, 64)))
        runs = []
        for _ in range(2):
            detector = build_detector(small_config()).train()
            detector.reseed(42)
            runs.append(detector(image).logits.data)
        np.testing.assert_array_equal(runs[0], runs[1])


class HeadTest(SimpleTestCase):

    def setUp(self):
        self.cfg = small_config(k=5)
        self.detector = build_detector(self.cfg).eval()
        self.image = Tensor(np.random.default_rng(7).normal(size=(2, 1, 64, 64)))

    def test_output_shapes(self):
        out = self.detector(self.image)
        self.assertEqual(out.p1_offsets.shape, (2, 10, 8, 8))
        self.assertEqual(out.p2_offsets.shape, (2, 10, 8, 8))
        self.assertEqual(out.logits.shape, (2, 1, 8, 8))

    def test_zero_offset_weights_put_points_at_cells(self):
        points = self.detector(self.image).p1_points().data
        expected = np.broadcast_to(cell_grid(8, 8)[None, :, :, None, :], points.shape)
        np.testing.assert_array_equal(points, expected)

    def test_zero_refinement_keeps_p1(self):
        randomize(self.detector.head.p1_out, np.random.default_rng(0))
        out = self.detector(self.image)
        np.testing.assert_array_equal(out.p2_points().data, out.p1_points().data)

    def test_p2_is_cell_plus_both_offsets(self):
        rng = np.random.default_rng(1)
        randomize(self.detector.head.p1_out, rng)
        randomize(self.detector.head.p2_out, rng)
        out = self.detector(self.image)
        d1 = out.p1_offsets.data.reshape(2, 5, 2, 8, 8).transpose(0, 3, 4, 1, 2)
        d2 = out.p2_offsets.data.reshape(2, 5, 2, 8, 8).transpose(0, 3, 4, 1, 2)
        grid = cell_grid(8, 8)[None, :, :, None, :]
        np.testing.assert_allclose(out.p2_points().data, grid + d1 + d2, atol=1e-12)

    def test_classification_prior(self):
        cfg = small_config()
        detector = build_detector(cfg).eval()
        detector.head.cls_out.weight.data[...] = 0
        logits = detector(Tensor(np.zeros((1, 1, 64, 64)))).logits.data
        np.testing.assert_allclose(logits, -np.log(99.0))

    def test_untrained_scores_stay_below_the_floor(self):
        detector = build_detector(small_config(backbone_channels=None, head_channels=None)).eval()
        logits = detector(self.image).logits.data
        self.assertLess(np.abs(logits + np.log(99.0)).max(), 0.5)
        self.assertTrue((1 / (1 + np.exp(-logits)) < 0.05).all())

    def test_pseudo_boxes_match_min_max(self):
        randomize(self.detector.head.p1_out, np.random.default_rng(5), scale=1.0)
        out = self.detector(self.image)
        np.testing.assert_array_equal(out.p1_boxes().data, points_to_box(out.p1_points().data))


class PointsToBoxTest(SimpleTestCase):

    def test_example(self):
        np.testing.assert_array_equal(points_to_box([[1, 2], [3, 0], [2, 5]]), [1, 0, 3, 5])

    def test_degenerate(self):
        np.testing.assert_array_equal(points_to_box([[2, 2]] * 4), [2, 2, 2, 2])

    def test_permutation_invariant(self):
        points = np.random.default_rng(0).normal(size=(6, 2))
        reference = points_to_box(points)
        for order in itertools.islice(itertools.permutations(range(6)), 50):
            np.testing.assert_array_equal(points_to_box(points[list(order)]), reference)

    def test_interior_point_does_not_change_box(self):
        points = np.array([[0.0, 0.0], [4.0, 1.0], [1.0, 3.0]])
        extended = np.vstack([points, [[2.0, 1.5]]])
        np.testing.assert_array_equal(points_to_box(extended), points_to_box(points))

    def test_iou_matrix(self):
        result = iou_matrix([[0, 0, 2, 2], [0, 0, 1, 1]], [[1, 1, 3, 3], [0, 0, 2, 2], [5, 5, 5, 5]])
        np.testing.assert_allclose(result, [[1 / 7, 1.0, 0.0], [0.0, 0.25, 0.0]])


class DecodeTest(SimpleTestCase):
    cfg = DetectorConfig(k=3, input_size=32)

    def head(self, logit=-30.0):
        p1 = np.zeros((1, 6, 4, 4))
        p2 = np.zeros((1, 6, 4, 4))
        logits = np.full((1, 1, 4, 4), logit)
        return p1, p2, logits

    def build(self, p1, p2, logits):
        return HeadOutput(Tensor(p1), Tensor(p2), Tensor(logits))

    def test_low_scores_give_nothing(self):
        self.assertEqual(decode(self.build(*self.head()), self.cfg, 0.05), [])

    def test_single_cell_scaled_by_stride(self):
        p1, p2, logits = self.head()
        # celda (x=2, y=2): puntos (1,1), (3,3), (2,2)
        p1[0, :, 2, 2] = [-1, -1, 1, 1, 0, 0]
        logits[0, 0, 2, 2] = 5.0
        detections = decode(self.build(p1, p2, logits), self.cfg, 0.05)
        self.assertEqual([d.box for d in detections], [BBox(8, 8, 24, 24)])
        self.assertAlmostEqual(detections[0].score, 1 / (1 + np.exp(-5.0)))

    def test_refinement_offsets_move_the_box(self):
        p1, p2, logits = self.head()
        p1[0, :, 1, 1] = [-1, -1, 1, 1, 0, 0]
        p2[0, :, 1, 1] = [0.5, 0, 0.5, 0, 0.5, 0]
        logits[0, 0, 1, 1] = 5.0
        detections = decode(self.build(p1, p2, logits), self.cfg, 0.05)
        self.assertEqual([d.box for d in detections], [BBox(4, 0, 20, 16)])

    def test_zero_area_is_excluded(self):
        _, _, logits = self.head(logit=10.0)
        p1, p2, _ = self.head()
        self.assertEqual(decode(self.build(p1, p2, logits), self.cfg, 0.05), [])

    def test_boxes_are_clipped_to_image(self):
        p1, p2, logits = self.head()
        p1[0, :, 3, 3] = [-1, -1, 2, 2, 0, 0]
        logits[0, 0, 3, 3] = 5.0
        detections = decode(self.build(p1, p2, logits), self.cfg, 0.05)
        self.assertEqual([d.box for d in detections], [BBox(16, 16, 32, 32)])


class InferenceServiceTest(SimpleTestCase):

    def test_checkpoint_rebuilds_same_predictions(self):
        cfg = small_config()
        detector = build_detector(cfg)
        rng = np.random.default_rng(2)
        randomize(detector.head.p1_out, rng)
        for param in detector.parameters():
            param.data[...] = param.data.astype(np.float32)
        images = [np.random.default_rng(i).integers(0, 256, size=(64, 64)).astype(np.uint8) for i in range(3)]
        with tempfile.TemporaryDirectory() as tmp:
            path = InferenceService.save_detector(detector, Path(tmp) / 'model.cspt', {'epoch': 4})
            predictor = InferenceService.load_predictor(path)
        self.assertEqual(predictor.cfg, cfg)
        self.assertEqual(predictor.metadata['epoch'], 4)
        from .services.inference import DetectorPredictor
        original = DetectorPredictor(detector).predict_images(images, score_threshold=0.0, nms_threshold=None)
        loaded = predictor.predict_images(images, score_threshold=0.0, nms_threshold=None)
        self.assertEqual(original, loaded)

    def test_checkpoint_without_config(self):
        from apps.tensor_core.checkpoint import save_checkpoint
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / 'bare.cspt', {'w': np.zeros(2)})
            with self.assertRaises(CheckpointError):
                InferenceService.load_predictor(path)

    def test_oracle_returns_ground_truth(self):
        with tempfile.TemporaryDirectory() as tmp:
            predictor = InferenceService.load_predictor(InferenceService.write_oracle_checkpoint(Path(tmp) / 'o.cspt'))
        self.assertIsInstance(predictor, OraclePredictor)
        patch = Patch('s', (0, 0), np.zeros((8, 8), dtype=np.uint8), [BBox(1, 1, 3, 3)])
        self.assertEqual(predictor.predict_patches([patch]), [[Detection(BBox(1, 1, 3, 3), 1.0)]])

    def test_detect_segment_merges_in_segment_coordinates(self):
        class FixedPredictor:
            cfg = None

            def predict_images(self, images, **kwargs):
                return [[Detection(BBox(10, 10, 20, 20), 0.9)] for _ in images]

        detections = InferenceService.detect_segment(FixedPredictor(), np.zeros((512, 1024), dtype=np.uint8), 512, 256)
        self.assertEqual(sorted(d.box.x_min for d in detections), [10, 266, 522])
        self.assertTrue(all(d.box.y_min == 10 for d in detections))
