import csv
import tempfile
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np
from django.test import SimpleTestCase, TestCase

from apps.core.exceptions import CheckpointError, EvaluationError
from apps.core.imaging import save_png
from apps.core.utils import load_json
from apps.datapipe.annotations import AnnotationSet, BBox, Patch
from apps.datapipe.services.splits import split_segments
from apps.datapipe.services.tiling import TilingService
from apps.detector.config import DetectorConfig
from apps.detector.geometry import Detection
from apps.detector.network import build_detector
from apps.detector.services.inference import InferenceService

from .metrics import interpolated_ap, iou, merge_patches, nms
from .models import EvaluationRecord
from .overlays import FN_COLOR, FP_COLOR, TP_COLOR, classify_patch, draw_overlay
from .services.evaluation import REFERENCE_RESULTS, EvaluationService


def det(x0, y0, x1, y1, score):
    return Detection(BBox(x0, y0, x1, y1), score)


def reference_iou(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(w, 0.0) * max(h, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def reference_nms(detections, threshold):
    """Cuadrático: recorre en orden (puntaje desc, área asc, entrada) y compara contra todo lo conservado."""
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, detections[i].box.area, i))
    kept = []
    for i in order:
        box = detections[i].box.as_tuple()
        if all(reference_iou(detections[j].box.as_tuple(), box) <= threshold for j in kept):
            kept.append(i)
    return [detections[i] for i in kept]


def reference_ap(detections_per_image, gt_per_image, threshold):
    """Barrido exhaustivo: para cada corte top-k se rehace el emparejamiento desde cero."""
    flat = sorted(((d.score, image, d.box.as_tuple()) for image, dets in enumerate(detections_per_image)
                   for d in dets), key=lambda item: -item[0])
    positives = sum(len(gt) for gt in gt_per_image)
    if positives == 0:
        return 0.0 if flat else None

    curve = []
    for k in range(1, len(flat) + 1):
        taken = [set() for _ in gt_per_image]
        tp = 0
        for _, image, box in flat[:k]:
            best, best_index = -1.0, None
            for index, gt in enumerate(gt_per_image[image]):
                if index in taken[image]:
                    continue
                value = reference_iou(box, gt.as_tuple())
                if value > best:
                    best, best_index = value, index
            if best_index is not None and best >= threshold:
                taken[image].add(best_index)
                tp += 1
        curve.append((Fraction(tp, positives), tp / k))

    total = 0.0
    for level in range(11):
        reached = [precision for recall, precision in curve if recall >= Fraction(level, 10)]
        total += max(reached) if reached else 0.0
    return total / 11


def random_boxes(rng, count, extent=100.0):
    boxes = []
    for _ in range(count):
        w, h = rng.uniform(2, 40, size=2)
        x0, y0 = rng.uniform(0, extent - w), rng.uniform(0, extent - h)
        boxes.append(BBox(x0, y0, x0 + w, y0 + h))
    return boxes


def random_instance(rng):
    gt_per_image, detections_per_image = [], []
    for _ in range(rng.integers(1, 4)):
        gt = random_boxes(rng, int(rng.integers(0, 6)))
        detections = []
        for box in gt:
            for _ in range(rng.integers(0, 3)):
                jitter = rng.normal(0, 2.5, size=4)
                x0, y0, x1, y1 = np.array(box.as_tuple()) + jitter
                detections.append(Detection(BBox(x0, y0, max(x1, x0 + 0.5), max(y1, y0 + 0.5)), float(rng.random())))
        detections += [Detection(box, float(rng.random())) for box in random_boxes(rng, int(rng.integers(0, 4)))]
        gt_per_image.append(gt)
        detections_per_image.append(detections)
    return detections_per_image, gt_per_image


class IouTest(SimpleTestCase):

    def test_examples(self):
        box = BBox(0, 0, 2, 2)
        self.assertEqual(iou(box, box), 1.0)
        self.assertEqual(iou(box, BBox(5, 5, 6, 6)), 0.0)
        self.assertAlmostEqual(iou(box, BBox(1, 1, 3, 3)), 1 / 7, places=12)


class NmsTest(SimpleTestCase):

    def test_single_detection_is_kept(self):
        detections = [det(0, 0, 10, 10, 0.3)]
        self.assertEqual(nms(detections), detections)

    def test_identical_boxes_keep_highest_score(self):
        self.assertEqual(nms([det(0, 0, 10, 10, 0.8), det(0, 0, 10, 10, 0.9)]), [det(0, 0, 10, 10, 0.9)])

    def test_overlap_equal_to_threshold_is_kept(self):
        detections = [det(0, 0, 10, 10, 0.9), det(0, 0, 10, 4, 0.5)]
        self.assertEqual(nms(detections, 0.4), detections)

    def test_score_tie_prefers_smaller_box(self):
        self.assertEqual(nms([det(0, 0, 10, 10, 0.5), det(0, 0, 8, 8, 0.5)]), [det(0, 0, 8, 8, 0.5)])

    def test_empty(self):
        self.assertEqual(nms([]), [])

    def test_matches_quadratic_reference_and_is_idempotent(self):
        rng = np.random.default_rng(11)
        for case in range(500):
            boxes = random_boxes(rng, int(rng.integers(0, 51)))
            # puntajes redondeados para forzar empates
            detections = [Detection(box, round(float(rng.random()), 1)) for box in boxes]
            kept = nms(detections, 0.4)
            with self.subTest(case=case):
                self.assertEqual(kept, reference_nms(detections, 0.4))
                self.assertEqual(nms(kept, 0.4), kept)
                self.assertEqual([d.score for d in kept], sorted((d.score for d in kept), reverse=True))


class MergePatchesTest(SimpleTestCase):

    def test_translation_to_segment_coordinates(self):
        merged = merge_patches([((256, 0), [det(10, 10, 20, 20, 0.7)])], 1024, 512)
        self.assertEqual(merged, [det(266, 10, 276, 20, 0.7)])

    def test_single_patch_at_origin_is_unchanged(self):
        detections = [det(0, 0, 10, 10, 0.9), det(100, 100, 120, 130, 0.4)]
        self.assertEqual(merge_patches([((0, 0), detections)], 512, 512), detections)

    def test_duplicate_from_overlapping_patches_is_suppressed(self):
        per_patch = [
            ((0, 0), [det(300, 40, 340, 80, 0.9)]),
            ((256, 0), [det(45, 41, 85, 81, 0.6)]),
        ]
        self.assertEqual(merge_patches(per_patch, 1024, 512), [det(300, 40, 340, 80, 0.9)])

    def test_boxes_are_clipped_to_segment(self):
        merged = merge_patches([((256, 256), [det(200, 200, 300, 300, 0.5)])], 500, 480)
        self.assertEqual(merged, [det(456, 456, 500, 480, 0.5)])


class InterpolatedApTest(SimpleTestCase):

    def test_perfect_detection(self):
        for threshold in (0.5, 0.75, 0.9):
            result = interpolated_ap([[det(0, 0, 10, 10, 0.8)]], [[BBox(0, 0, 10, 10)]], threshold)
            self.assertEqual(result.ap, 1.0)
            self.assertEqual(len(result.precisions), 11)

    def test_threshold_straddle(self):
        detections, gt = [[det(0, 0, 10, 6, 0.8)]], [[BBox(0, 0, 10, 10)]]
        self.assertEqual(interpolated_ap(detections, gt, 0.5).ap, 1.0)
        self.assertEqual(interpolated_ap(detections, gt, 0.75).ap, 0.0)

    def test_hand_case(self):
        gt = [[BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)]]
        detections = [[det(0, 0, 10, 10, 0.9), det(50, 50, 60, 60, 0.8), det(20, 20, 30, 30, 0.7)]]
        result = interpolated_ap(detections, gt, 0.5)
        self.assertAlmostEqual(result.ap, (6 * 1.0 + 5 * 2 / 3) / 11, places=12)
        self.assertAlmostEqual(result.ap, 0.8485, places=4)
        self.assertEqual((result.tp, result.fp, result.fn), (2, 1, 0))

    def test_duplicate_detection_is_one_tp_one_fp(self):
        result = interpolated_ap([[det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)]], [[BBox(0, 0, 10, 10)]])
        self.assertEqual((result.tp, result.fp, result.fn), (1, 1, 0))

    def test_matching_prefers_highest_iou(self):
        gt = [[BBox(0, 0, 10, 10), BBox(1, 0, 11, 10)]]
        result = interpolated_ap([[det(1, 0, 11, 10, 0.9), det(-1, 0, 9, 10, 0.8)]], gt, 0.75)
        self.assertEqual(result.tp, 2)

    def test_detections_only_match_their_own_image(self):
        result = interpolated_ap([[], [det(0, 0, 10, 10, 0.9)]], [[BBox(0, 0, 10, 10)], []])
        self.assertEqual((result.tp, result.fp, result.fn), (0, 1, 1))
        self.assertEqual(result.ap, 0.0)

    def test_empty_inputs(self):
        self.assertEqual(interpolated_ap([[det(0, 0, 1, 1, 0.5)]], [[]]).ap, 0.0)
        undefined = interpolated_ap([[]], [[]])
        self.assertIsNone(undefined.ap)
        self.assertIsNone(undefined.as_dict()['ap'])
        missed = interpolated_ap([[]], [[BBox(0, 0, 1, 1)]])
        self.assertEqual((missed.ap, missed.fn), (0.0, 1))

    def test_mismatched_image_count(self):
        with self.assertRaises(ValueError):
            interpolated_ap([[], []], [[]])

    def test_matches_exhaustive_reference(self):
        rng = np.random.default_rng(5)
        for case in range(200):
            detections, gt = random_instance(rng)
            aps = {}
            for threshold in (0.5, 0.75, 0.9):
                result = interpolated_ap(detections, gt, threshold)
                expected = reference_ap(detections, gt, threshold)
                aps[threshold] = result.ap
                with self.subTest(case=case, threshold=threshold):
                    if expected is None:
                        self.assertIsNone(result.ap)
                    else:
                        self.assertAlmostEqual(result.ap, expected, delta=1e-12)
                        self.assertTrue(all(0.0 <= p <= 1.0 for p in result.precisions))
            if aps[0.5] is not None:
                with self.subTest(case=case, check='monotonic'):
                    self.assertLessEqual(aps[0.9], aps[0.75] + 1e-12)
                    self.assertLessEqual(aps[0.75], aps[0.5] + 1e-12)


class OverlayTest(SimpleTestCase):

    def setUp(self):
        pixels = np.full((64, 64), 128, dtype=np.uint8)
        self.patch = Patch('seg', (0, 0), pixels, [BBox(4, 4, 20, 20), BBox(40, 40, 60, 60)])
        self.detections = [det(4, 4, 20, 20, 0.9), det(30, 2, 36, 8, 0.8)]

    def test_classification(self):
        tp, fp, fn = classify_patch(self.detections, self.patch.boxes)
        self.assertEqual(tp, [self.detections[0]])
        self.assertEqual(fp, [self.detections[1]])
        self.assertEqual(fn, [BBox(40, 40, 60, 60)])

    def test_colours(self):
        canvas = draw_overlay(self.patch, self.detections)
        self.assertEqual(canvas.shape, (64, 64, 3))
        self.assertEqual(tuple(canvas[4, 10]), TP_COLOR)
        self.assertEqual(tuple(canvas[2, 33]), FP_COLOR)
        self.assertEqual(tuple(canvas[40, 50]), FN_COLOR)
        self.assertEqual(tuple(canvas[30, 30]), (128, 128, 128))


def write_dataset(root: Path, count=4, size=64):
    """Segmentos de 64 px con dos cuadrados brillantes; cada uno da un único parche."""
    annotations = {}
    for index in range(count):
        pixels = np.full((size, size), 30, dtype=np.uint8)
        boxes = [BBox(8, 8, 24, 24), BBox(36 + index % 3, 32, 52 + index % 3, 48)]
        for box in boxes:
            x0, y0, x1, y1 = (int(v) for v in box.as_tuple())
            pixels[y0:y1, x0:x1] = 230
        save_png(pixels, root / 'images' / f"seg{index}.png")
        annotation = AnnotationSet(f"seg{index}", 'front', f"images/seg{index}.png", size, size, 'vl', boxes)
        annotation.save(root / 'annotations' / f"seg{index}.json")
        annotations[annotation.segment_id] = annotation
    TilingService.tile_dataset(annotations, root / 'patches', data_root=root, window=size, stride=size // 2)
    return annotations


class EvaluationServiceTest(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        write_dataset(self.root)
        self.oracle = InferenceService.write_oracle_checkpoint(self.root / 'oracle.cspt')

    def tearDown(self):
        self.tmp.cleanup()

    def silent_checkpoint(self, input_size=64):
        detector = build_detector(DetectorConfig(input_size=input_size, backbone_channels=(4, 4, 8, 8),
                                                 head_channels=8, seed=2))
        # logits constantes en el prior (0.01), bajo el umbral de puntaje
        detector.head.cls_out.weight.data[...] = 0.0
        return InferenceService.save_detector(detector, self.root / 'silent.cspt')

    def test_oracle_scores_one(self):
        report = EvaluationService.evaluate(self.oracle, self.root / 'patches', out_dir=self.root / 'eval',
                                            pr_curve=True)
        self.assertEqual([r.ap for r in report.results], [1.0, 1.0, 1.0])
        self.assertEqual(report.dataset['patches'], 4)
        self.assertEqual(report.dataset['gt_boxes'], 8)
        self.assertEqual(report.checkpoint['kind'], 'oracle')

        written = load_json(self.root / 'eval' / 'report.json')
        self.assertEqual(written['reference'], REFERENCE_RESULTS)
        self.assertEqual([r['ap'] for r in written['results']], [1.0, 1.0, 1.0])
        with open(self.root / 'eval' / 'pr_curve.csv', newline='') as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual(len(rows), 3 * 8)
        self.assertFalse(EvaluationRecord.objects.exists())

    def test_silent_detector_misses_everything(self):
        report = EvaluationService.evaluate(self.silent_checkpoint(), self.root / 'patches')
        for result in report.results:
            self.assertEqual(result.ap, 0.0)
            self.assertEqual((result.tp, result.fp, result.fn), (0, 0, 8))

    def test_split_selects_test_segments(self):
        manifest = split_segments([f"seg{i}" for i in range(4)], (2, 1, 1), seed=0)
        manifest.save(self.root / 'split.json')
        report = EvaluationService.evaluate(self.oracle, self.root / 'patches', self.root / 'split.json')
        self.assertEqual(report.dataset['split'], 'test')
        self.assertEqual(report.dataset['segments'], 1)

    def test_missing_images_are_skipped(self):
        (self.root / 'patches' / 'seg0_x0_y0.png').unlink()
        report = EvaluationService.evaluate(self.oracle, self.root / 'patches')
        self.assertEqual(report.dataset['missing'], ['seg0_x0_y0.png'])
        self.assertEqual(report.dataset['patches'], 3)

    def test_window_mismatch(self):
        with self.assertRaisesMessage(CheckpointError, '128'):
            EvaluationService.evaluate(self.silent_checkpoint(input_size=128), self.root / 'patches')

    def test_missing_index(self):
        with self.assertRaises(EvaluationError):
            EvaluationService.evaluate(self.oracle, self.root / 'nowhere')

    def test_overlays_and_record(self):
        report = EvaluationService.evaluate(self.oracle, self.root / 'patches', out_dir=self.root / 'eval',
                                            overlays=True, record=True)
        overlays = sorted((self.root / 'eval' / 'overlays').glob('*.png'))
        self.assertEqual(len(overlays), 4)
        self.assertEqual(cv2.imread(str(overlays[0])).shape, (64, 64, 3))

        record = EvaluationRecord.objects.get()
        self.assertEqual(record.ap50, 1.0)
        self.assertEqual(record.ap90, 1.0)
        self.assertEqual(record.test_descriptor, report.dataset)
        self.assertIsNone(record.training_run)
