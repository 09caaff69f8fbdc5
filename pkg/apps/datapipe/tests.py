import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.core.exceptions import AnnotationError, DatasetError, SplitError, TransformError
from apps.core.imaging import load_image, save_png, to_luma
from apps.core.utils import dump_json, load_json
from apps.meshlight.raster import ImageFit, RenderConfig

from .annotations import AnnotationSet, BBox, SplitManifest, load_annotation_dir
from .services.converters import coco_to_annotations, import_coco
from .services.normalization import normalize_photo
from .services.photo import PhotoService, PhotoSettings, photo_proxy
from .services.splits import split_counts, split_segments
from .services.synth import SynthService, SynthSettings, generate_segment, place_wedges, synth_generate
from .services.tiling import PATCH_INDEX_NAME, PatchIndex, TilingService, mean_pad_value, tile, window_origins
from .services.transforms import transform_boxes

SMALL = SynthSettings(grid_size=129, spacing=1.0, render=RenderConfig(width=128, height=128))


def annotation(width=1024, height=1024, boxes=(), source_type='vl', image='img.png'):
    return AnnotationSet('tab_front', 'front', image, width, height, source_type, list(boxes))


class AnnotationSchemaTest(SimpleTestCase):

    def document(self, **overrides):
        data = {
            'segment_id': 'HS_1_front', 'side': 'front', 'image': 'renders/HS_1.png',
            'width': 100, 'height': 80, 'source_type': 'msii',
            'boxes': [{'x_min': 1, 'y_min': 2, 'x_max': 10, 'y_max': 12}],
        }
        data.update(overrides)
        return data

    def test_valid_document(self):
        parsed = AnnotationSet.from_dict(self.document())
        self.assertEqual(parsed.boxes, [BBox(1.0, 2.0, 10.0, 12.0)])
        self.assertEqual(parsed.to_dict(), self.document(boxes=[{'x_min': 1.0, 'y_min': 2.0, 'x_max': 10.0, 'y_max': 12.0}]))

    def test_unknown_keys_are_rejected_at_any_level(self):
        with self.assertRaisesMessage(AnnotationError, 'colour'):
            AnnotationSet.from_dict(self.document(colour='red'))
        box = {'x_min': 1, 'y_min': 2, 'x_max': 10, 'y_max': 12, 'label': 'AN'}
        with self.assertRaisesMessage(AnnotationError, 'label'):
            AnnotationSet.from_dict(self.document(boxes=[box]))

    def test_invalid_values(self):
        for bad in ({'side': 'top'}, {'source_type': 'xray'}, {'segment_id': ''}, {'width': 0},
                    {'boxes': [{'x_min': 5, 'y_min': 2, 'x_max': 5, 'y_max': 12}]}):
            with self.subTest(bad=bad), self.assertRaises(AnnotationError):
                AnnotationSet.from_dict(self.document(**bad))

    def test_boxes_are_clipped_to_image(self):
        parsed = AnnotationSet.from_dict(self.document(boxes=[
            {'x_min': -5, 'y_min': 70, 'x_max': 20, 'y_max': 95},
            {'x_min': 200, 'y_min': 0, 'x_max': 210, 'y_max': 5},
        ]))
        self.assertEqual(parsed.boxes, [BBox(0.0, 70.0, 20.0, 80.0)])

    def test_directory_load_and_duplicates(self):
        with tempfile.TemporaryDirectory() as tmp:
            AnnotationSet.from_dict(self.document()).save(Path(tmp) / 'a.json')
            self.assertEqual(list(load_annotation_dir(tmp)), ['HS_1_front'])
            AnnotationSet.from_dict(self.document()).save(Path(tmp) / 'b.json')
            with self.assertRaises(AnnotationError):
                load_annotation_dir(tmp)

    def test_bbox_invariants(self):
        with self.assertRaises(AnnotationError):
            BBox(0, 0, 0, 1)
        with self.assertRaises(AnnotationError):
            BBox(0, 0, float('nan'), 1)
        self.assertIsNone(BBox(0, 0, 1, 1).clipped(2, 2, 3, 3))


class NormalizationTest(SimpleTestCase):

    def test_constant_image_becomes_zero(self):
        np.testing.assert_array_equal(normalize_photo(np.full((8, 8), 77, dtype=np.uint8)), 0.0)

    def test_two_values_become_plus_minus_one(self):
        image = np.zeros((4, 4), dtype=np.uint8)
        image[:2] = 255
        result = normalize_photo(image)
        np.testing.assert_array_equal(result[:2], 1.0)
        np.testing.assert_array_equal(result[2:], -1.0)

    def test_gray_color_pixel_keeps_its_value(self):
        self.assertAlmostEqual(float(to_luma(np.array([[[90, 90, 90]]]))[0, 0]), 90.0, places=12)

    def test_color_uses_rec601_weights(self):
        self.assertAlmostEqual(float(to_luma(np.array([[[255, 0, 0]]]))[0, 0]), 0.299 * 255)

    def test_output_statistics(self):
        image = np.random.default_rng(3).integers(0, 256, size=(64, 48, 3)).astype(np.uint8)
        result = normalize_photo(image)
        self.assertEqual(result.shape, (64, 48))
        self.assertLess(abs(result.mean()), 1e-9)
        self.assertLess(abs(result.std() - 1), 1e-6)


class TilingTest(SimpleTestCase):

    def test_window_origins(self):
        self.assertEqual(window_origins(1024), [0, 256, 512])
        self.assertEqual(window_origins(768), [0, 256])
        self.assertEqual(window_origins(512), [0])
        self.assertEqual(window_origins(700), [0, 188])
        self.assertEqual(window_origins(400), [-56])

    def test_square_image_gives_nine_patches(self):
        patches = tile(annotation(), pixels=np.zeros((1024, 1024), dtype=np.uint8))
        self.assertEqual(len(patches), 9)
        self.assertEqual(sorted({p.origin for p in patches}), [(x, y) for x in (0, 256, 512) for y in (0, 256, 512)])

    def test_rectangular_image_gives_six_patches(self):
        patches = tile(annotation(width=1024, height=768), pixels=np.zeros((768, 1024), dtype=np.uint8))
        self.assertEqual(len(patches), 6)

    def test_small_image_is_single_patch(self):
        patches = tile(annotation(512, 512), pixels=np.zeros((512, 512), dtype=np.uint8))
        self.assertEqual([p.origin for p in patches], [(0, 0)])

    def test_full_coverage(self):
        for width, height in ((1024, 1024), (1100, 700), (513, 900)):
            coverage = np.zeros((height, width), dtype=int)
            for y0 in window_origins(height):
                for x0 in window_origins(width):
                    coverage[y0:y0 + 512, x0:x0 + 512] += 1
            with self.subTest(size=(width, height)):
                self.assertGreaterEqual(coverage.min(), 1)
                self.assertGreaterEqual(coverage[256:-256, 256:-256].min(), 2)

    def test_pixels_are_copied_from_the_window(self):
        pixels = np.random.default_rng(0).integers(0, 256, size=(768, 1024)).astype(np.uint8)
        for patch in tile(annotation(1024, 768), pixels=pixels):
            x0, y0 = patch.origin
            np.testing.assert_array_equal(patch.pixels, pixels[y0:y0 + 512, x0:x0 + 512])

    def test_box_round_trip(self):
        boxes = [BBox(10.25, 20.5, 60.75, 90.0), BBox(600.5, 700.25, 650.0, 760.75), BBox(300.0, 300.0, 340.5, 330.25)]
        for patch in tile(annotation(boxes=boxes), pixels=np.zeros((1024, 1024), dtype=np.uint8)):
            window_box = (patch.origin[0], patch.origin[1], patch.origin[0] + 512, patch.origin[1] + 512)
            expected = {b.clipped(*window_box) for b in boxes if b.clipped(*window_box) is not None}
            for local in patch.boxes:
                self.assertGreaterEqual(local.x_min, 0)
                self.assertLessEqual(local.x_max, 512)
            self.assertTrue(set(patch.global_boxes()) <= expected)

    def test_box_fully_inside_is_translated(self):
        patches = tile(annotation(boxes=[BBox(300, 40, 340, 80)]), pixels=np.zeros((1024, 1024), dtype=np.uint8))
        by_origin = {p.origin: p.boxes for p in patches}
        self.assertEqual(by_origin[(256, 0)], [BBox(44.0, 40.0, 84.0, 80.0)])

    def test_half_inside_rule(self):
        pixels = np.zeros((1024, 1024), dtype=np.uint8)
        # 44% dentro de la ventana en x=0, 56% dentro de la ventana en x=512
        patches = {p.origin: p.boxes for p in tile(annotation(boxes=[BBox(490, 100, 540, 120)]), pixels=pixels)}
        self.assertEqual(patches[(0, 0)], [])
        self.assertEqual(patches[(256, 0)], [BBox(234.0, 100.0, 284.0, 120.0)])
        self.assertEqual(patches[(512, 0)], [BBox(0.0, 100.0, 28.0, 120.0)])

        patches = {p.origin: p.boxes for p in tile(annotation(boxes=[BBox(480, 100, 540, 120)]), pixels=pixels)}
        self.assertEqual(patches[(0, 0)], [BBox(480.0, 100.0, 512.0, 120.0)])
        self.assertEqual(patches[(512, 0)], [])

    def test_undersized_photo_is_padded_with_mean(self):
        pixels = np.full((300, 600), 100, dtype=np.uint8)
        pixels[:, :300] = 50
        patches = tile(annotation(600, 300, boxes=[BBox(0, 0, 10, 10)], source_type='photo'), pixels=pixels)
        self.assertEqual([p.origin for p in patches], [(0, -106), (88, -106)])
        first = patches[0]
        self.assertEqual(first.pixels[0, 0], 75)
        self.assertEqual(first.pixels[106, 0], 50)
        self.assertEqual(first.boxes, [BBox(0.0, 106.0, 10.0, 116.0)])

    def test_photo_pad_rounds_half_up(self):
        self.assertEqual(mean_pad_value(np.array([[2, 3]], dtype=np.uint8)), 3)
        self.assertEqual(mean_pad_value(np.array([[0, 1, 1, 2]], dtype=np.uint8)), 1)
        self.assertEqual(mean_pad_value(np.array([[4, 5]], dtype=np.uint8)), 5)

    def test_undersized_render_is_padded_with_background(self):
        patches = tile(annotation(100, 100), pixels=np.full((100, 100), 200, dtype=np.uint8), background=7)
        self.assertEqual(len(patches), 1)
        self.assertEqual(patches[0].pixels[0, 0], 7)
        self.assertEqual(patches[0].pixels[256, 256], 200)

    def test_size_mismatch(self):
        with self.assertRaises(DatasetError):
            tile(annotation(1024, 1024), pixels=np.zeros((10, 10), dtype=np.uint8))


class SplitTest(SimpleTestCase):

    def test_counts(self):
        self.assertEqual(split_counts(4), (2, 1, 1))
        self.assertEqual(split_counts(873), (437, 218, 218))
        self.assertEqual(split_counts(60), (30, 15, 15))
        self.assertEqual(split_counts(7), (3, 2, 2))

    def test_partition_is_disjoint_and_complete(self):
        ids = [f"seg_{i:04d}" for i in range(873)]
        manifest = split_segments(ids, seed=11)
        parts = [set(manifest.segments(split)) for split in ('train', 'val', 'test')]
        self.assertEqual(set().union(*parts), set(ids))
        self.assertEqual(sum(len(p) for p in parts), len(ids))
        self.assertEqual(manifest.counts(), (437, 218, 218))

    def test_deterministic_per_seed(self):
        ids = [f"s{i}" for i in range(40)]
        self.assertEqual(split_segments(ids, seed=7).to_dict(), split_segments(list(reversed(ids)), seed=7).to_dict())
        self.assertNotEqual(split_segments(ids, seed=7).to_dict(), split_segments(ids, seed=8).to_dict())

    def test_too_few_segments(self):
        with self.assertRaises(SplitError):
            split_segments(['a', 'b', 'c'])

    def test_manifest_file_round_trip(self):
        manifest = split_segments(['a', 'b', 'c', 'd'], seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = manifest.save(Path(tmp) / 'split.json')
            self.assertEqual(SplitManifest.load(path), manifest)
            dump_json({'seed': 1, 'assignments': {'a': 'holdout'}}, path)
            with self.assertRaises(SplitError):
                SplitManifest.load(path)


class TransformTest(SimpleTestCase):
    boxes = [BBox(0, 0, 2, 1), BBox(5, 5, 9, 7)]

    def test_identity(self):
        self.assertEqual(transform_boxes(self.boxes, [[1, 0, 0], [0, 1, 0]]), self.boxes)

    def test_translation(self):
        moved = transform_boxes(self.boxes, [[1, 0, 10], [0, 1, 5]])
        self.assertEqual(moved, [BBox(10, 5, 12, 6), BBox(15, 10, 19, 12)])

    def test_quarter_rotation_hull(self):
        self.assertEqual(transform_boxes([BBox(0, 0, 2, 1)], [[0, -1, 0], [1, 0, 0]]), [BBox(-1, 0, 0, 2)])

    def test_clipped_to_target(self):
        result = transform_boxes(self.boxes, [[1, 0, -1], [0, 1, 0]], width=6, height=6)
        self.assertEqual(result, [BBox(0, 0, 1, 1), BBox(4, 5, 6, 6)])

    def test_singular(self):
        with self.assertRaises(TransformError):
            transform_boxes(self.boxes, [[1, 2, 0], [2, 4, 0]])


class SynthTest(SimpleTestCase):

    def test_no_wedges(self):
        meshes, annotations = synth_generate(1, wedges_per_segment=0, seed=1, settings=SMALL)
        self.assertEqual(annotations[0].boxes, [])
        z = meshes[0].vertices[:, 2]
        self.assertLess(z.max() - z.min(), 1.5)

    def test_deterministic(self):
        first = synth_generate(2, (3, 5), seed=4, settings=SMALL)
        second = synth_generate(2, (3, 5), seed=4, settings=SMALL)
        for a, b in zip(first[0], second[0]):
            np.testing.assert_array_equal(a.vertices, b.vertices)
        self.assertEqual([a.to_dict() for a in first[1]], [a.to_dict() for a in second[1]])

    def test_segment_does_not_depend_on_total(self):
        _, few = synth_generate(1, (3, 5), seed=4, settings=SMALL)
        _, many = synth_generate(3, (3, 5), seed=4, settings=SMALL)
        self.assertEqual(few[0].to_dict(), many[0].to_dict())

    def test_box_count_and_indented_vertex_inside(self):
        for index in range(4):
            segment = generate_segment(index, (3, 8), seed=9, settings=SMALL)
            self.assertTrue(3 <= len(segment.annotation.boxes) <= 8)
            render = SMALL.render
            fit = ImageFit.for_vertices(segment.mesh.vertices, render.width, render.height, render.fill)
            screen, _ = fit.project(segment.mesh.vertices)
            indented = screen[segment.indentation > 0]
            for box in segment.annotation.boxes:
                inside = ((indented[:, 0] >= box.x_min) & (indented[:, 0] <= box.x_max)
                          & (indented[:, 1] >= box.y_min) & (indented[:, 1] <= box.y_max))
                self.assertTrue(inside.any(), box)

    def test_invalid_arguments(self):
        with self.assertRaises(DatasetError):
            synth_generate(0)
        with self.assertRaises(DatasetError):
            synth_generate(1, (5, 3))

    def test_requested_wedge_count_is_exact(self):
        for index in range(4):
            segment = generate_segment(index, (8, 8), seed=3, settings=SMALL)
            self.assertEqual(len(segment.wedges), 8)

    def test_crowded_field_raises(self):
        crowded = replace(SMALL, grid_size=33, max_attempts=50, placement_retries=1)
        with self.assertRaisesMessage(DatasetError, 'no caben 40 cuñas tras 2 intentos'):
            generate_segment(0, (40, 40), seed=0, settings=crowded)
        with self.assertRaises(DatasetError):
            place_wedges(np.random.default_rng(0), 40, crowded)

    def test_dataset_on_disk_feeds_tiling(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            SynthService.generate_dataset(root, 2, (2, 3), seed=5, settings=SMALL)
            annotations = load_annotation_dir(root / 'annotations')
            self.assertEqual(sorted(annotations), ['synth_0000_front', 'synth_0001_front'])
            for item in annotations.values():
                self.assertTrue(item.image_path(root).exists())

            index = TilingService.tile_dataset(annotations, root / 'patches', manifest_path=root / 'renders' / 'vl' / 'manifest.json',
                                               window=128, stride=64)
            self.assertEqual(len(index['patches']), 2)
            loaded = PatchIndex.load(root / 'patches')
            patch = loaded.load_patch(loaded.entries[0])
            self.assertEqual(patch.pixels.shape, (128, 128))
            self.assertEqual(len(patch.boxes), len(annotations[patch.segment_id].boxes))
            self.assertFalse(patch.augmented)
            self.assertTrue((root / 'patches' / PATCH_INDEX_NAME).exists())


class TilingServiceTest(SimpleTestCase):

    def test_missing_image_is_counted_but_others_continue(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            save_png(np.zeros((600, 600), dtype=np.uint8), root / 'a.png')
            good = AnnotationSet('a_front', 'front', 'a.png', 600, 600, 'photo', [BBox(10, 10, 30, 30)])
            bad = AnnotationSet('b_front', 'front', 'b.png', 600, 600, 'photo', [])
            index = TilingService.tile_dataset({'a_front': good, 'b_front': bad}, root / 'out', data_root=root)
            self.assertEqual(len(index['patches']), 4)
            self.assertEqual([f['image'] for f in index['failures']], ['b.png'])
            self.assertEqual(load_image(root / 'out' / index['patches'][0]['file']).shape, (512, 512))

    def test_all_missing_is_an_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            bad = AnnotationSet('b_front', 'front', 'b.png', 600, 600, 'photo', [])
            with self.assertRaises(DatasetError):
                TilingService.tile_dataset({'b_front': bad}, Path(tmp) / 'out', data_root=tmp)


class CocoImportTest(SimpleTestCase):
    document = {
        'images': [
            {'id': 1, 'file_name': 'HS_1_back.jpg', 'width': 100, 'height': 100},
            {'id': 2, 'file_name': 'HS_2.jpg', 'width': 50, 'height': 40},
        ],
        'annotations': [
            {'id': 7, 'image_id': 1, 'bbox': [10, 20, 5, 6], 'category_id': 1},
            {'id': 8, 'image_id': 1, 'bbox': [95, 95, 10, 10], 'category_id': 1},
        ],
        'categories': [{'id': 1, 'name': 'sign'}],
    }

    def test_conversion(self):
        back, front = coco_to_annotations(self.document, image_prefix='photos/')
        self.assertEqual((back.segment_id, back.side, back.image), ('HS_1_back', 'back', 'photos/HS_1_back.jpg'))
        self.assertEqual(back.boxes, [BBox(10, 20, 15, 26), BBox(95, 95, 100, 100)])
        self.assertEqual((front.segment_id, front.side, front.boxes), ('HS_2_front', 'front', []))

    def test_writes_one_file_per_segment(self):
        with tempfile.TemporaryDirectory() as tmp:
            dump_json(self.document, Path(tmp) / 'coco.json')
            written = import_coco(Path(tmp) / 'coco.json', Path(tmp) / 'annotations')
            self.assertEqual(sorted(p.name for p in written), ['HS_1_back.json', 'HS_2_front.json'])
            self.assertEqual(load_json(written[0])['source_type'], 'photo')

    def test_invalid_bbox(self):
        document = dict(self.document, annotations=[{'image_id': 1, 'bbox': [0, 0, 0, 5]}])
        with self.assertRaises(AnnotationError):
            coco_to_annotations(document)


class PhotoProxyTest(SimpleTestCase):

    def square_image(self):
        pixels = np.full((64, 64), 30, dtype=np.uint8)
        pixels[20:36, 20:36] = 230
        return pixels

    def test_boxes_follow_the_affine(self):
        box = BBox(20, 20, 36, 36)
        photo, boxes, affine = photo_proxy(self.square_image(), [box], np.random.default_rng(1))
        self.assertEqual((photo.shape, photo.dtype), ((64, 64, 3), np.uint8))
        self.assertEqual(boxes, transform_boxes([box], affine, 64, 64))
        x, y = affine @ np.array([28.0, 28.0, 1.0])
        self.assertGreater(to_luma(photo)[int(round(y)), int(round(x))], 150)
        self.assertLess(to_luma(photo)[2, 2], 100)

    def test_tint_and_noise_change_the_channels(self):
        photo, _, _ = photo_proxy(self.square_image(), [], np.random.default_rng(2))
        flat = photo.reshape(-1, 3).astype(float)
        self.assertFalse(np.array_equal(flat[:, 0], flat[:, 1]))

    def test_invalid_settings(self):
        with self.assertRaises(DatasetError):
            PhotoSettings(scale_range=(1.1, 0.9))
        with self.assertRaises(DatasetError):
            PhotoSettings(tint=1.5)

    def test_photo_directory_from_vl_renders(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            SynthService.generate_dataset(root, 2, (2, 3), seed=5, settings=SMALL)
            annotations = load_annotation_dir(root / 'annotations')
            manifest = root / 'renders' / 'vl' / 'manifest.json'
            photos = PhotoService.photo_directory(annotations, manifest, root / 'photos', PhotoSettings(seed=3))
            self.assertEqual(sorted(photos), sorted(annotations))
            for segment_id, photo in photos.items():
                self.assertEqual(photo.source_type, 'photo')
                self.assertTrue(1 <= len(photo.boxes) <= len(annotations[segment_id].boxes))
                self.assertEqual(load_image(photo.image_path(root / 'photos')).shape, (128, 128, 3))
            saved = load_annotation_dir(root / 'photos' / 'annotations')
            self.assertEqual({k: v.to_dict() for k, v in saved.items()}, {k: v.to_dict() for k, v in photos.items()})

            PhotoService.photo_directory(annotations, manifest, root / 'again', PhotoSettings(seed=3))
            for name in ('synth_0000_front', 'synth_0001_front'):
                self.assertEqual((root / 'photos' / 'images' / f"{name}.png").read_bytes(),
                                 (root / 'again' / 'images' / f"{name}.png").read_bytes())
