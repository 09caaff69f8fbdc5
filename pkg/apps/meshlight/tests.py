import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.core.exceptions import ConfigError, CuneispotError, MeshParseError
from apps.core.imaging import load_image
from apps.core.utils import load_json

from .mesh import Mesh, load_mesh, save_ply
from .primitives import cone, disc, grid_mesh, plane, uv_sphere
from .raster import (
    LightSpec, RenderConfig, curvature_descriptor, light_direction, orbit_augment, quantize, rasterize,
    render_curvature, render_mixed, render_phong,
)
from .services.rendering import RenderingService, RenderSettings


def groove_mesh(size: int = 33, center: float = 16.0, half_width: float = 3.0) -> Mesh:
    xs = np.arange(size, dtype=float)
    profile = -np.maximum(0.0, half_width - np.abs(xs - center))
    return grid_mesh(np.tile(profile, (size, 1)), name='groove')


class MeshIOTest(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name, text):
        path = self.root / name
        path.write_text(text)
        return path

    def test_minimal_obj(self):
        mesh = load_mesh(self.write('t.obj', "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
        self.assertEqual(mesh.vertices.shape, (3, 3))
        self.assertEqual(mesh.faces.tolist(), [[0, 1, 2]])

    def test_obj_quads_and_negative_indices(self):
        text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4/1/1 -3/2/1 -2/3/1 -1/4/1\n"
        mesh = load_mesh(self.write('q.obj', text))
        self.assertEqual(mesh.faces.tolist(), [[0, 1, 2], [0, 2, 3]])

    def test_unit_square_normals(self):
        text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3\nf 1 3 4\n"
        mesh = load_mesh(self.write('sq.obj', text))
        np.testing.assert_allclose(mesh.vertex_normals, np.tile([0.0, 0.0, 1.0], (4, 1)))

    def test_computed_normals_are_unit_length(self):
        lengths = np.linalg.norm(uv_sphere(1.0, 16, 32).vertex_normals, axis=1)
        self.assertTrue(np.all(np.abs(lengths - 1.0) < 1e-6))

    def test_ply_face_index_out_of_range(self):
        text = (
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
            "element face 2\nproperty list uchar int vertex_indices\nend_header\n"
            "0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n3 0 1 7\n"
        )
        with self.assertRaises(MeshParseError) as ctx:
            load_mesh(self.write('bad.ply', text))
        self.assertIn('cara 1', str(ctx.exception))
        self.assertEqual(ctx.exception.line, 14)

    def test_ascii_ply_with_extra_properties(self):
        text = (
            "ply\nformat ascii 1.0\ncomment test\nelement vertex 4\nproperty float x\nproperty float y\n"
            "property float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n0 0 0 255\n1 0 0 255\n1 1 0 255\n0 1 0 255\n4 0 1 2 3\n"
        )
        mesh = load_mesh(self.write('quad.ply', text))
        self.assertEqual(mesh.face_count, 2)

    def test_binary_ply_round_trip(self):
        original = uv_sphere(2.0, 8, 16)
        path = save_ply(original, self.root / 'sphere.ply')
        loaded = load_mesh(path)
        np.testing.assert_array_equal(loaded.vertices, original.vertices)
        np.testing.assert_array_equal(loaded.faces, original.faces)
        np.testing.assert_allclose(loaded.vertex_normals, original.vertex_normals, atol=1e-12)

    def test_binary_ply_bad_index_reports_offset(self):
        mesh = plane(1.0, 1)
        path = save_ply(mesh, self.root / 'p.ply')
        payload = bytearray(path.read_bytes())
        payload[-4:] = (99).to_bytes(4, 'little')
        path.write_bytes(bytes(payload))
        with self.assertRaises(MeshParseError) as ctx:
            load_mesh(path)
        self.assertIn('cara 1', str(ctx.exception))
        self.assertIsNotNone(ctx.exception.offset)

    def test_degenerate_faces_are_dropped(self):
        with self.assertLogs('apps.meshlight.mesh', level='WARNING') as logs:
            mesh = Mesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], [[0, 1, 2], [0, 1, 3]])
        self.assertEqual(mesh.face_count, 1)
        self.assertIn('1 caras degeneradas', logs.output[0])

    def test_unsupported_format(self):
        with self.assertRaises(MeshParseError):
            load_mesh(self.write('m.stl', 'solid'))


class LightTest(SimpleTestCase):

    def test_head_on(self):
        np.testing.assert_allclose(light_direction(LightSpec(polar_deg=0)), [0, 0, 1], atol=1e-15)

    def test_closed_form_directions(self):
        half = math.sqrt(2) / 2
        np.testing.assert_allclose(light_direction(LightSpec(azimuth_deg=0, polar_deg=45)),
                                   [half, 0, half], atol=1e-12, rtol=0)
        np.testing.assert_allclose(light_direction(LightSpec(azimuth_deg=90, polar_deg=45)),
                                   [0, half, half], atol=1e-12, rtol=0)

    def test_unit_length(self):
        for azimuth in range(0, 360, 45):
            self.assertAlmostEqual(np.linalg.norm(light_direction(LightSpec(azimuth_deg=azimuth))), 1.0, places=12)

    def test_invalid_coefficients(self):
        with self.assertRaises(ConfigError):
            LightSpec(diffuse=1.5)
        with self.assertRaises(ConfigError):
            LightSpec(shininess=0)


class PhongTest(SimpleTestCase):
    config = RenderConfig(width=64, height=64, background_gray=17)

    def light(self, polar):
        return LightSpec(azimuth_deg=0, polar_deg=polar, ambient=0.1, diffuse=0.8, specular=0.0)

    def test_flat_plane_head_on(self):
        image = render_phong(plane(1.0, 4), self.light(0), self.config)
        self.assertTrue(np.all(image[4:60, 4:60] == 230))

    def test_flat_plane_grazing(self):
        image = render_phong(plane(1.0, 4), self.light(90), self.config)
        self.assertTrue(np.all(image[4:60, 4:60] == 26))

    def test_background(self):
        image = render_phong(plane(1.0, 1), self.light(0), self.config)
        self.assertEqual(image[0, 0], 17)
        self.assertEqual(image.dtype, np.uint8)
        tiny = render_phong(plane(1.0, 1), self.light(0), RenderConfig(width=64, height=64, background_gray=9, fill=0.1))
        self.assertTrue(np.all(tiny[:20] == 9))

    def test_lambert_sphere(self):
        config = RenderConfig(width=128, height=128)
        light = LightSpec(azimuth_deg=30, polar_deg=40, ambient=0.1, diffuse=0.8, specular=0.0)
        image = render_phong(uv_sphere(1.0, 64, 128), light, config)
        scale = 0.95 * 128 / 2
        rows, cols = np.mgrid[0:128, 0:128]
        x = (cols + 0.5 - 64) / scale
        y = -(rows + 0.5 - 64) / scale
        interior = x * x + y * y < 0.85 ** 2
        normals = np.stack([x, y, np.sqrt(np.clip(1 - x * x - y * y, 0, 1))], axis=-1)[interior]
        expected = quantize(0.1 + 0.8 * np.maximum(normals @ light_direction(light), 0))
        diff = np.abs(image[interior].astype(int) - expected.astype(int))
        self.assertLessEqual(diff.max(), 2)

    def test_azimuth_wraps(self):
        mesh = uv_sphere(1.0, 16, 32)
        config = RenderConfig(width=48, height=48)
        first = render_phong(mesh, LightSpec(azimuth_deg=30), config)
        wrapped = render_phong(mesh, LightSpec(azimuth_deg=390), config)
        self.assertEqual(first.tobytes(), wrapped.tobytes())

    def test_deterministic_bytes(self):
        mesh = groove_mesh()
        config = RenderConfig(width=40, height=40)
        self.assertEqual(render_phong(mesh, LightSpec(), config).tobytes(),
                         render_phong(mesh, LightSpec(), config).tobytes())

    def test_front_triangle_wins(self):
        vertices = np.array([[0, 0, 0], [10, 0, 0], [0, 10, 0], [1, 1, 1], [4, 1, 1], [1, 4, 1]], dtype=float)
        screen, depth = vertices[:, :2] * 6, vertices[:, 2]
        small_only = rasterize(screen, depth, np.array([[3, 4, 5]]), 64, 64)
        self.assertGreater(len(small_only.pixels), 0)
        for faces, small_index in (([[0, 1, 2], [3, 4, 5]], 1), ([[3, 4, 5], [0, 1, 2]], 0)):
            fragments = rasterize(screen, depth, np.array(faces), 64, 64)
            winners = dict(zip(fragments.pixels.tolist(), fragments.faces.tolist()))
            self.assertTrue(all(winners[p] == small_index for p in small_only.pixels.tolist()))

    def test_back_side_sees_rotated_mesh(self):
        mesh = grid_mesh(np.zeros((3, 3)))
        config = RenderConfig(width=16, height=16, side='back')
        image = render_phong(mesh, LightSpec(polar_deg=0, specular=0.0), config)
        # normales hacia −z tras el giro: solo luz ambiente
        self.assertTrue(np.all(image[4:12, 4:12] == quantize(np.array([0.1]))[0]))


class OrbitTest(SimpleTestCase):
    config = RenderConfig(width=48, height=48)

    def test_eight_angles_in_order(self):
        renders = orbit_augment(cone(), self.config)
        self.assertEqual([light.azimuth_deg for _, light in renders], [0, 45, 90, 135, 180, 225, 270, 315])
        self.assertTrue(all(light.polar_deg == 45 for _, light in renders))

    def test_symmetric_disc_gives_identical_images(self):
        renders = orbit_augment(disc(1.0, 48, 4), self.config)
        self.assertEqual(len(renders), 8)
        first = renders[0][0].tobytes()
        self.assertTrue(all(image.tobytes() == first for image, _ in renders))

    def test_custom_angles(self):
        renders = orbit_augment(disc(), self.config, azimuths=[90, 0], polar_deg=30)
        self.assertEqual([(l.azimuth_deg, l.polar_deg) for _, l in renders], [(0, 30), (90, 30)])


def brute_force_descriptor(mesh, radii):
    total = np.zeros(len(mesh.vertices))
    for radius in radii:
        for i, point in enumerate(mesh.vertices):
            near = np.linalg.norm(mesh.vertices - point, axis=1) <= radius
            total[i] += 1.0 - (mesh.vertex_normals[near] @ mesh.vertex_normals[i]).mean()
    total /= len(radii)
    spread = total.max() - total.min()
    return np.zeros_like(total) if spread <= 1e-15 else (total - total.min()) / spread


class CurvatureTest(SimpleTestCase):
    config = RenderConfig(width=66, height=66)

    def test_flat_plane_is_uniform(self):
        mesh = plane(8.0, 8)
        np.testing.assert_array_equal(curvature_descriptor(mesh, [1.5]), 0.0)
        image = render_curvature(mesh, [1.5], self.config)
        self.assertTrue(np.all(image[5:60, 5:60] == 255))

    def test_descriptor_matches_direct_computation(self):
        mesh = groove_mesh()
        np.testing.assert_allclose(curvature_descriptor(mesh, [1.5, 3.0]),
                                   brute_force_descriptor(mesh, [1.5, 3.0]), atol=1e-12)

    def test_groove_renders_darker(self):
        image = render_curvature(groove_mesh(), [1.5, 3.0], self.config).astype(float)
        # el surco está en x = 16 de 0..32: columnas centrales de la imagen
        groove = image[10:56, 31:35].mean()
        flat = np.concatenate([image[10:56, 6:14].ravel(), image[10:56, 52:60].ravel()]).mean()
        self.assertLess(groove, flat)

    def test_repeated_radius_equals_single(self):
        mesh = groove_mesh()
        np.testing.assert_array_equal(curvature_descriptor(mesh, [2.0]), curvature_descriptor(mesh, [2.0, 2.0]))

    def test_translation_invariance(self):
        mesh = groove_mesh()
        moved = mesh.translated([8.0, -4.0, 2.0])
        np.testing.assert_array_equal(render_curvature(mesh, [1.5, 3.0], self.config),
                                      render_curvature(moved, [1.5, 3.0], self.config))

    def test_invalid_radii(self):
        with self.assertRaises(ConfigError):
            curvature_descriptor(plane(), [])
        with self.assertRaises(ConfigError):
            curvature_descriptor(plane(), [0.0])


class MixedTest(SimpleTestCase):

    def test_blend_endpoints_and_midpoint(self):
        phong = np.array([[100, 7]], dtype=np.uint8)
        curvature = np.array([[200, 250]], dtype=np.uint8)
        np.testing.assert_array_equal(render_mixed(phong, curvature, 0.0), phong)
        np.testing.assert_array_equal(render_mixed(phong, curvature, 1.0), curvature)
        self.assertEqual(render_mixed(phong, curvature, 0.5)[0, 0], 150)

    def test_size_mismatch(self):
        with self.assertRaises(ConfigError):
            render_mixed(np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8), 0.5)


class RenderingServiceTest(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.meshes = self.root / 'meshes'
        save_ply(groove_mesh(9, 4.0, 2.0), self.meshes / 'tab1.ply')
        save_ply(disc(4.0, 16, 2), self.meshes / 'tab2.ply')

    def tearDown(self):
        self.tmp.cleanup()

    def settings(self, **kwargs):
        return RenderSettings(config=RenderConfig(width=24, height=24), curvature_radii=(1.0,), **kwargs)

    def test_ia_vl_renders_every_side_and_angle(self):
        manifest = RenderingService.render_directory(self.meshes, self.root / 'out', self.settings(ia=True))
        self.assertEqual(len(manifest['images']), 2 * 2 * 8)
        self.assertTrue((self.root / 'out' / 'tab1_front_az0_pol45.png').exists())
        self.assertTrue((self.root / 'out' / 'tab2_back_az315_pol45.png').exists())
        stored = load_json(self.root / 'out' / 'manifest.json')
        self.assertEqual(stored['images'][0]['light']['polar_deg'], 45.0)

    def test_mixed_blends_vl_and_msii(self):
        out = self.root / 'out'
        RenderingService.render_directory(self.meshes, out / 'vl', self.settings(render_type='vl', sides=('front',)))
        RenderingService.render_directory(self.meshes, out / 'msii', self.settings(render_type='msii', sides=('front',)))
        RenderingService.render_directory(self.meshes, out / 'mix', self.settings(render_type='mixed', sides=('front',)))
        vl = load_image(out / 'vl' / 'tab1_front_az135_pol45.png')
        msii = load_image(out / 'msii' / 'tab1_front_msii.png')
        mixed = load_image(out / 'mix' / 'tab1_front_az135_pol45.png')
        np.testing.assert_array_equal(mixed, render_mixed(vl, msii, 0.5))

    def test_repeated_runs_are_byte_identical(self):
        first = RenderingService.render_directory(self.meshes, self.root / 'a', self.settings())
        second = RenderingService.render_directory(self.meshes, self.root / 'b', self.settings())
        self.assertEqual(first, second)
        for entry in first['images']:
            self.assertEqual((self.root / 'a' / entry['file']).read_bytes(),
                             (self.root / 'b' / entry['file']).read_bytes())

    def test_empty_directory(self):
        (self.root / 'empty').mkdir()
        with self.assertRaises(CuneispotError):
            RenderingService.render_directory(self.root / 'empty', self.root / 'out', self.settings())

    def test_broken_mesh_is_counted(self):
        (self.meshes / 'broken.obj').write_text("v 0 0 0\nf 1 2 3\n")
        manifest = RenderingService.render_directory(self.meshes, self.root / 'out', self.settings())
        self.assertEqual([f['mesh'] for f in manifest['failures']], ['broken.obj'])
        self.assertEqual(len(manifest['images']), 4)
