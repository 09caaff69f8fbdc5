from pathlib import Path
from tempfile import TemporaryDirectory

from django.conf import settings
from django.test import SimpleTestCase

from apps.core.exceptions import MeshParseError
from apps.core.utils import config_hash, dump_json, load_json, run_parallel


def _square(value):
    if value < 0:
        raise ValueError('negativo')
    return value * value


class UtilsTest(SimpleTestCase):

    def test_dump_json_is_deterministic(self):
        with TemporaryDirectory() as tmp:
            first = dump_json({'b': 1, 'a': [1, 2]}, Path(tmp) / 'a.json').read_bytes()
            second = dump_json({'a': [1, 2], 'b': 1}, Path(tmp) / 'b.json').read_bytes()
            self.assertEqual(first, second)
            self.assertEqual(load_json(Path(tmp) / 'a.json'), {'a': [1, 2], 'b': 1})

    def test_config_hash_ignores_key_order(self):
        self.assertEqual(config_hash({'x': 1, 'y': 2}), config_hash({'y': 2, 'x': 1}))
        self.assertNotEqual(config_hash({'x': 1}), config_hash({'x': 2}))

    def test_run_parallel_keeps_order_and_collects_errors(self):
        results = run_parallel(_square, [3, -1, 2], workers=1)
        self.assertEqual([r[0] for r in results], [3, -1, 2])
        self.assertEqual(results[0][1], 9)
        self.assertIsInstance(results[1][2], ValueError)
        self.assertEqual(results[2][1], 4)

    def test_mesh_parse_error_message_has_location(self):
        error = MeshParseError('índice fuera de rango', path='a.ply', line=12)
        self.assertIn('a.ply', str(error))
        self.assertIn('línea 12', str(error))


class LoggingSettingsTest(SimpleTestCase):

    def test_every_formatter_and_handler_is_used(self):
        config = settings.LOGGING
        used_formatters = {handler['formatter'] for handler in config['handlers'].values()}
        self.assertEqual(used_formatters, set(config['formatters']))
        used_handlers = set(config['root']['handlers'])
        for logger_config in config['loggers'].values():
            used_handlers.update(logger_config['handlers'])
        self.assertEqual(used_handlers, set(config['handlers']))
