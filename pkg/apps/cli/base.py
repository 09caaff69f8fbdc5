import logging
from pathlib import Path
from typing import Any, Dict

from django.core.management.base import BaseCommand, CommandError

from apps.core.exceptions import CuneispotError

from .config import RunConfig

logger = logging.getLogger(__name__)


class CuneispotCommand(BaseCommand):
    """
    Base de los verbos de cuneispot: flags comunes, carga de RunConfig y
    conversión de errores de dominio en CommandError (código de salida 1).
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Archivo JSON de RunConfig')
        parser.add_argument('--seed', type=int, help='Semilla (pisa RunConfig.seed)')
        parser.add_argument('--workers', type=int, help='Procesos en paralelo (pisa RunConfig.workers)')
        parser.add_argument('--out', help='Directorio de salida')

    def config_overrides(self, options) -> Dict[str, Any]:
        return {}

    def load_config(self, options) -> RunConfig:
        overrides = {'seed': options.get('seed'), 'workers': options.get('workers')}
        overrides.update(self.config_overrides(options))
        return RunConfig.load(options.get('config'), overrides)

    def output_dir(self, options, config: RunConfig, default: str) -> Path:
        if options.get('out'):
            return Path(options['out'])
        return Path(config['paths']['output_dir']) / default

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except CuneispotError as e:
            logger.error(str(e))
            raise CommandError(str(e)) from e

    def run(self, **options):
        raise NotImplementedError
