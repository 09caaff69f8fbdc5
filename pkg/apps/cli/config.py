"""
RunConfig: documento JSON de una corrida, validado con serializers de DRF.

Cada sección tiene valores por defecto; las claves desconocidas se rechazan en
cualquier nivel. Los flags de la línea de comandos pisan los valores del
archivo y cada comando guarda la configuración resuelta junto a sus salidas.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from django.conf import settings
from rest_framework import serializers

from apps.core.exceptions import ConfigError
from apps.core.serializers import StrictSerializer, validate_payload
from apps.core.utils import dump_json
from apps.datapipe.services.photo import PhotoSettings
from apps.detector.config import PRESETS, DetectorConfig
from apps.meshlight.raster import DEFAULT_AZIMUTHS, LightSpec, RenderConfig
from apps.meshlight.services.rendering import RENDER_TYPES, RenderSettings
from apps.training.assignment import ASSIGNMENT_MODES, LossWeights
from apps.training.services.experiments import ExperimentSettings
from apps.training.services.training import DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, TrainSettings

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = 'resolved_config.json'


class PathsSerializer(StrictSerializer):
    data_root = serializers.CharField(default=lambda: settings.CUNEISPOT_DATA_ROOT)
    output_dir = serializers.CharField(default=lambda: settings.CUNEISPOT_OUTPUT_DIR)


class DetectorSectionSerializer(StrictSerializer):
    preset = serializers.ChoiceField(choices=PRESETS, default='toy')
    k = serializers.IntegerField(min_value=3, default=9)
    stride = serializers.IntegerField(default=8)
    head_channels = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    input_dropout = serializers.FloatField(min_value=0, max_value=0.99, default=0.2)
    first_conv_dropout = serializers.FloatField(min_value=0, max_value=0.99, default=0.2)
    later_dropout = serializers.FloatField(min_value=0, max_value=0.99, default=0.5)

    def validate_stride(self, value):
        if value != 8:
            raise serializers.ValidationError('Los presets solo producen paso 8.')
        return value


class LossSerializer(StrictSerializer):
    lambda_loc1 = serializers.FloatField(min_value=0, default=50.0)
    lambda_loc2 = serializers.FloatField(min_value=0, default=100.0)
    lambda_class = serializers.FloatField(min_value=0, default=1.0)
    theta_tp = serializers.FloatField(default=0.7)
    theta_fp = serializers.FloatField(default=0.6)
    assignment_mode = serializers.CharField(default='paper_literal')
    focal_alpha = serializers.FloatField(min_value=0, max_value=1, default=0.25)
    focal_gamma = serializers.FloatField(min_value=0, default=2.0)

    def validate_assignment_mode(self, value):
        value = value.replace('-', '_')
        if value not in ASSIGNMENT_MODES:
            raise serializers.ValidationError(f"Use uno de {', '.join(ASSIGNMENT_MODES)}.")
        return value

    def validate(self, data):
        if not 0 < data['theta_fp'] < data['theta_tp'] < 1:
            raise serializers.ValidationError('Se requiere 0 < theta_fp < theta_tp < 1.')
        return data


class OptimizerSerializer(StrictSerializer):
    learning_rate = serializers.FloatField(min_value=0, default=5e-4)
    momentum = serializers.FloatField(min_value=0, max_value=1, default=0.9)
    weight_decay = serializers.FloatField(min_value=0, default=1e-5)


class TrainingSectionSerializer(StrictSerializer):
    epochs = serializers.IntegerField(min_value=0, allow_null=True, default=None)
    batch_size = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    precision = serializers.ChoiceField(choices=(32, 64), default=64)
    score_floor = serializers.FloatField(min_value=0, max_value=1, default=0.05)


class TilingSerializer(StrictSerializer):
    window = serializers.IntegerField(min_value=8, default=512)
    stride = serializers.IntegerField(min_value=1, default=256)
    keep_fraction = serializers.FloatField(min_value=0, max_value=1, default=0.5)


class RenderingSerializer(StrictSerializer):
    width = serializers.IntegerField(min_value=1, default=512)
    height = serializers.IntegerField(min_value=1, default=512)
    background_gray = serializers.IntegerField(min_value=0, max_value=255, default=0)
    ambient = serializers.FloatField(min_value=0, max_value=1, default=0.1)
    diffuse = serializers.FloatField(min_value=0, max_value=1, default=0.8)
    specular = serializers.FloatField(min_value=0, max_value=1, default=0.1)
    shininess = serializers.FloatField(min_value=0.001, default=5.0)
    vl_azimuth = serializers.FloatField(default=135.0)
    vl_polar = serializers.FloatField(min_value=0, max_value=90, default=45.0)
    mixed_alpha = serializers.FloatField(min_value=0, max_value=1, default=0.5)
    curvature_radii = serializers.ListField(child=serializers.FloatField(min_value=0.001), min_length=1,
                                            default=lambda: [2.0, 4.0])


class AugmentationSerializer(StrictSerializer):
    enabled = serializers.BooleanField(default=False)
    azimuths = serializers.ListField(child=serializers.FloatField(), min_length=1,
                                     default=lambda: [float(a) for a in DEFAULT_AZIMUTHS])
    polar = serializers.FloatField(min_value=0, max_value=90, default=45.0)


class SplitSectionSerializer(StrictSerializer):
    ratio = serializers.ListField(child=serializers.FloatField(min_value=0), min_length=3, max_length=3,
                                  default=lambda: [2.0, 1.0, 1.0])
    seed = serializers.IntegerField(default=0)


class EvaluationSectionSerializer(StrictSerializer):
    iou_thresholds = serializers.ListField(child=serializers.FloatField(min_value=0, max_value=1), min_length=1,
                                           default=lambda: [0.5, 0.75, 0.9])
    nms_threshold = serializers.FloatField(min_value=0, max_value=1, default=0.4)
    score_floor = serializers.FloatField(min_value=0, max_value=1, default=0.05)
    overlay_score = serializers.FloatField(min_value=0, max_value=1, default=0.5)


SECTIONS = {
    'paths': PathsSerializer,
    'detector': DetectorSectionSerializer,
    'loss': LossSerializer,
    'optimizer': OptimizerSerializer,
    'training': TrainingSectionSerializer,
    'tiling': TilingSerializer,
    'rendering': RenderingSerializer,
    'augmentation': AugmentationSerializer,
    'split': SplitSectionSerializer,
    'evaluation': EvaluationSectionSerializer,
}


class RunConfigSerializer(StrictSerializer):
    paths = PathsSerializer()
    detector = DetectorSectionSerializer()
    loss = LossSerializer()
    optimizer = OptimizerSerializer()
    training = TrainingSectionSerializer()
    tiling = TilingSerializer()
    rendering = RenderingSerializer()
    augmentation = AugmentationSerializer()
    split = SplitSectionSerializer()
    evaluation = EvaluationSectionSerializer()
    seed = serializers.IntegerField(default=0)
    workers = serializers.IntegerField(min_value=1, default=1)

    def validate(self, attrs):
        preset = attrs['detector']['preset']
        if attrs['training'].get('epochs') is None:
            attrs['training']['epochs'] = DEFAULT_EPOCHS[preset]
        if attrs['training'].get('batch_size') is None:
            attrs['training']['batch_size'] = DEFAULT_BATCH_SIZE[preset]
        return attrs


def _plain(value: Any) -> Any:
    return json.loads(json.dumps(value))


def apply_overrides(data: Dict, overrides: Dict[str, Any]) -> Dict:
    """Aplica overrides 'seccion.clave' (o 'clave' de primer nivel); los None se ignoran."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        target = data
        *parents, key = dotted.split('.')
        for parent in parents:
            if not isinstance(target.get(parent, {}), dict):
                raise ConfigError(f"'{parent}' no es una sección")
            target = target.setdefault(parent, {})
        target[key] = value
    return data


class RunConfig:
    """Configuración validada y resuelta de una corrida."""

    def __init__(self, data: Dict):
        self.data = data

    def __getitem__(self, section: str) -> Any:
        return self.data[section]

    @classmethod
    def from_dict(cls, data: Optional[Dict] = None, overrides: Optional[Dict[str, Any]] = None,
                  source: str = '') -> 'RunConfig':
        data = _plain(data or {})
        if not isinstance(data, dict):
            raise ConfigError(f"{source or 'RunConfig'}: se esperaba un objeto JSON")
        apply_overrides(data, overrides or {})
        for section in SECTIONS:
            data.setdefault(section, {})
        validated = validate_payload(RunConfigSerializer, data, ConfigError, source or 'RunConfig')
        return cls(_plain(validated))

    @classmethod
    def load(cls, path=None, overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        if path is None:
            return cls.from_dict({}, overrides)
        path = Path(path)
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                data = json.load(handle)
        except OSError as e:
            raise ConfigError(f"No se pudo leer {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: JSON inválido ({e})") from e
        return cls.from_dict(data, overrides, source=str(path))

    def write(self, out_dir) -> Path:
        path = dump_json(self.data, Path(out_dir) / RESOLVED_CONFIG_NAME)
        logger.debug(f"Configuración resuelta en {path}")
        return path

    # --- objetos de dominio ---

    def detector_config(self, input_size: Optional[int] = None) -> DetectorConfig:
        section = self.data['detector']
        return DetectorConfig(
            preset=section['preset'],
            k=section['k'],
            stride=section['stride'],
            input_size=input_size or self.data['tiling']['window'],
            head_channels=section['head_channels'],
            input_dropout=section['input_dropout'],
            first_conv_dropout=section['first_conv_dropout'],
            later_dropout=section['later_dropout'],
            seed=self.data['seed'],
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.data['loss'])

    def train_settings(self) -> TrainSettings:
        training = self.data['training']
        return TrainSettings(
            epochs=training['epochs'],
            batch_size=training['batch_size'],
            precision=int(training['precision']),
            score_floor=training['score_floor'],
            nms_threshold=self.data['evaluation']['nms_threshold'],
            seed=self.data['seed'],
            **self.data['optimizer'],
        )

    def light(self) -> LightSpec:
        rendering = self.data['rendering']
        return LightSpec(
            azimuth_deg=rendering['vl_azimuth'], polar_deg=rendering['vl_polar'],
            ambient=rendering['ambient'], diffuse=rendering['diffuse'],
            specular=rendering['specular'], shininess=rendering['shininess'],
        )

    def render_config(self) -> RenderConfig:
        rendering = self.data['rendering']
        return RenderConfig(width=rendering['width'], height=rendering['height'],
                            background_gray=rendering['background_gray'])

    def render_settings(self, render_type: str, ia: Optional[bool] = None) -> RenderSettings:
        if render_type not in RENDER_TYPES:
            raise ConfigError(f"Tipo de render desconocido '{render_type}'")
        augmentation = self.data['augmentation']
        return RenderSettings(
            render_type=render_type,
            config=self.render_config(),
            light=self.light(),
            ia=augmentation['enabled'] if ia is None else ia,
            azimuths=tuple(augmentation['azimuths']),
            ia_polar=augmentation['polar'],
            mixed_alpha=self.data['rendering']['mixed_alpha'],
            curvature_radii=tuple(self.data['rendering']['curvature_radii']),
        )

    def tiling_params(self) -> Dict:
        tiling = self.data['tiling']
        return {
            'window': tiling['window'],
            'stride': tiling['stride'],
            'keep_fraction': tiling['keep_fraction'],
            'background': self.data['rendering']['background_gray'],
        }

    def experiment_settings(self) -> ExperimentSettings:
        tiling = self.data['tiling']
        return ExperimentSettings(
            render=self.render_config(),
            light=self.light(),
            azimuths=tuple(self.data['augmentation']['azimuths']),
            ia_polar=self.data['augmentation']['polar'],
            window=tiling['window'],
            stride=tiling['stride'],
            keep_fraction=tiling['keep_fraction'],
            split_ratio=tuple(self.data['split']['ratio']),
            split_seed=self.data['split']['seed'],
            photo=PhotoSettings(seed=self.data['split']['seed']),
            workers=self.data['workers'],
        )
