"""
Backbone + cabeza RepPoints sobre el motor de tensores.

La cabeza tiene dos subredes no compartidas: la de localización emite los
desplazamientos de P1; los puntos de P1 sirven de posiciones de muestreo
para la rama de clasificación y para la de refinamiento, que emite P2 = P1 + Δ'.
"""

import logging
import math
from dataclasses import dataclass
from typing import List

import numpy as np

from apps.core.exceptions import DimensionError
from apps.tensor_core import ops
from apps.tensor_core.layers import BatchNorm2d, Conv2d, Dropout, Module
from apps.tensor_core.tensor import Tensor

from .config import FULL_STAGE_STRIDES, DetectorConfig
from .geometry import offsets_to_points, pseudo_boxes

logger = logging.getLogger(__name__)

# logits iniciales cercanos al sesgo del prior
CLS_INIT_STD = 0.01


@dataclass
class HeadOutput:
    """
    Salida por celda: p1_offsets (N, 2k, H, W), p2_offsets (N, 2k, H, W)
    relativos a P1, y logits (N, 1, H, W).
    """
    p1_offsets: Tensor
    p2_offsets: Tensor
    logits: Tensor

    @property
    def k(self) -> int:
        return self.p1_offsets.shape[1] // 2

    @property
    def feature_shape(self):
        return self.logits.shape[2:]

    def p1_points(self) -> Tensor:
        return offsets_to_points(self.p1_offsets)

    def p2_points(self, p1_points: Tensor = None) -> Tensor:
        return offsets_to_points(self.p2_offsets, base=p1_points if p1_points is not None else self.p1_points())

    def p1_boxes(self) -> Tensor:
        return pseudo_boxes(self.p1_points())

    def p2_boxes(self) -> Tensor:
        return pseudo_boxes(self.p2_points())


def sample_at_points(feature: Tensor, points: Tensor) -> Tensor:
    """Muestreo bilineal en los k puntos de cada celda y media sobre k: (N, C, H, W)."""
    n, c, h, w = feature.shape
    k = points.shape[3]
    sampled = ops.bilinear_sample(feature, points.reshape(n, h * w * k, 2))
    return sampled.reshape(n, c, h, w, k).mean(axis=4)


class ToyBackbone(Module):
    """Cuatro convoluciones 3×3, las tres primeras con paso 2, sin normalización."""

    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator):
        channels = cfg.backbone_channels
        strides = (2, 2, 2, 1)
        previous = 1
        self.convs = []
        for out_channels, stride in zip(channels, strides):
            self.convs.append(Conv2d(previous, out_channels, 3, stride=stride, rng=rng))
            previous = out_channels
        self.input_dropout = Dropout(cfg.input_dropout)
        self.dropouts = [Dropout(cfg.first_conv_dropout)] + [Dropout(cfg.later_dropout) for _ in channels[1:-1]]
        self.out_channels = previous

    def forward(self, x: Tensor) -> Tensor:
        x = self.input_dropout(x)
        for index, conv in enumerate(self.convs):
            x = ops.relu(conv(x))
            if index < len(self.dropouts):
                x = self.dropouts[index](x)
        return x


class ResidualBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride=stride, bias=False, rng=rng)
            self.shortcut_bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        out = ops.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return ops.relu(out + identity)


class FullBackbone(Module):
    """Stem con paso 2 y tres etapas residuales con pasos (2, 2, 1), estilo ResNet18 hasta c4."""

    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator):
        stem_channels, *stage_channels = cfg.backbone_channels
        self.stem = Conv2d(1, stem_channels, 3, stride=2, bias=False, rng=rng)
        self.stem_bn = BatchNorm2d(stem_channels)
        self.input_dropout = Dropout(cfg.input_dropout)
        self.stem_dropout = Dropout(cfg.first_conv_dropout)
        self.blocks = []
        self.stage_dropouts = []
        previous = stem_channels
        for channels, stride in zip(stage_channels, FULL_STAGE_STRIDES):
            for index in range(cfg.blocks_per_stage):
                self.blocks.append(ResidualBlock(previous, channels, stride if index == 0 else 1, rng))
                previous = channels
            self.stage_dropouts.append(Dropout(cfg.later_dropout))
        self.blocks_per_stage = cfg.blocks_per_stage
        self.out_channels = previous

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem_dropout(ops.relu(self.stem_bn(self.stem(self.input_dropout(x)))))
        last_stage = len(self.stage_dropouts) - 1
        for index, block in enumerate(self.blocks):
            x = block(x)
            stage, position = divmod(index, self.blocks_per_stage)
            if position == self.blocks_per_stage - 1 and stage < last_stage:
                x = self.stage_dropouts[stage](x)
        return x


class RepPointsHead(Module):
    def __init__(self, in_channels: int, cfg: DetectorConfig, rng: np.random.Generator):
        channels = cfg.head_channels
        point_channels = 2 * cfg.k
        self.k = cfg.k
        self.loc_conv = Conv2d(in_channels, channels, 3, rng=rng)
        self.cls_conv = Conv2d(in_channels, channels, 3, rng=rng)
        self.p1_out = Conv2d(channels, point_channels, 1, init='zeros')
        self.refine_conv = Conv2d(channels, channels, 1, rng=rng)
        self.p2_out = Conv2d(channels, point_channels, 1, init='zeros')
        self.cls_point_conv = Conv2d(channels, channels, 1, rng=rng)
        self.cls_out = Conv2d(channels, cfg.num_classes, 1, init='normal', std=CLS_INIT_STD, rng=rng)
        self.cls_out.bias.data[...] = -math.log((1 - cfg.prior_prob) / cfg.prior_prob)

    def forward(self, feature: Tensor) -> HeadOutput:
        loc_feature = ops.relu(self.loc_conv(feature))
        cls_feature = ops.relu(self.cls_conv(feature))

        p1_offsets = self.p1_out(loc_feature)
        p1_points = offsets_to_points(p1_offsets)

        cls_sampled = sample_at_points(cls_feature, p1_points)
        logits = self.cls_out(ops.relu(self.cls_point_conv(cls_sampled)))

        loc_sampled = sample_at_points(loc_feature, p1_points)
        p2_offsets = self.p2_out(ops.relu(self.refine_conv(loc_sampled)))
        return HeadOutput(p1_offsets, p2_offsets, logits)


class SignDetector(Module):
    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        backbone_class = ToyBackbone if cfg.preset == 'toy' else FullBackbone
        self.backbone = backbone_class(cfg, rng)
        self.head = RepPointsHead(self.backbone.out_channels, cfg, rng)
        self.reseed(cfg.seed)

    def dropouts(self) -> List[Dropout]:
        return [module for module in self.modules() if isinstance(module, Dropout)]

    def reseed(self, seed: int) -> None:
        """Reinicia los generadores de dropout; cada capa recibe su propia subsemilla."""
        for index, dropout in enumerate(self.dropouts()):
            dropout.reseed([seed, index])

    def backbone_forward(self, image: Tensor) -> Tensor:
        size = self.cfg.input_size
        if image.ndim != 4 or image.shape[1] != 1 or image.shape[2:] != (size, size):
            raise DimensionError(f"Entrada {image.shape}; se espera (N, 1, {size}, {size})")
        return self.backbone(image)

    def head_forward(self, feature: Tensor) -> HeadOutput:
        return self.head(feature)

    def forward(self, image: Tensor) -> HeadOutput:
        return self.head_forward(self.backbone_forward(image))


def build_detector(cfg: DetectorConfig) -> SignDetector:
    detector = SignDetector(cfg)
    logger.info(f"Detector {cfg.preset}: {detector.parameter_count()} parámetros, "
                f"mapa {cfg.feature_size}x{cfg.feature_size}, k={cfg.k}")
    return detector
