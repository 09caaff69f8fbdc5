from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

from apps.core.exceptions import ConfigError

PRESETS = ('toy', 'full')

# canales: toy = 4 convoluciones; full = stem + 3 etapas residuales
DEFAULT_CHANNELS = {
    'toy': (8, 16, 32, 32),
    'full': (64, 64, 128, 256),
}
DEFAULT_HEAD_CHANNELS = {'toy': 32, 'full': 128}
FULL_STAGE_STRIDES = (2, 2, 1)


@dataclass(frozen=True)
class DetectorConfig:
    """
    Configuración del detector RepPoints de una clase.

    El mapa de características siempre tiene paso 8 respecto de la entrada.
    """
    preset: str = 'toy'
    k: int = 9
    stride: int = 8
    num_classes: int = 1
    input_size: int = 512
    backbone_channels: Optional[Tuple[int, ...]] = None
    head_channels: Optional[int] = None
    blocks_per_stage: int = 2
    input_dropout: float = 0.2
    first_conv_dropout: float = 0.2
    later_dropout: float = 0.5
    prior_prob: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"Preset desconocido '{self.preset}' (use {', '.join(PRESETS)})")
        if self.backbone_channels is None:
            object.__setattr__(self, 'backbone_channels', DEFAULT_CHANNELS[self.preset])
        else:
            object.__setattr__(self, 'backbone_channels', tuple(int(c) for c in self.backbone_channels))
        if self.head_channels is None:
            object.__setattr__(self, 'head_channels', DEFAULT_HEAD_CHANNELS[self.preset])

        if self.k < 3:
            raise ConfigError(f"k debe ser ≥ 3 para que la envolvente tenga extensión, recibió {self.k}")
        if self.num_classes != 1:
            raise ConfigError(f"Solo se admite una clase, recibió num_classes={self.num_classes}")
        if self.stride != 8:
            raise ConfigError(f"Los presets producen paso 8, recibió stride={self.stride}")
        if self.input_size <= 0 or self.input_size % self.stride:
            raise ConfigError(f"input_size {self.input_size} no es múltiplo del paso {self.stride}")
        if len(self.backbone_channels) != 4 or min(self.backbone_channels) <= 0:
            raise ConfigError(f"backbone_channels necesita 4 valores positivos, recibió {self.backbone_channels}")
        if self.head_channels <= 0 or self.blocks_per_stage <= 0:
            raise ConfigError("head_channels y blocks_per_stage deben ser positivos")
        for name in ('input_dropout', 'first_conv_dropout', 'later_dropout'):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ConfigError(f"{name} debe estar en [0, 1), recibió {value}")
        if not 0 < self.prior_prob < 1:
            raise ConfigError(f"prior_prob debe estar en (0, 1), recibió {self.prior_prob}")

    @property
    def feature_size(self) -> int:
        return self.input_size // self.stride

    def as_dict(self) -> Dict:
        data = asdict(self)
        data['backbone_channels'] = list(self.backbone_channels)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'DetectorConfig':
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Claves desconocidas en la configuración del detector: {unknown}")
        return cls(**data)
