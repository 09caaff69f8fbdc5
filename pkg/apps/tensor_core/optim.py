from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from apps.core.exceptions import DimensionError, ParameterError

from .tensor import Tensor


@dataclass
class SgdState:
    """
    Estado de SGD con momento y weight decay; una velocidad por parámetro.
    """
    learning_rate: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocities: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        for name in ('learning_rate', 'momentum', 'weight_decay'):
            if getattr(self, name) < 0:
                raise ParameterError(f"SgdState: {name} debe ser no negativo, recibió {getattr(self, name)}")

    @classmethod
    def for_parameters(cls, params: Sequence[Tensor], **hyper) -> 'SgdState':
        state = cls(**hyper)
        state.velocities = [np.zeros_like(param.data) for param in params]
        return state


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SgdState) -> Sequence[Tensor]:
    """
    v ← momentum·v + grad + weight_decay·param;  param ← param − lr·v.

    Actualiza `param.data` en el lugar y devuelve los mismos parámetros.
    """
    if not state.velocities:
        state.velocities = [np.zeros_like(param.data) for param in params]
    if len(params) != len(grads) or len(params) != len(state.velocities):
        raise DimensionError(
            f"sgd_step: {len(params)} parámetros, {len(grads)} gradientes, {len(state.velocities)} velocidades"
        )
    for param, grad, velocity in zip(params, grads, state.velocities):
        if grad.shape != param.shape or velocity.shape != param.shape:
            raise DimensionError(f"sgd_step: parámetro {param.shape}, gradiente {grad.shape}")
        velocity *= state.momentum
        velocity += grad + state.weight_decay * param.data
        param.data -= state.learning_rate * velocity
    return params
