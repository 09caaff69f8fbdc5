"""
Contenedores de parámetros sobre las operaciones de `ops`.
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from apps.core.exceptions import CheckpointError, ParameterError

from . import ops
from .tensor import Tensor, default_dtype


class Module:
    """
    Base de capas: descubre parámetros, buffers y submódulos por atributos.
    """

    training = True

    def _buffer_names(self) -> Tuple[str, ...]:
        return ()

    def children(self) -> Iterator[Tuple[str, 'Module']]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def modules(self) -> Iterator['Module']:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{name}", value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names():
            yield f"{prefix}{name}", getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(param.size for param in self.parameters()))

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def train(self, mode: bool = True) -> 'Module':
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict()
        for name, param in self.named_parameters():
            state[name] = param.data.copy()
        for name, buffer in self.named_buffers():
            state[name] = buffer.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [name for name in list(expected) + list(buffers) if name not in state]
        unexpected = [name for name in state if name not in expected and name not in buffers]
        if strict and (missing or unexpected):
            raise CheckpointError(f"Pesos incompatibles: faltan {missing}, sobran {unexpected}")
        for name, param in expected.items():
            if name in state:
                values = np.asarray(state[name])
                if values.shape != param.shape:
                    raise CheckpointError(f"{name}: forma {values.shape} en archivo, {param.shape} en modelo")
                param.data[...] = values
        for name, buffer in buffers.items():
            if name in state:
                values = np.asarray(state[name])
                if values.shape != buffer.shape:
                    raise CheckpointError(f"{name}: forma {values.shape} en archivo, {buffer.shape} en modelo")
                buffer[...] = values

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    """Convolución con inicialización He, normal de desvío `std` o en cero."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True, init: str = 'he',
                 rng: Optional[np.random.Generator] = None, std: float = 0.01):
        if init not in ('he', 'normal', 'zeros'):
            raise ParameterError(f"Conv2d: init desconocido '{init}'")
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        dtype = default_dtype()
        if init == 'he':
            rng = rng or np.random.default_rng(0)
            fan_in = in_channels * kernel_size * kernel_size
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif init == 'normal':
            rng = rng or np.random.default_rng(0)
            weight = rng.normal(0.0, std, size=shape)
        else:
            weight = np.zeros(shape)
        self.weight = Tensor(weight, requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True, dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        dtype = default_dtype()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _buffer_names(self):
        return ('running_mean', 'running_var')

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              eps=self.eps, training=self.training, momentum=self.momentum)


class Dropout(Module):
    """Dropout con generador propio; `reseed` lo reinicia para corridas deterministas."""

    def __init__(self, p: float, seed: int = 0):
        if not 0 <= p < 1:
            raise ParameterError(f"Dropout: p debe estar en [0, 1), recibió {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.p, self.training, self.rng)
