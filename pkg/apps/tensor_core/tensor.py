"""
Tensor con diferenciación automática en modo reverso.

Cada operación guarda sus padres y un cierre `_backward` que reparte el
gradiente de la salida hacia ellos. `Tensor.backward()` recorre el grafo en
orden topológico inverso y acumula en `.grad`.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from apps.core.exceptions import DimensionError, NonFiniteError, TensorError

logger = logging.getLogger(__name__)

_precision = threading.local()


def default_dtype() -> np.dtype:
    """Precisión activa: float64 salvo que `precision()` indique otra."""
    return getattr(_precision, 'dtype', np.dtype(np.float64))


@contextmanager
def precision(dtype):
    """
    Cambia la precisión por defecto dentro del bloque (por hilo).

    Pruebas y oráculos corren en float64; el entrenamiento puede usar float32.
    """
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TensorError(f"Precisión no soportada: {dtype}")
    previous = default_dtype()
    _precision.dtype = dtype
    try:
        yield dtype
    finally:
        _precision.dtype = previous


def check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NonFiniteError(f"{where}: {bad} valores no finitos")


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Suma el gradiente sobre los ejes que se expandieron por broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """
    Arreglo denso con gradiente opcional.

    `grad` existe solo si `requires_grad`; tiene la misma forma que `data`.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else default_dtype()
        values = np.array(data, dtype=dtype, copy=True)
        check_finite(values, 'Tensor')
        self.data = values
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(values) if self.requires_grad else None
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ''

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence['Tensor'], op: str,
                backward: Callable[[np.ndarray], None]) -> 'Tensor':
        """Construye la salida de una operación y la engancha al grafo."""
        check_finite(data, op)
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out._op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.grad = np.zeros_like(out.data)
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        else:
            out.grad = None
            out._parents = ()
            out._backward = None
        return out

    # --- propiedades ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() requiere un solo elemento, forma {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # --- gradiente ---

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            return
        if grad.shape != self.grad.shape:
            raise DimensionError(f"Gradiente {grad.shape} no coincide con tensor {self.grad.shape}")
        self.grad += grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Propaga gradientes desde este tensor hasta las hojas.

        Sin `grad` explícito el tensor debe ser escalar. El grafo intermedio se
        libera al terminar.
        """
        if not self.requires_grad:
            raise TensorError("backward() sobre un tensor sin requires_grad")
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() implícito requiere escalar, forma {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        check_finite(grad, 'backward')
        self.accumulate(grad)

        for node in reversed(_topological_order(self)):
            if node._backward is None:
                continue
            check_finite(node.grad, f"grad de {node._op}")
            node._backward(node.grad)
            node._backward = None
            node._parents = ()

    # --- aritmética ---

    def _lift(self, other) -> 'Tensor':
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other), dtype=self.dtype)

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(grad):
            a.accumulate(unbroadcast(grad, a.shape))
            b.accumulate(unbroadcast(grad, b.shape))

        return Tensor.from_op(a.data + b.data, (a, b), 'add', backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(grad):
            a.accumulate(-grad)

        return Tensor.from_op(-a.data, (a,), 'neg', backward)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(grad):
            if a.requires_grad:
                a.accumulate(unbroadcast(grad * b.data, a.shape))
            if b.requires_grad:
                b.accumulate(unbroadcast(grad * a.data, b.shape))

        return Tensor.from_op(a.data * b.data, (a, b), 'mul', backward)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TensorError("División solo por escalares constantes")
        return self * (1.0 / float(scalar))

    # --- forma ---

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            out = a.data.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"reshape {a.shape} -> {shape}: {e}") from e

        def backward(grad):
            a.accumulate(grad.reshape(a.shape))

        return Tensor.from_op(out, (a,), 'reshape', backward)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        a = self

        def backward(grad):
            a.accumulate(grad.transpose(inverse))

        return Tensor.from_op(a.data.transpose(axes), (a,), 'transpose', backward)

    def __getitem__(self, index) -> 'Tensor':
        if isinstance(index, Tensor):
            index = index.data.astype(np.int64)
        a = self

        def backward(grad):
            full = np.zeros_like(a.data)
            np.add.at(full, index, grad)
            a.accumulate(full)

        return Tensor.from_op(np.array(a.data[index]), (a,), 'getitem', backward)

    # --- reducciones ---

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        a = self

        def backward(grad):
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            a.accumulate(np.broadcast_to(grad, a.shape).copy())

        return Tensor.from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), 'sum', backward)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def _extreme(self, axis: int, pick: Callable, op: str) -> 'Tensor':
        axis = axis % self.ndim
        a = self
        index = np.expand_dims(pick(a.data, axis=axis), axis)
        out = np.take_along_axis(a.data, index, axis=axis).squeeze(axis)

        def backward(grad):
            full = np.zeros_like(a.data)
            np.put_along_axis(full, index, np.expand_dims(grad, axis), axis=axis)
            a.accumulate(full)

        return Tensor.from_op(out, (a,), op, backward)

    def max(self, axis: int) -> 'Tensor':
        """
        Máximo sobre un eje; con empates el gradiente va al último índice.

        `min` lo manda al primero, así un conjunto de puntos coincidentes
        se abre hacia ambos lados en lugar de anular sus gradientes.
        """
        return self._extreme(axis, _last_argmax, 'max')

    def min(self, axis: int) -> 'Tensor':
        return self._extreme(axis, np.argmin, 'min')


def _last_argmax(values: np.ndarray, axis: int) -> np.ndarray:
    flipped = np.flip(values, axis=axis)
    return values.shape[axis] - 1 - np.argmax(flipped, axis=axis)


def _topological_order(root: Tensor):
    """Orden posterior iterativo: cada nodo aparece después de sus padres."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)
