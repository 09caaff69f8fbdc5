"""
Verificación de gradientes por diferencias centrales.
"""

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckResult:
    max_relative_error: float
    per_input: List[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def _scalar(output: Tensor, projection: np.ndarray) -> Tensor:
    if output.size == 1:
        return output.reshape(())
    return (output * projection).sum()


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              tolerance: float = 1e-4, floor: float = 1e-3, seed: int = 0) -> GradcheckResult:
    """
    Compara el gradiente de backprop con diferencias centrales.

    Si `fn` no devuelve un escalar se proyecta con pesos aleatorios fijos. El
    error relativo por entrada es max|a − n| / max(floor, max|a|, max|n|).
    `fn` debe ser determinista (dropout con semilla fija).
    """
    probe = fn(*inputs)
    projection = np.random.default_rng(seed).normal(size=probe.shape)

    for tensor in inputs:
        tensor.zero_grad()
    _scalar(fn(*inputs), projection).backward()
    analytic = [tensor.grad.copy() for tensor in inputs]

    errors = []
    for tensor, exact in zip(inputs, analytic):
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            upper = _scalar(fn(*inputs), projection).item()
            flat[index] = original - h
            lower = _scalar(fn(*inputs), projection).item()
            flat[index] = original
            numeric.reshape(-1)[index] = (upper - lower) / (2 * h)
        scale = max(floor, float(np.abs(exact).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
        errors.append(float(np.abs(exact - numeric).max(initial=0.0)) / scale)

    return GradcheckResult(max_relative_error=max(errors, default=0.0), per_input=errors, tolerance=tolerance)
