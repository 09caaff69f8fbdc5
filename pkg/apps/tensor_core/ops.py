"""
Operaciones diferenciables que usa el detector.

Todas reciben y devuelven `Tensor`; las constantes (etiquetas, objetivos)
pueden pasarse como arreglos numpy.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import sparse
from scipy.special import expit

from apps.core.exceptions import DimensionError, ParameterError

from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

IGNORE = -1
POSITIVE = 1
NEGATIVE = 0

LOG_EPSILON = float(np.log(1e-12))


def sigmoid(values: np.ndarray) -> np.ndarray:
    return expit(values)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concatenate {[t.shape for t in tensors]}: {e}") from e
    bounds = np.cumsum([0] + sizes)

    def backward(grad):
        for tensor, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            if tensor.requires_grad:
                index = [slice(None)] * grad.ndim
                index[axis] = slice(start, stop)
                tensor.accumulate(grad[tuple(index)])

    return Tensor.from_op(out, tensors, 'concatenate', backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concatenate(expanded, axis=axis)


def _windows(padded: np.ndarray, kernel_h: int, kernel_w: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Vista im2col (N, C, KH, KW, Ho, Wo) sin copiar memoria."""
    n, c, _, _ = padded.shape
    sn, sc, sh, sw = padded.strides
    return as_strided(
        padded,
        shape=(n, c, kernel_h, kernel_w, out_h, out_w),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Convolución 2D (correlación cruzada) NCHW con kernel OIKK.

    Salida espacial: floor((H + 2·padding − K) / stride) + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d espera NCHW y OIKK, recibió {x.shape} y {kernel.shape}")
    n, c, h, w = x.shape
    out_c, in_c, kernel_h, kernel_w = kernel.shape
    if c != in_c:
        raise DimensionError(f"conv2d: canales de entrada {x.shape} no coinciden con kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride={stride}, padding={padding}")
    if h + 2 * padding < kernel_h or w + 2 * padding < kernel_w:
        raise DimensionError(f"conv2d: entrada {x.shape} con padding {padding} menor que kernel {kernel.shape}")
    if bias is not None and bias.shape != (out_c,):
        raise DimensionError(f"conv2d: bias {bias.shape} no coincide con kernel {kernel.shape}")

    out_h = (h + 2 * padding - kernel_h) // stride + 1
    out_w = (w + 2 * padding - kernel_w) // stride + 1
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(padded, kernel_h, kernel_w, stride, out_h, out_w)

    out = np.tensordot(cols, kernel.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, out_c, 1, 1)

    def backward(grad):
        if kernel.requires_grad:
            kernel.accumulate(np.tensordot(grad, cols, axes=([0, 2, 3], [0, 4, 5])))
        if bias is not None and bias.requires_grad:
            bias.accumulate(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            # (C, KH, KW, N, Ho, Wo)
            grad_cols = np.tensordot(kernel.data, grad, axes=([0], [1]))
            grad_padded = np.zeros(padded.shape, dtype=x.dtype)
            for i in range(kernel_h):
                for j in range(kernel_w):
                    grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        grad_cols[:, i, j].transpose(1, 0, 2, 3)
            x.accumulate(grad_padded[:, :, padding:padding + h, padding:padding + w])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, 'conv2d', backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(grad):
        x.accumulate(grad * mask)

    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), 'relu', backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, training: bool = True, momentum: float = 0.1) -> Tensor:
    """
    Normalización por lotes sobre NCHW.

    En entrenamiento usa estadísticas del lote y actualiza las corrientes en el
    lugar; con un solo elemento por lote usa las corrientes aunque entrene.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm espera NCHW, recibió {x.shape}")
    channels = x.shape[1]
    for name, values in (('gamma', gamma.shape), ('beta', beta.shape),
                         ('running_mean', running_mean.shape), ('running_var', running_var.shape)):
        if values != (channels,):
            raise DimensionError(f"batch_norm: {name} {values} no coincide con {channels} canales de {x.shape}")
    if eps <= 0:
        raise ParameterError(f"batch_norm: eps debe ser > 0, recibió {eps}")

    axes = (0, 2, 3)
    view = (1, channels, 1, 1)
    use_batch = training and x.shape[0] > 1

    if use_batch:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1 - momentum)
        running_mean += momentum * mean
        unbiased = var * count / (count - 1) if count > 1 else var
        running_var *= (1 - momentum)
        running_var += momentum * unbiased
    else:
        count = None
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = (x.data - mean.reshape(view)) * inv_std.reshape(view)
    out = normalized * gamma.data.reshape(view) + beta.data.reshape(view)

    def backward(grad):
        if gamma.requires_grad:
            gamma.accumulate((grad * normalized).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(grad.sum(axis=axes))
        if x.requires_grad:
            grad_norm = grad * gamma.data.reshape(view)
            if use_batch:
                grad_x = (inv_std.reshape(view) / count) * (
                    count * grad_norm
                    - grad_norm.sum(axis=axes).reshape(view)
                    - normalized * (grad_norm * normalized).sum(axis=axes).reshape(view)
                )
            else:
                grad_x = grad_norm * inv_std.reshape(view)
            x.accumulate(grad_x)

    return Tensor.from_op(out, (x, gamma, beta), 'batch_norm', backward)


def dropout(x: Tensor, p: float, training: bool, rng_seed: Union[int, np.random.Generator, None] = None) -> Tensor:
    """
    Dropout invertido: en entrenamiento anula con probabilidad p y escala los
    sobrevivientes por 1/(1−p); en evaluación es la identidad.
    """
    if not 0 <= p < 1:
        raise ParameterError(f"dropout: p debe estar en [0, 1), recibió {p}")
    if not training or p == 0:
        return x
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(grad):
        x.accumulate(grad * mask)

    return Tensor.from_op(x.data * mask, (x,), 'dropout', backward)


def bilinear_sample(feature: Tensor, points: Union[Tensor, np.ndarray]) -> Tensor:
    """
    Interpolación bilineal de `feature` en coordenadas reales (x, y).

    feature (C, H, W) con puntos (P, 2) -> (C, P), o feature (N, C, H, W) con
    puntos (N, P, 2) -> (N, C, P). Las coordenadas fuera del mapa se recortan
    al borde; ahí el gradiente respecto del punto es cero.
    """
    points = as_tensor(points, dtype=feature.dtype)
    batched = feature.ndim == 4
    if feature.ndim not in (3, 4) or points.ndim != feature.ndim - 1 or points.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: feature {feature.shape} con puntos {points.shape}")
    f = feature.data if batched else feature.data[None]
    pts = points.data if batched else points.data[None]
    if pts.shape[0] != f.shape[0]:
        raise DimensionError(f"bilinear_sample: lote de feature {feature.shape} y puntos {points.shape}")

    n, c, h, w = f.shape
    px, py = pts[..., 0], pts[..., 1]
    x = np.clip(px, 0, w - 1)
    y = np.clip(py, 0, h - 1)
    x0 = np.minimum(np.floor(x), max(w - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (x - x0).astype(f.dtype)
    wy = (y - y0).astype(f.dtype)

    flat = f.reshape(n, c, h * w)
    batch_index = np.arange(n)[:, None, None]
    channel_index = np.arange(c)[None, :, None]
    corners = {
        'a': (y0 * w + x0, (1 - wx) * (1 - wy)),
        'b': (y0 * w + x1, wx * (1 - wy)),
        'c': (y1 * w + x0, (1 - wx) * wy),
        'd': (y1 * w + x1, wx * wy),
    }
    values = {key: flat[batch_index, channel_index, index[:, None, :]] for key, (index, _) in corners.items()}
    out = sum(values[key] * weight[:, None, :] for key, (_, weight) in corners.items())

    inside_x = ((px >= 0) & (px <= w - 1)).astype(f.dtype)
    inside_y = ((py >= 0) & (py <= h - 1)).astype(f.dtype)

    def backward(grad):
        g = grad if batched else grad[None]
        if feature.requires_grad:
            grad_feature = np.empty_like(flat)
            points_count = pts.shape[1]
            rows = np.tile(np.arange(points_count), 4)
            for b in range(n):
                cols = np.concatenate([corners[key][0][b] for key in 'abcd'])
                weights = np.concatenate([corners[key][1][b] for key in 'abcd'])
                scatter = sparse.csr_matrix((weights, (rows, cols)), shape=(points_count, h * w))
                grad_feature[b] = (scatter.T @ g[b].T).T
            grad_feature = grad_feature.reshape(f.shape)
            feature.accumulate(grad_feature if batched else grad_feature[0])
        if points.requires_grad:
            d_dx = (values['b'] - values['a']) * (1 - wy)[:, None, :] + (values['d'] - values['c']) * wy[:, None, :]
            d_dy = (values['c'] - values['a']) * (1 - wx)[:, None, :] + (values['d'] - values['b']) * wx[:, None, :]
            grad_points = np.stack([
                (g * d_dx).sum(axis=1) * inside_x,
                (g * d_dy).sum(axis=1) * inside_y,
            ], axis=-1)
            points.accumulate(grad_points if batched else grad_points[0])

    return Tensor.from_op(out if batched else out[0], (feature, points), 'bilinear_sample', backward)


def smooth_l1(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """0.5·d² si |d| < 1, si no |d| − 0.5; suma dividida por el número de elementos."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"smooth_l1: pred {pred.shape} y target {target.shape}")
    count = max(pred.size, 1)
    diff = pred.data - target
    abs_diff = np.abs(diff)
    small = abs_diff < 1
    loss = np.where(small, 0.5 * diff * diff, abs_diff - 0.5).sum() / count

    def backward(grad):
        pred.accumulate(grad * np.where(small, diff, np.sign(diff)) / count)

    return Tensor.from_op(np.asarray(loss, dtype=pred.dtype), (pred,), 'smooth_l1', backward)


def focal_loss(logits: Tensor, labels: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """
    Focal loss sigmoide con etiquetas {1 signo, 0 fondo, −1 ignorar}.

    −α_t·(1−p_t)^γ·log(p_t) por elemento, con log(p_t) acotado por log(1e-12),
    normalizada por el número de positivos (mínimo 1).
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise DimensionError(f"focal_loss: logits {logits.shape} y labels {labels.shape}")
    if not 0 <= alpha <= 1 or gamma < 0:
        raise ParameterError(f"focal_loss: alpha={alpha}, gamma={gamma}")

    z = logits.data
    positive = labels == POSITIVE
    valid = (positive | (labels == NEGATIVE)).astype(z.dtype)
    sign = np.where(positive, 1.0, -1.0).astype(z.dtype)
    margin = sign * z
    raw_log_pt = -np.logaddexp(0, -margin)
    clamped = raw_log_pt < LOG_EPSILON
    log_pt = np.maximum(raw_log_pt, LOG_EPSILON)
    pt = np.exp(log_pt)
    one_minus = np.exp(-np.logaddexp(0, margin))
    alpha_t = np.where(positive, alpha, 1 - alpha).astype(z.dtype)
    modulator = one_minus ** gamma
    normalizer = max(1, int(positive.sum()))

    loss = (-alpha_t * modulator * log_pt * valid).sum() / normalizer

    def backward(grad):
        local = alpha_t * sign * modulator * (gamma * pt * log_pt - np.where(clamped, 0, one_minus))
        logits.accumulate(grad * local * valid / normalizer)

    return Tensor.from_op(np.asarray(loss, dtype=z.dtype), (logits,), 'focal_loss', backward)
