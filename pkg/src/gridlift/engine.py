"""Minimal float64 numerical core: padding, convolution, normalization,
activations, dropout, pooling, affine maps and Adam.

Arrays are plain ``numpy.ndarray`` objects. Feature grids use the
``(N, H, P, C)`` layout; unbatched ``(H, P, C)`` grids are accepted by the
padding and convolution helpers and returned unbatched.

Every forward function returns its output; the matching ``*_backward``
function takes the upstream gradient plus whatever the forward needed and
returns gradients in the order of the forward's inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD_MODES = ("circular", "replicate")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every stochastic draw."""
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# Parameters and Adam
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray | None = None
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {b}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def adam_update(param: Parameter, grad: np.ndarray, hyper: AdamHyper) -> Parameter:
    """Apply one bias-corrected Adam step to ``param`` in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.value.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.value.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient passed to adam_update")
    param.step_count += 1
    t = param.step_count
    param.adam_m = hyper.beta1 * param.adam_m + (1.0 - hyper.beta1) * grad
    param.adam_v = hyper.beta2 * param.adam_v + (1.0 - hyper.beta2) * grad * grad
    m_hat = param.adam_m / (1.0 - hyper.beta1**t)
    v_hat = param.adam_v / (1.0 - hyper.beta2**t)
    param.value = param.value - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return param


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------


def pad_indices(n: int, s: int, mode: str) -> np.ndarray:
    """Source index for each position of an axis of length ``n`` padded by ``s``."""
    if mode not in PAD_MODES:
        raise ValueError(f"unknown pad mode {mode!r}; expected one of {PAD_MODES}")
    if s < 0:
        raise ValueError("pad size must be non-negative")
    idx = np.arange(-s, n + s)
    if mode == "circular":
        if s > 0 and s >= n:
            raise ValueError(f"circular pad size {s} must be smaller than axis length {n}")
        return idx % n
    return np.clip(idx, 0, n - 1)


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected a (N, H, P, C) or (H, P, C) grid, got shape {x.shape}")
    return x, False


def axis_modes(mode) -> tuple[str, str]:
    """Normalize a pad mode into ``(vertical, horizontal)`` modes.

    A plain string applies to both axes; ``"horizontal:vertical"`` strings
    and ``(vertical, horizontal)`` tuples set them separately.
    """
    if isinstance(mode, str):
        if ":" in mode:
            horizontal, vertical = mode.split(":")
            return vertical, horizontal
        return mode, mode
    vertical, horizontal = mode
    return vertical, horizontal


def pad_grid(x: np.ndarray, s: int, mode) -> np.ndarray:
    """Pad the two spatial axes by ``s`` cells using wrap-around or edge copy."""
    xb, squeeze = _batched(x)
    _, h, p, _ = xb.shape
    vmode, hmode = axis_modes(mode)
    rows = pad_indices(h, s, vmode)
    cols = pad_indices(p, s, hmode)
    out = xb[:, rows][:, :, cols]
    return out[0] if squeeze else out


def pad_grid_backward(grad_padded: np.ndarray, h: int, p: int, s: int, mode) -> np.ndarray:
    gb, squeeze = _batched(grad_padded)
    vmode, hmode = axis_modes(mode)
    rows = pad_indices(h, s, vmode)
    cols = pad_indices(p, s, hmode)
    n, _, _, c = gb.shape
    tmp = np.zeros((n, h, gb.shape[2], c))
    np.add.at(tmp, (slice(None), rows), gb)
    out = np.zeros((n, h, p, c))
    np.add.at(out, (slice(None), slice(None), cols), tmp)
    return out[0] if squeeze else out


def patch_index(h: int, p: int, k: int, mode) -> np.ndarray:
    """Flat source cell of every (cell, kernel offset) pair under size-preserving padding.

    Returns an (H*P, K*K) integer array: entry ``[i*P + j, a*K + b]`` is the
    unpadded cell read by kernel tap (a, b) when the window is centred on
    cell (i, j).
    """
    s = (k - 1) // 2
    vmode, hmode = axis_modes(mode)
    rows = pad_indices(h, s, vmode)
    cols = pad_indices(p, s, hmode)
    i = np.arange(h)[:, None, None, None]
    j = np.arange(p)[None, :, None, None]
    a = np.arange(k)[None, None, :, None]
    b = np.arange(k)[None, None, None, :]
    flat = rows[i + a] * p + cols[j + b]
    return flat.reshape(h * p, k * k)


# ---------------------------------------------------------------------------
# Convolution (cross-correlation, stride 1, valid region)
# ---------------------------------------------------------------------------


def im2col(padded: np.ndarray, k: int) -> np.ndarray:
    """Return all K x K windows as an (N, Ho, Po, K, K, C) array."""
    n, hp, pp, c = padded.shape
    if hp < k or pp < k:
        raise ValueError(f"padded grid {hp}x{pp} smaller than kernel {k}x{k}")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    # (N, Ho, Po, C, K, K) -> (N, Ho, Po, K, K, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def col2im(cols: np.ndarray, padded_shape) -> np.ndarray:
    n, ho, po, k, _, c = cols.shape
    out = np.zeros(padded_shape)
    for a in range(k):
        for b in range(k):
            out[:, a : a + ho, b : b + po, :] += cols[:, :, :, a, b, :]
    return out


def _check_kernel(kernel, c_in):
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be K x K x Cin x Cout, got {kernel.shape}")
    if kernel.shape[2] != c_in:
        raise ValueError(f"kernel expects {kernel.shape[2]} input channels, input has {c_in}")


def conv2d(padded: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    xb, squeeze = _batched(padded)
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_kernel(kernel, xb.shape[3])
    k, _, c_in, c_out = kernel.shape
    cols = im2col(xb, k)
    n, ho, po = cols.shape[:3]
    out = cols.reshape(n * ho * po, k * k * c_in) @ kernel.reshape(k * k * c_in, c_out)
    out = out.reshape(n, ho, po, c_out) + np.asarray(bias, dtype=np.float64)
    return out[0] if squeeze else out


def conv2d_backward(grad_out, padded, kernel):
    """Gradients of ``sum(grad_out * conv2d(padded, kernel, bias))``.

    Returns ``(grad_padded, grad_kernel, grad_bias)``.
    """
    xb, squeeze = _batched(padded)
    gb, _ = _batched(grad_out)
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_kernel(kernel, xb.shape[3])
    k, _, c_in, c_out = kernel.shape
    n, hp, pp, _ = xb.shape
    ho, po = hp - k + 1, pp - k + 1
    if gb.shape != (n, ho, po, c_out):
        raise ValueError(f"grad_out shape {gb.shape} inconsistent with forward output {(n, ho, po, c_out)}")
    cols = im2col(xb, k).reshape(n * ho * po, k * k * c_in)
    g2 = gb.reshape(n * ho * po, c_out)
    grad_kernel = (cols.T @ g2).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0)
    dcols = (g2 @ kernel.reshape(k * k * c_in, c_out).T).reshape(n, ho, po, k, k, c_in)
    grad_padded = col2im(dcols, xb.shape)
    return (grad_padded[0] if squeeze else grad_padded), grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# Batch normalization over rows of an (N, F) matrix
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, features: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(features), np.ones(features), momentum, eps)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool):
    """Normalize each column of ``x``.

    In training mode batch statistics are used and the running statistics are
    updated in place (unbiased variance for the running estimate). Returns
    ``(out, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if state.eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    if training:
        n = x.shape[0]
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var * (n / (n - 1))
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x - mean) * inv_std
    out = gamma * x_hat + beta
    return out, (x_hat, inv_std, gamma, training)


def batch_norm_backward(grad_out, cache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    x_hat, inv_std, gamma, training = cache
    grad_gamma = np.sum(grad_out * x_hat, axis=0)
    grad_beta = np.sum(grad_out, axis=0)
    g = grad_out * gamma
    if not training:
        return g * inv_std, grad_gamma, grad_beta
    n = grad_out.shape[0]
    grad_x = inv_std / n * (n * g - g.sum(axis=0) - x_hat * np.sum(g * x_hat, axis=0))
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Elementwise ops, pooling, affine
# ---------------------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, out):
    return grad_out * out * (1.0 - out)


def activation(x, kind: str):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x, p: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(out, mask)``; the mask is None when inactive."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    keep = rng.random(np.shape(x)) >= p
    mask = keep / (1.0 - p)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def global_average_pool(grid):
    """Mean over the two spatial axes of an (N, H, P, C) or (H, P, C) grid."""
    return np.asarray(grid, dtype=np.float64).mean(axis=(-3, -2))


def global_average_pool_backward(grad_out, grid_shape):
    h, p = grid_shape[-3], grid_shape[-2]
    g = np.asarray(grad_out)[..., None, None, :] / (h * p)
    return np.broadcast_to(g, grid_shape).copy()


def affine(x, weight, bias):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError(f"affine shape mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight + bias


def affine_backward(grad_out, x, weight):
    """Returns ``(grad_x, grad_weight, grad_bias)``."""
    if grad_out.shape != (x.shape[0], weight.shape[1]):
        raise ValueError("affine_backward shape mismatch")
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)
