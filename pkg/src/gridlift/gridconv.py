"""Grid convolution layers.

A layer runs one convolution per padding branch (circular and replicate by
default) and sums the results, so the output keeps the input's H x P size.
In the dynamic form an attention head turns a pooled descriptor of the input
into one K x K scaling map per grid cell; each cell's kernel is multiplied by
its map before the dot product with that cell's patch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridlift import engine
from gridlift.engine import BatchNormState, Parameter
from gridlift.sgt import GridSpec

DEFAULT_BRANCHES = ("circular", "replicate")
CHUNK_BYTES = 4 << 20


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Branch:
    kernel: Parameter
    bias: Parameter
    pad_mode: object

    @property
    def k(self) -> int:
        return self.kernel.shape[0]


class AttentionHead:
    """Pool -> BN -> ReLU -> affine -> ReLU -> affine -> sigmoid -> (H, P, K, K)."""

    def __init__(self, c_in: int, grid: GridSpec, k: int, rng: np.random.Generator, hidden: int = 16,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        self.grid = grid
        self.k = k
        n_out = grid.cells * k * k
        self.bn_gamma = Parameter(np.ones(c_in))
        self.bn_beta = Parameter(np.zeros(c_in))
        self.bn_state = BatchNormState.fresh(c_in, bn_momentum, bn_eps)
        b1 = 1.0 / np.sqrt(c_in)
        self.fc1_w = Parameter(_uniform(rng, b1, (c_in, hidden)))
        self.fc1_b = Parameter(_uniform(rng, b1, (hidden,)))
        b2 = 1.0 / np.sqrt(hidden)
        self.fc2_w = Parameter(_uniform(rng, b2, (hidden, n_out)))
        self.fc2_b = Parameter(_uniform(rng, b2, (n_out,)))
        self._cache = None

    def parameters(self) -> dict[str, Parameter]:
        return {
            "bn_gamma": self.bn_gamma,
            "bn_beta": self.bn_beta,
            "fc1_w": self.fc1_w,
            "fc1_b": self.fc1_b,
            "fc2_w": self.fc2_w,
            "fc2_b": self.fc2_b,
        }

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        n = x.shape[0]
        pooled = engine.global_average_pool(x)
        normed, bn_cache = engine.batch_norm(pooled, self.bn_gamma.value, self.bn_beta.value,
                                             self.bn_state, training)
        a1 = engine.relu(normed)
        z1 = engine.affine(a1, self.fc1_w.value, self.fc1_b.value)
        a2 = engine.relu(z1)
        z2 = engine.affine(a2, self.fc2_w.value, self.fc2_b.value)
        alpha = engine.sigmoid(z2)
        self._cache = (x.shape, bn_cache, normed, a1, z1, a2, alpha)
        return alpha.reshape(n, self.grid.h, self.grid.p, self.k, self.k)

    def backward(self, grad_alpha: np.ndarray) -> np.ndarray:
        x_shape, bn_cache, normed, a1, z1, a2, alpha = self._cache
        g = engine.sigmoid_backward(grad_alpha.reshape(alpha.shape), alpha)
        g, self.fc2_w.grad, self.fc2_b.grad = engine.affine_backward(g, a2, self.fc2_w.value)
        g = engine.relu_backward(g, z1)
        g, self.fc1_w.grad, self.fc1_b.grad = engine.affine_backward(g, a1, self.fc1_w.value)
        g = engine.relu_backward(g, normed)
        g, self.bn_gamma.grad, self.bn_beta.grad = engine.batch_norm_backward(g, bn_cache)
        return engine.global_average_pool_backward(g, x_shape)


class DGridConvLayer:
    """Multi-branch grid convolution with optional per-cell kernel attention.

    One attention head per layer produces the scaling maps; every branch
    applies the same maps to its own kernel.
    """

    def __init__(self, c_in: int, c_out: int, k: int, grid: GridSpec, rng: np.random.Generator,
                 dynamic: bool = True, branches=DEFAULT_BRANCHES, attention_hidden: int = 16,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {k}")
        if not branches:
            raise ValueError("at least one padding branch is required")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.grid = grid
        self.dynamic = dynamic
        self.pad = (k - 1) // 2
        bound = np.sqrt(1.0 / (k * k * c_in))
        self.branches = []
        for mode in branches:
            for axis_mode in engine.axis_modes(mode):
                if axis_mode not in engine.PAD_MODES:
                    raise ValueError(f"unknown pad mode {mode!r}")
            self.branches.append(Branch(
                Parameter(_uniform(rng, bound, (k, k, c_in, c_out))),
                Parameter(_uniform(rng, bound, (c_out,))),
                mode,
            ))
        self.attention = (AttentionHead(c_in, grid, k, rng, attention_hidden, bn_momentum, bn_eps)
                          if dynamic else None)
        self._cache = None
        self._plan = None

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for i, br in enumerate(self.branches):
            out[f"branch{i}.kernel"] = br.kernel
            out[f"branch{i}.bias"] = br.bias
        if self.attention is not None:
            for name, p in self.attention.parameters().items():
                out[f"attention.{name}"] = p
        return out

    def buffers(self) -> dict[str, BatchNormState]:
        return {"attention.bn": self.attention.bn_state} if self.attention is not None else {}

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1:] != (self.grid.h, self.grid.p, self.c_in):
            raise ValueError(
                f"expected input (N, {self.grid.h}, {self.grid.p}, {self.c_in}), got {x.shape}"
            )

    def _gather_plan(self):
        if self._plan is None:
            h, p = self.grid.h, self.grid.p
            idx = np.concatenate([engine.patch_index(h, p, self.k, br.pad_mode) for br in self.branches], axis=1)
            taps = idx.shape[1]
            scatter = np.zeros((h * p, h * p * taps))
            scatter[idx.ravel(), np.arange(idx.size)] = 1.0
            self._plan = (idx, scatter)
        return self._plan

    def _stacked_kernel(self):
        kkc = self.k * self.k * self.c_in
        return np.concatenate([br.kernel.value.reshape(kkc, self.c_out) for br in self.branches], axis=0)

    def _chunk(self, n: int) -> int:
        # keep each chunk's patch tensor around 2 MB so it stays cache resident
        per_sample = self.grid.cells * len(self.branches) * self.k * self.k * self.c_in * 8
        return max(1, min(n, CHUNK_BYTES // per_sample))

    def forward(self, x: np.ndarray, training: bool = False, use_attention: bool | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        if use_attention is None:
            use_attention = self.dynamic
        if use_attention and self.attention is None:
            raise ValueError("layer was built without an attention head")
        alpha = self.attention.forward(x, training) if use_attention else None
        n, h, p, c = x.shape
        hp = h * p
        idx, _ = self._gather_plan()
        nb = len(self.branches)
        xf = x.reshape(n, hp, c)
        alpha_all = None if alpha is None else np.tile(alpha.reshape(n, hp, self.k * self.k), (1, 1, nb))
        w = self._stacked_kernel()
        out = np.empty((n, hp, self.c_out))
        step = self._chunk(n)
        for s0 in range(0, n, step):
            # (chunk, HP, branches*K*K, C): every branch's taps side by side
            cols = xf[s0 : s0 + step][:, idx]
            if alpha_all is not None:
                cols *= alpha_all[s0 : s0 + step, :, :, None]
            out[s0 : s0 + step] = (cols.reshape(-1, w.shape[0]) @ w).reshape(-1, hp, self.c_out)
        out += sum(br.bias.value for br in self.branches)
        self._cache = (xf, alpha_all)
        return out.reshape(n, h, p, self.c_out)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xf, alpha_all = self._cache
        n, hp, c_in = xf.shape
        h, p = self.grid.h, self.grid.p
        if grad_out.shape != (n, h, p, self.c_out):
            raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output")
        kk = self.k * self.k
        kkc = kk * c_in
        nb = len(self.branches)
        idx, scatter = self._gather_plan()
        w = self._stacked_kernel()
        g3 = grad_out.reshape(n, hp, self.c_out)
        grad_w = np.zeros_like(w)
        grad_xf = np.empty((n, hp, c_in))
        grad_alpha = None if alpha_all is None else np.empty((n, hp, kk))
        step = self._chunk(n)
        for s0 in range(0, n, step):
            sl = slice(s0, s0 + step)
            g2 = g3[sl].reshape(-1, self.c_out)
            cols = xf[sl][:, idx]
            taps = cols.shape[2]
            dscaled = (g2 @ w.T).reshape(cols.shape)
            if alpha_all is None:
                grad_w += cols.reshape(-1, w.shape[0]).T @ g2
                dcols = dscaled
            else:
                a = alpha_all[sl, :, :, None]
                grad_w += (cols * a).reshape(-1, w.shape[0]).T @ g2
                ga = np.einsum("ijk,ijk->ij", dscaled.reshape(-1, taps, c_in), cols.reshape(-1, taps, c_in))
                grad_alpha[sl] = ga.reshape(-1, hp, nb, kk).sum(axis=2)
                dcols = dscaled * a
            grad_xf[sl] = np.matmul(scatter, dcols.reshape(dcols.shape[0], -1, c_in))
        grad_b = g3.sum(axis=(0, 1))
        for i, br in enumerate(self.branches):
            br.kernel.grad = grad_w[i * kkc : (i + 1) * kkc].reshape(br.kernel.shape)
            br.bias.grad = grad_b.copy()
        grad_x = grad_xf.reshape(n, h, p, c_in)
        if grad_alpha is not None:
            grad_x += self.attention.backward(grad_alpha.reshape(n, h, p, self.k, self.k))
        return grad_x


def extract_patch(padded: np.ndarray, i: int, j: int, k: int) -> np.ndarray:
    """K x K window of a padded (Hp, Pp, C) grid centred over unpadded cell (i, j)."""
    h = padded.shape[0] - (k - 1)
    p = padded.shape[1] - (k - 1)
    if not (0 <= i < h and 0 <= j < p):
        raise ValueError(f"cell ({i}, {j}) lies outside the {h}x{p} unpadded grid")
    return padded[i : i + k, j : j + k]


def _batch_input(D_in):
    D_in = np.asarray(D_in, dtype=np.float64)
    return (D_in[None], True) if D_in.ndim == 3 else (D_in, False)


def gridconv_forward(layer: DGridConvLayer, D_in: np.ndarray) -> np.ndarray:
    """Sum of the padded branch convolutions, without attention scaling."""
    x, squeeze = _batch_input(D_in)
    out = layer.forward(x, training=False, use_attention=False)
    return out[0] if squeeze else out


def attention_forward(head: AttentionHead, D_in: np.ndarray, training: bool = False) -> np.ndarray:
    x, squeeze = _batch_input(D_in)
    alpha = head.forward(x, training)
    return alpha[0] if squeeze else alpha


def dgridconv_forward(layer: DGridConvLayer, D_in: np.ndarray, training: bool = False) -> np.ndarray:
    x, squeeze = _batch_input(D_in)
    out = layer.forward(x, training=training, use_attention=True)
    return out[0] if squeeze else out


def dgridconv_backward(layer: DGridConvLayer, D_in: np.ndarray, grad_out: np.ndarray,
                       training: bool = False):
    """Run forward then backward; returns ``(grad_D_in, {param name: grad})``."""
    x, squeeze = _batch_input(D_in)
    g, _ = _batch_input(grad_out)
    layer.forward(x, training=training)
    grad_x = layer.backward(g)
    grads = {name: p.grad for name, p in layer.parameters().items()}
    return (grad_x[0] if squeeze else grad_x), grads
