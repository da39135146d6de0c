"""Slow reference implementations used to check the vectorized code paths.

Everything here is written with explicit loops and shares no helpers with
the fast paths beyond the pad-mode parsing, so an indexing mistake in one
is unlikely to be repeated in the other.
"""
from __future__ import annotations

import numpy as np

from gridlift.engine import axis_modes


def _source(i: int, n: int, mode: str) -> int:
    if mode == "circular":
        return i % n
    if mode == "replicate":
        return min(max(i, 0), n - 1)
    raise ValueError(f"unknown pad mode {mode!r}")


def pad_loop(x: np.ndarray, s: int, mode) -> np.ndarray:
    """Pad an (H, P, C) grid cell by cell."""
    h, p, c = x.shape
    vmode, hmode = axis_modes(mode)
    out = np.empty((h + 2 * s, p + 2 * s, c))
    for r in range(-s, h + s):
        for q in range(-s, p + s):
            out[r + s, q + s] = x[_source(r, h, vmode), _source(q, p, hmode)]
    return out


def conv_loop(padded: np.ndarray, kernel: np.ndarray, bias: np.ndarray, alpha=None) -> np.ndarray:
    """Valid cross-correlation of one (Hp, Pp, Cin) grid.

    ``alpha`` (Ho, Po, K, K), if given, scales the kernel separately for
    every output cell.
    """
    k, _, c_in, c_out = kernel.shape
    ho, po = padded.shape[0] - k + 1, padded.shape[1] - k + 1
    out = np.zeros((ho, po, c_out))
    for i in range(ho):
        for j in range(po):
            for o in range(c_out):
                acc = bias[o]
                for a in range(k):
                    for b in range(k):
                        scale = 1.0 if alpha is None else alpha[i, j, a, b]
                        for ci in range(c_in):
                            acc += padded[i + a, j + b, ci] * kernel[a, b, ci, o] * scale
                out[i, j, o] = acc
    return out


def attention_loop(x: np.ndarray, gamma, beta, running_mean, running_var, eps, w1, b1, w2, b2, k):
    """Inference-mode attention maps for one (H, P, C) grid, returned as (H, P, K, K)."""
    h, p, c = x.shape
    pooled = np.array([sum(x[i, j, ci] for i in range(h) for j in range(p)) / (h * p) for ci in range(c)])
    normed = gamma * (pooled - running_mean) / np.sqrt(running_var + eps) + beta
    a1 = np.maximum(normed, 0.0)
    z1 = np.array([b1[u] + sum(a1[ci] * w1[ci, u] for ci in range(c)) for u in range(w1.shape[1])])
    a2 = np.maximum(z1, 0.0)
    z2 = np.array([b2[v] + sum(a2[u] * w2[u, v] for u in range(w2.shape[0])) for v in range(w2.shape[1])])
    return (1.0 / (1.0 + np.exp(-z2))).reshape(h, p, k, k)


def layer_loop(layer, x: np.ndarray, use_attention: bool | None = None) -> np.ndarray:
    """Per-patch evaluation of a grid convolution layer on one (H, P, C) grid, eval mode."""
    if use_attention is None:
        use_attention = layer.dynamic
    alpha = None
    if use_attention:
        head = layer.attention
        st = head.bn_state
        alpha = attention_loop(x, head.bn_gamma.value, head.bn_beta.value, st.running_mean, st.running_var,
                               st.eps, head.fc1_w.value, head.fc1_b.value, head.fc2_w.value,
                               head.fc2_b.value, layer.k)
    out = 0.0
    for br in layer.branches:
        padded = pad_loop(x, layer.pad, br.pad_mode)
        out = out + conv_loop(padded, br.kernel.value, br.bias.value, alpha)
    return out


def sgt_forward_loop(S: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Place joints on cells by scanning each row of S for its single one."""
    cells, joints = S.shape
    out = np.zeros((cells, G.shape[1]))
    for r in range(cells):
        for j in range(joints):
            if S[r, j] == 1:
                out[r] = G[j]
    return out


def sgt_inverse_loop(S: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Average, for every joint, the cells holding it."""
    cells, joints = S.shape
    out = np.zeros((joints, D.shape[1]))
    for j in range(joints):
        hits = [r for r in range(cells) if S[r, j] == 1]
        if not hits:
            raise ValueError(f"joint {j} has no cell")
        for r in hits:
            out[j] += D[r]
        out[j] /= len(hits)
    return out


def quaternion_procrustes(pred: np.ndarray, gt: np.ndarray, scale: bool = True) -> np.ndarray:
    """Align one (J, 3) prediction to its ground truth via the unit-quaternion eigenproblem."""
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    a, b = pred - mp, gt - mg
    M = a.T @ b
    sxx, sxy, sxz = M[0]
    syx, syy, syz = M[1]
    szx, szy, szz = M[2]
    N = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    vals, vecs = np.linalg.eigh(N)
    q0, qx, qy, qz = vecs[:, -1]
    R = np.array([
        [q0 * q0 + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qy * qx + q0 * qz), q0 * q0 - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - q0 * qx)],
        [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz],
    ])
    rotated = a @ R.T
    c = float(np.sum(rotated * b) / np.sum(a * a)) if scale else 1.0
    return c * rotated + mg


def mpjpe_loop(pred: np.ndarray, gt: np.ndarray) -> float:
    total, count = 0.0, 0
    for n in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            d = pred[n, j] - gt[n, j]
            total += float(np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2))
            count += 1
    return total / count


def project_loop(points: np.ndarray, fx, fy, cx, cy) -> np.ndarray:
    out = np.empty(points.shape[:-1] + (2,))
    for j in range(points.shape[0]):
        X, Y, Z = points[j]
        out[j] = (fx * X / Z + cx, fy * Y / Z + cy)
    return out


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; zero when both are zero."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (modified in place, then restored).

    ``coords`` restricts the perturbation to those flat indices; the returned
    array then holds only those entries.
    """
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    out = np.asarray(out)
    return out.reshape(x.shape) if len(out) == flat.size else out


def directional_derivative(f, x: np.ndarray, direction: np.ndarray, h: float = 1e-5) -> float:
    orig = x.copy()
    x += h * direction
    fp = f()
    x[...] = orig - h * direction
    fm = f()
    x[...] = orig
    return (fp - fm) / (2 * h)
