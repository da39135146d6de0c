"""3D pose error metrics. All inputs are root-relative poses in millimetres."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AUC_THRESHOLDS = np.arange(5.0, 150.0 + 1e-9, 5.0)
PCK_THRESHOLD = 150.0


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"expected (N, J, 3) poses, got {pred.shape}")
    if pred.shape[0] == 0:
        raise ValueError("empty pose batch")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    """Euclidean error per sample and joint, shape (N, J)."""
    pred, gt = _check_pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    return float(joint_errors(pred, gt).mean())


def per_joint_mpjpe(pred, gt) -> np.ndarray:
    return joint_errors(pred, gt).mean(axis=0)


@dataclass
class Alignment:
    aligned: np.ndarray
    degenerate: np.ndarray  # (N,) bool


def procrustes_align(pred, gt, scale: bool = True, tol: float = 1e-9) -> Alignment:
    """Align each predicted pose to its ground truth with an optimal similarity (or rigid) transform.

    Samples whose centred prediction or ground truth has rank below 2 admit
    no unique rotation; they are flagged as degenerate and left unaligned.
    """
    pred, gt = _check_pair(pred, gt)
    mu_p = pred.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    p0, g0 = pred - mu_p, gt - mu_g
    H = np.einsum("nji,njk->nik", p0, g0)
    U, s, Vt = np.linalg.svd(H)
    sv_p = np.linalg.svd(p0, compute_uv=False)
    sv_g = np.linalg.svd(g0, compute_uv=False)
    degenerate = (sv_p[:, 1] <= tol * np.maximum(sv_p[:, 0], 1.0)) | (sv_g[:, 1] <= tol * np.maximum(sv_g[:, 0], 1.0))
    d = np.sign(np.linalg.det(np.einsum("nij,njk->nik", U, Vt)))
    d[d == 0] = 1.0
    D = np.ones_like(s)
    D[:, -1] = d
    R = np.einsum("nij,nj,njk->nik", U, D, Vt)  # maps row vectors: p0 @ R
    if scale:
        var_p = np.sum(p0 ** 2, axis=(1, 2))
        safe = np.where(var_p > 0, var_p, 1.0)
        c = np.sum(s * D, axis=1) / safe
    else:
        c = np.ones(pred.shape[0])
    aligned = c[:, None, None] * np.einsum("nji,nik->njk", p0, R) + mu_g
    aligned[degenerate] = pred[degenerate]
    return Alignment(aligned, degenerate)


def pa_mpjpe(pred, gt, scale: bool = True, return_flags: bool = False):
    """MPJPE after Procrustes alignment, averaged over non-degenerate samples."""
    pred, gt = _check_pair(pred, gt)
    al = procrustes_align(pred, gt, scale=scale)
    ok = ~al.degenerate
    value = float(np.linalg.norm(al.aligned[ok] - gt[ok], axis=-1).mean()) if ok.any() else float("nan")
    return (value, al.degenerate) if return_flags else value


def pck(pred, gt, threshold: float = PCK_THRESHOLD) -> float:
    """Percentage of joints with error at most ``threshold`` mm."""
    return float(100.0 * np.mean(joint_errors(pred, gt) <= threshold))


def auc(pred, gt, thresholds=AUC_THRESHOLDS) -> float:
    """Mean PCK over the threshold grid, in percent."""
    err = joint_errors(pred, gt)
    return float(np.mean([100.0 * np.mean(err <= t) for t in thresholds]))


@dataclass
class MetricReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    pck_percent: float
    auc_percent: float
    per_joint_mpjpe: np.ndarray
    num_samples: int = 0
    num_degenerate: int = 0

    def as_dict(self) -> dict:
        return {
            "mpjpe_mm": self.mpjpe_mm,
            "pa_mpjpe_mm": self.pa_mpjpe_mm,
            "pck_percent": self.pck_percent,
            "auc_percent": self.auc_percent,
            "per_joint": [float(v) for v in self.per_joint_mpjpe],
            "num_samples": self.num_samples,
            "num_degenerate": self.num_degenerate,
        }


def evaluate(pred, gt, pa_scale: bool = True) -> MetricReport:
    pred, gt = _check_pair(pred, gt)
    pa, flags = pa_mpjpe(pred, gt, scale=pa_scale, return_flags=True)
    return MetricReport(
        mpjpe_mm=mpjpe(pred, gt),
        pa_mpjpe_mm=pa,
        pck_percent=pck(pred, gt),
        auc_percent=auc(pred, gt),
        per_joint_mpjpe=per_joint_mpjpe(pred, gt),
        num_samples=pred.shape[0],
        num_degenerate=int(flags.sum()),
    )
