"""Image, landmark and parsing quality metrics, plus test-time augmentation fusion."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .synth import DIHEDRAL, dihedral, dihedral_inverse

PSNR_INF = math.inf
PARSING_MSE_SCALE = 10.0
NRMSE_SCALE = 100.0
SSIM_WINDOW = 8
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB after clamping both images to [0, peak]; ``inf`` when identical."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((np.clip(a, 0, peak) - np.clip(b, 0, peak)) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(peak * peak / mse))


def to_luma(img: np.ndarray) -> np.ndarray:
    """[3,H,W] RGB -> [H,W] BT.601 luma."""
    return np.tensordot(LUMA, np.asarray(img, np.float64), axes=(0, 0))


def _box_mean(x: np.ndarray, w: int) -> np.ndarray:
    """Mean over every valid w x w window of the last two axes."""
    c = np.cumsum(np.cumsum(np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)]), axis=-2), axis=-1)
    s = c[..., w:, w:] - c[..., :-w, w:] - c[..., w:, :-w] + c[..., :-w, :-w]
    return s / (w * w)


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 1.0, window: int = SSIM_WINDOW) -> np.ndarray:
    """Local SSIM over all valid ``window`` x ``window`` mean-filter windows of 2-D (or stacked) maps."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than the {window}x{window} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _box_mean(a, window), _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a ** 2
    var_b = _box_mean(b * b, window) - mu_b ** 2
    cov = _box_mean(a * b, window) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """SSIM on luma for [3,H,W] colour images, on the map itself for [H,W]."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 3 and a.shape[0] == 3:
        a, b = to_luma(np.clip(a, 0, peak)), to_luma(np.clip(b, 0, peak))
    return float(np.mean(ssim_map(a, b, peak)))


def landmarks_from_heatmaps(heatmaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel argmax with a quarter-pixel nudge toward the larger neighbour.

    Returns ``(coords [K,2], flagged [K])``; all-zero channels are flagged and
    their coordinates set to NaN. Ties go to the smallest row, then column.
    """
    heatmaps = np.asarray(heatmaps, np.float64)
    k, h, w = heatmaps.shape
    coords = np.full((k, 2), np.nan)
    flagged = np.zeros(k, dtype=bool)
    for i, hm in enumerate(heatmaps):
        if not np.any(hm):
            flagged[i] = True
            continue
        r, c = divmod(int(np.argmax(hm)), w)
        dr = dc = 0.0
        if 0 < r < h - 1:
            dr = 0.25 * np.sign(hm[r + 1, c] - hm[r - 1, c])
        if 0 < c < w - 1:
            dc = 0.25 * np.sign(hm[r, c + 1] - hm[r, c - 1])
        coords[i] = (r + dr, c + dc)
    return coords, flagged


def interocular(landmarks: np.ndarray) -> float:
    """Distance between the two eye-centre landmarks (indices 0 and 1)."""
    landmarks = np.asarray(landmarks, np.float64)
    return float(np.hypot(*(landmarks[0] - landmarks[1])))


def nrmse(pred: np.ndarray, gt: np.ndarray, normalizer: float | None = None) -> float:
    """100 * sqrt(mean_k |pred_k - gt_k|^2) / normalizer (inter-ocular by default)."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"nrmse: {pred.shape} vs {gt.shape}")
    if normalizer is None:
        normalizer = interocular(gt)
    if normalizer <= 0:
        raise ValueError("nrmse: normalizer must be positive")
    err = np.sum((pred - gt) ** 2, axis=1)
    return float(NRMSE_SCALE * np.sqrt(np.mean(err)) / normalizer)


def parsing_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """PSNR / SSIM / MSE (x10) over the channel-stacked parsing maps."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"parsing maps differ in shape: {pred.shape} vs {gt.shape}")
    pred, gt = np.clip(pred, 0, 1), np.clip(gt, 0, 1)
    return {
        "psnr": psnr(pred, gt),
        "ssim": float(np.mean(ssim_map(pred, gt))),
        "mse": float(PARSING_MSE_SCALE * np.mean((pred - gt) ** 2)),
    }


def tta_fuse(model: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Average ``model`` over the 8 dihedral transforms of ``x`` (inverse-mapped back)."""
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"tta_fuse needs square inputs, got {x.shape}")
    outs = [dihedral_inverse(np.asarray(model(dihedral(x, k, flip))), k, flip).astype(np.float64)
            for k, flip in DIHEDRAL]
    # pairwise tree sum: eight identical inputs average back to themselves exactly
    while len(outs) > 1:
        outs = [outs[i] + outs[i + 1] for i in range(0, len(outs), 2)]
    return (outs[0] / len(DIHEDRAL)).astype(x.dtype)
