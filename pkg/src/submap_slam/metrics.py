"""Trajectory, surface, and image quality metrics. All distances in meters."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import Pose, umeyama

PSNR_CAP = 100.0


def trajectory_positions(poses: Sequence[Pose]) -> np.ndarray:
    return np.array([p.t for p in poses], dtype=np.float64).reshape(-1, 3)


def ate_rmse(estimated: Sequence[Pose], ground_truth: Sequence[Pose], align: bool = True,
             with_scale: bool = True) -> float:
    """RMSE of position residuals, optionally after Umeyama alignment.

    ``align=True`` uses Sim(3) by default; pass ``with_scale=False`` for a rigid
    alignment that exposes scale drift.
    """
    if len(estimated) != len(ground_truth):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(ground_truth)}")
    est = trajectory_positions(estimated)
    gt = trajectory_positions(ground_truth)
    if len(est) == 0:
        raise ValueError("empty trajectory")
    if align:
        if len(est) < 3:
            raise ValueError("alignment needs at least 3 poses")
        est = umeyama(est, gt, with_scale=with_scale).apply(est)
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))


def nearest_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return cKDTree(reference).query(query, k=1)[0]


def accuracy_completeness_chamfer(reconstructed: np.ndarray, reference: np.ndarray):
    """``(accuracy, completeness, chamfer)`` mean nearest-neighbour distances."""
    rec = np.asarray(reconstructed, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(rec) == 0 or len(ref) == 0:
        raise ValueError("point clouds must be non-empty")
    acc = float(nearest_distances(rec, ref).mean())
    comp = float(nearest_distances(ref, rec).mean())
    return acc, comp, 0.5 * (acc + comp)


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean SSIM with an 11x11 Gaussian window and zero padding.

    Accepts ``(H, W)`` or ``(H, W, C)`` images in [0, 1].
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        filt = lambda img: ndimage.correlate(img, win, mode="constant", cval=0.0)  # noqa: E731
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(num / den)
    return float(np.mean(vals))
