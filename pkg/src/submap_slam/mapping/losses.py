"""Photometric and geometric losses on rendered views (torch, float64)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from ..geometry import Intrinsics
from ..metrics import gaussian_window

DTYPE = torch.float64
SSIM_WEIGHT = 0.2
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
ROUNDOFF = 1e-12  # residuals this small count as zero so |x| has no kink gradient there


class EmptyMaskError(ValueError):
    """Raised when a masked loss has no pixel to average over."""


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=DTYPE)


def scale_invariant_depth_loss(d_hat, d, mask=None):
    """Variance of ``log d_hat - log d`` over jointly valid masked pixels.

    Zero whenever ``d_hat`` is a global multiple of ``d``. Accepts numpy
    arrays (returns a float) or tensors (returns a differentiable scalar).
    """
    as_float = not isinstance(d_hat, torch.Tensor) and not isinstance(d, torch.Tensor)
    dh, dd = _t(d_hat), _t(d)
    ok = torch.isfinite(dh.detach()) & torch.isfinite(dd) & (dh.detach() > 0) & (dd > 0)
    if mask is not None:
        ok = ok & _t(mask).bool()
    n = int(ok.sum())
    if n == 0:
        raise EmptyMaskError("scale-invariant depth loss has no valid pixel")
    e = torch.log(dh[ok]) - torch.log(dd[ok])
    loss = (e * e).mean() - e.mean() ** 2
    return float(loss) if as_float else loss


def _abs(x: torch.Tensor) -> torch.Tensor:
    return torch.where(x.detach().abs() > ROUNDOFF, x.abs(), torch.zeros_like(x))


def masked_l1(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    diff = _abs(a - b)
    if diff.ndim == 3:
        diff = diff.mean(-1)
    if mask is None:
        return diff.mean()
    if not bool(mask.any()):
        raise EmptyMaskError("L1 loss has no valid pixel")
    return diff[mask].mean()


@lru_cache(maxsize=2)
def _ssim_kernel(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    return torch.as_tensor(gaussian_window(size, sigma), dtype=DTYPE)[None, None]


def ssim_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable mean SSIM of ``(H, W, C)`` images; matches ``metrics.ssim``."""
    x = a.permute(2, 0, 1)[:, None]
    y = b.permute(2, 0, 1)[:, None]
    k = _ssim_kernel()
    pad = k.shape[-1] // 2
    f = lambda img: F.conv2d(img, k, padding=pad)  # noqa: E731
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def photometric_loss(rendered: torch.Tensor, observed: torch.Tensor,
                     ssim_weight: float = SSIM_WEIGHT) -> torch.Tensor:
    """L1 plus weighted structural dissimilarity."""
    loss = masked_l1(rendered, observed)
    if ssim_weight:
        loss = loss + ssim_weight * (1.0 - ssim_t(rendered, observed))
    return loss


def inverse_depth_loss(d_hat: torch.Tensor, d: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any()):
        raise EmptyMaskError("inverse depth loss has no valid pixel")
    return _abs(1.0 / d_hat[mask] - 1.0 / d[mask]).mean()


def depth_to_normal_t(depth: torch.Tensor, intr: Intrinsics) -> tuple[torch.Tensor, torch.Tensor]:
    """Torch twin of :func:`geometry.depth_to_normal` for the interior pixels.

    Returns ``(normals (H,W,3), valid (H,W))``; border and invalid pixels get
    zero normals. Validity is decided without gradients.
    """
    H, W = depth.shape
    u = torch.arange(W, dtype=DTYPE)[None, :]
    v = torch.arange(H, dtype=DTYPE)[:, None]
    dz = torch.where(torch.isfinite(depth), depth, torch.zeros_like(depth))
    pts = torch.stack([(u - intr.cx) / intr.fx * dz, (v - intr.cy) / intr.fy * dz, dz], -1)
    with torch.no_grad():
        valid = torch.isfinite(depth) & (depth > 1e-6)
        nb = torch.ones((H - 2, W - 2), dtype=torch.bool)
        for dy in range(3):
            for dx in range(3):
                nb &= valid[dy : dy + H - 2, dx : dx + W - 2]
    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = torch.linalg.cross(du, dv)
    norm = n.norm(dim=-1)
    with torch.no_grad():
        nb &= norm > 1e-12
    n = n / torch.where(nb, norm, torch.ones_like(norm))[..., None]
    n = torch.where((n[..., 2:3] > 0), -n, n)
    n = torch.where(nb[..., None], n, torch.zeros_like(n))
    normals = F.pad(n.permute(2, 0, 1), (1, 1, 1, 1)).permute(1, 2, 0)
    ok = F.pad(nb, (1, 1, 1, 1), value=False)
    return normals, ok


def normal_consistency_loss(n_a: torch.Tensor, n_b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean ``1 - n_a . n_b`` over masked pixels."""
    if not bool(mask.any()):
        raise EmptyMaskError("normal loss has no valid pixel")
    return (1.0 - (n_a[mask] * n_b[mask]).sum(-1)).mean()


def anisotropy_loss(log_scales: torch.Tensor) -> torch.Tensor:
    """Mean over splats of ``sum_j |s_j - mean(s)|``; zero for isotropic splats."""
    if len(log_scales) == 0:
        return torch.zeros((), dtype=DTYPE)
    s = torch.exp(log_scales)
    return (s - s.mean(-1, keepdim=True)).abs().sum(-1).mean()
