"""Pure-torch splat renderer used as an oracle for the compiled compositor.

It builds every (splat, pixel) pair explicitly, sorts pairs per pixel by
camera depth and composites with a segmented cumulative product, so torch
autograd differentiates the whole pipeline.
"""

from __future__ import annotations

import numpy as np
import torch

from submap_slam.geometry import Intrinsics
from submap_slam.mapping.raster import GRAZING_COS, MAX_ALPHA, MIN_ALPHA, T_STOP
from submap_slam.mapping.renderer import (
    CUTOFF_SIGMA,
    DTYPE,
    GUARD,
    MIN_FOOTPRINT_VAR,
    NEAR,
    SORT_DECIMALS,
    RenderOutput,
    SplatTensors,
    quat_to_rotmat,
)


def _pairs(uv: np.ndarray, radius: np.ndarray, W: int, H: int):
    """All (splat, pixel) pairs with the pixel inside the splat's square bound."""
    x0 = np.clip(np.floor(uv[:, 0] - radius), 0, W - 1).astype(np.int64)
    x1 = np.clip(np.ceil(uv[:, 0] + radius), 0, W - 1).astype(np.int64)
    y0 = np.clip(np.floor(uv[:, 1] - radius), 0, H - 1).astype(np.int64)
    y1 = np.clip(np.ceil(uv[:, 1] + radius), 0, H - 1).astype(np.int64)
    w = x1 - x0 + 1
    h = y1 - y0 + 1
    counts = w * h
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    sid = np.repeat(np.arange(len(uv)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    off = np.arange(total) - start
    px = x0[sid] + off % w[sid]
    py = y0[sid] + off // w[sid]
    return sid, py * W + px


def render_reference(splats: SplatTensors, R_wc: torch.Tensor, t_wc: torch.Tensor, intr: Intrinsics,
           exposure: tuple[torch.Tensor, torch.Tensor] | None = None,
           background: float = 0.0) -> RenderOutput:
    """Render colour, depth, normal and silhouette from camera-to-world ``(R_wc, t_wc)``."""
    H, W = intr.height, intr.width
    P = H * W
    fx, fy, cx, cy = intr.fx, intr.fy, intr.cx, intr.cy
    R_cw = R_wc.transpose(0, 1)
    t_cw = -R_cw @ t_wc

    pc_all = splats.positions @ R_cw.T + t_cw
    z_all = pc_all[:, 2].detach().numpy()
    vis = np.nonzero(z_all > NEAR)[0]
    empty = RenderOutput(
        torch.full((H, W, 3), background, dtype=DTYPE), torch.zeros((H, W), dtype=DTYPE),
        torch.zeros((H, W, 3), dtype=DTYPE), torch.zeros((H, W), dtype=DTYPE), 0,
    )
    if len(vis) == 0:
        return empty
    vis_t = torch.as_tensor(vis)
    pc = pc_all[vis_t]
    x, y, z = pc.unbind(-1)
    Rs = quat_to_rotmat(splats.quats[vis_t])
    Rc = R_cw @ Rs
    s2 = torch.exp(2 * splats.log_scales[vis_t])
    cov_c = (Rc * s2[:, None, :]) @ Rc.transpose(1, 2)
    zero = torch.zeros_like(z)
    J = torch.stack(
        [torch.stack([fx / z, zero, -fx * x / z**2], -1), torch.stack([zero, fy / z, -fy * y / z**2], -1)],
        dim=1,
    )
    cov2 = J @ cov_c @ J.transpose(1, 2)
    a = cov2[:, 0, 0] + MIN_FOOTPRINT_VAR
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + MIN_FOOTPRINT_VAR
    det = a * c - b * b
    u = fx * x / z + cx
    v = fy * y / z + cy

    with torch.no_grad():
        half_tr = 0.5 * (a + c)
        lam = half_tr + torch.sqrt(torch.clamp(half_tr**2 - det, min=0.0))
        radius = (CUTOFF_SIGMA * torch.sqrt(lam)).numpy()
        uvn = torch.stack([u, v], -1).numpy()
        # centres must lie in a guard band around the image (frustum culling)
        onscreen = (
            (uvn[:, 0] >= -GUARD * W) & (uvn[:, 0] <= (1 + GUARD) * W)
            & (uvn[:, 1] >= -GUARD * H) & (uvn[:, 1] <= (1 + GUARD) * H)
            & (uvn[:, 0] + radius >= 0) & (uvn[:, 0] - radius <= W - 1)
            & (uvn[:, 1] + radius >= 0) & (uvn[:, 1] - radius <= H - 1)
        )
        radius = np.where(onscreen, radius, -1.0)
        sid, pix = _pairs(np.where(onscreen[:, None], uvn, 0.0), radius, W, H)
        keep = onscreen[sid]
        sid, pix = sid[keep], pix[keep]
    if len(sid) == 0:
        return empty

    sid_t = torch.as_tensor(sid)
    pix_t = torch.as_tensor(pix)
    px = torch.as_tensor((pix % W).astype(np.float64), dtype=DTYPE)
    py = torch.as_tensor((pix // W).astype(np.float64), dtype=DTYPE)
    dx = px - u[sid_t]
    dy = py - v[sid_t]
    inv_det = 1.0 / det[sid_t]
    power = -0.5 * (c[sid_t] * dx * dx - 2 * b[sid_t] * dx * dy + a[sid_t] * dy * dy) * inv_det
    opac = torch.sigmoid(splats.opacity_logits[vis_t])
    alpha = torch.clamp(opac[sid_t] * torch.exp(power), max=MAX_ALPHA)

    with torch.no_grad():
        keep = (alpha >= MIN_ALPHA).numpy()
        zs = np.round(z.detach().numpy(), SORT_DECIMALS)[sid]
        order = np.lexsort((sid[keep], zs[keep], pix[keep]))
        idx = np.nonzero(keep)[0][order]
    if len(idx) == 0:
        return empty
    idx_t = torch.as_tensor(idx)
    sid_t = sid_t[idx_t]
    pix_t = pix_t[idx_t]
    alpha = alpha[idx_t]
    px, py = px[idx_t], py[idx_t]

    # exclusive segmented cumulative sum of log transmittance
    logt = torch.log1p(-alpha)
    csum = torch.cumsum(logt, 0)
    pix_np = pix[idx]
    seg_start = np.ones(len(pix_np), dtype=bool)
    seg_start[1:] = pix_np[1:] != pix_np[:-1]
    start_idx = np.maximum.accumulate(np.where(seg_start, np.arange(len(pix_np)), 0))
    base = (csum - logt)[torch.as_tensor(start_idx)]
    T = torch.exp(csum - logt - base)
    with torch.no_grad():
        live = T >= T_STOP
    weight = torch.where(live, alpha * T, torch.zeros_like(alpha))

    # per-pair depth from the ray / tangent-plane intersection
    n_c = Rc[:, :, 2]
    facing = torch.where((n_c * pc).sum(-1, keepdim=True) > 0, -n_c, n_c)
    n_s = facing[sid_t]
    ray = torch.stack([(px - cx) / fx, (py - cy) / fy, torch.ones_like(px)], -1)
    ndotr = (n_s * ray).sum(-1)
    ndotp = (n_s * pc[sid_t]).sum(-1)
    with torch.no_grad():
        plane_ok = (-ndotr) > GRAZING_COS * ray.norm(dim=-1)
    safe = torch.where(plane_ok, ndotr, -torch.ones_like(ndotr))
    d_pair = torch.where(plane_ok, ndotp / safe, z[sid_t])

    sil = torch.zeros(P, dtype=DTYPE).index_add(0, pix_t, weight)
    col = torch.zeros((P, 3), dtype=DTYPE).index_add(
        0, pix_t, weight[:, None] * splats.colors[vis_t][sid_t]
    )
    dep = torch.zeros(P, dtype=DTYPE).index_add(0, pix_t, weight * d_pair)
    nrm = torch.zeros((P, 3), dtype=DTYPE).index_add(0, pix_t, weight[:, None] * n_s)

    covered = sil > 1e-8
    sil_safe = torch.where(covered, sil, torch.ones_like(sil))
    depth = torch.where(covered, dep / sil_safe, torch.zeros_like(dep))
    nn = nrm.norm(dim=-1, keepdim=True)
    normal = torch.where(nn > 1e-12, nrm / torch.where(nn > 1e-12, nn, torch.ones_like(nn)),
                         torch.zeros_like(nrm))
    color = col + (1 - sil)[:, None] * background
    color = color.reshape(H, W, 3)
    if exposure is not None:
        A, bvec = exposure
        color = color @ A.T + bvec
    return RenderOutput(color, depth.reshape(H, W), normal.reshape(H, W, 3), sil.reshape(H, W),
                        len(idx))
