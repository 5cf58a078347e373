"""Numba compositing kernels with a hand-written backward pass.

The forward pass walks, per pixel, the splats covering it in camera-depth
order and accumulates weights ``w_i = alpha_i * prod_{j<i}(1 - alpha_j)``.
The backward pass replays each pixel back to front, recovering the
transmittances from the final one, and produces gradients with respect to
the per-splat image-space quantities. Everything upstream of those (the
projection of 3D splats and the camera pose) is differentiated by torch.
"""

from __future__ import annotations

import numba
import numpy as np
import torch

MAX_ALPHA = 0.99
MIN_ALPHA = 1.0 / 255.0
T_STOP = 1e-3  # compositing stops once accumulated opacity exceeds 0.999
GRAZING_COS = 0.3


@numba.njit(cache=True)
def _build_lists(order, u, v, radius, W, H):
    P = W * H
    counts = np.zeros(P + 1, np.int64)
    for k in order:
        r = radius[k]
        if r < 0:
            continue
        x0 = max(0, int(np.floor(u[k] - r)))
        x1 = min(W - 1, int(np.ceil(u[k] + r)))
        y0 = max(0, int(np.floor(v[k] - r)))
        y1 = min(H - 1, int(np.ceil(v[k] + r)))
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                counts[py * W + px + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], np.int64)
    for k in order:
        r = radius[k]
        if r < 0:
            continue
        x0 = max(0, int(np.floor(u[k] - r)))
        x1 = min(W - 1, int(np.ceil(u[k] + r)))
        y0 = max(0, int(np.floor(v[k] - r)))
        y1 = min(H - 1, int(np.ceil(v[k] + r)))
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                p = py * W + px
                ids[fill[p]] = k
                fill[p] += 1
    return offsets, ids


@numba.njit(cache=True, inline="always")
def _pair_alpha(k, px, py, u, v, A, B, C, opac):
    dx = px - u[k]
    dy = py - v[k]
    power = -0.5 * (A[k] * dx * dx + 2.0 * B[k] * dx * dy + C[k] * dy * dy)
    if power > 0.0:
        power = 0.0
    g = np.exp(power)
    a = opac[k] * g
    return a, g, dx, dy


@numba.njit(cache=True, inline="always")
def _pair_depth(k, rx, ry, normal, nd, zc):
    ndr = normal[k, 0] * rx + normal[k, 1] * ry + normal[k, 2]
    rn = np.sqrt(rx * rx + ry * ry + 1.0)
    if -ndr > GRAZING_COS * rn:
        return nd[k] / ndr, ndr, True
    return zc[k], ndr, False


@numba.njit(cache=True)
def _forward(offsets, ids, u, v, A, B, C, opac, color, normal, nd, zc, W, H, fx, fy, cx, cy):
    P = W * H
    csum = np.zeros((P, 3))
    dsum = np.zeros(P)
    nsum = np.zeros((P, 3))
    tfinal = np.ones(P)
    last = np.zeros(P, np.int64)
    n_used = 0
    for p in range(P):
        px = p % W
        py = p // W
        rx = (px - cx) / fx
        ry = (py - cy) / fy
        T = 1.0
        end = offsets[p]
        for i in range(offsets[p], offsets[p + 1]):
            if T < T_STOP:
                break
            k = ids[i]
            a, g, dx, dy = _pair_alpha(k, px, py, u, v, A, B, C, opac)
            if a > MAX_ALPHA:
                a = MAX_ALPHA
            end = i + 1
            if a < MIN_ALPHA:
                continue
            w = a * T
            d, ndr, ok = _pair_depth(k, rx, ry, normal, nd, zc)
            for c in range(3):
                csum[p, c] += w * color[k, c]
                nsum[p, c] += w * normal[k, c]
            dsum[p] += w * d
            T *= 1.0 - a
            n_used += 1
        tfinal[p] = T
        last[p] = end
    return csum, dsum, nsum, tfinal, last, n_used


@numba.njit(cache=True)
def _backward(offsets, ids, last, tfinal, u, v, A, B, C, opac, color, normal, nd, zc,
              W, H, fx, fy, cx, cy, bg, g_csum, g_dsum, g_nsum, g_sil):
    N = len(u)
    gu = np.zeros(N)
    gv = np.zeros(N)
    gA = np.zeros(N)
    gB = np.zeros(N)
    gC = np.zeros(N)
    gop = np.zeros(N)
    gcol = np.zeros((N, 3))
    gn = np.zeros((N, 3))
    gnd = np.zeros(N)
    gzc = np.zeros(N)
    P = W * H
    for p in range(P):
        px = p % W
        py = p // W
        rx = (px - cx) / fx
        ry = (py - cy) / fy
        T = tfinal[p]
        # "behind" accumulators start with the background term of the colour
        acc_c0 = T * bg
        acc_c1 = T * bg
        acc_c2 = T * bg
        acc_d = 0.0
        acc_n0 = 0.0
        acc_n1 = 0.0
        acc_n2 = 0.0
        acc_s = 0.0
        gc0, gc1, gc2 = g_csum[p, 0], g_csum[p, 1], g_csum[p, 2]
        gd = g_dsum[p]
        gn0, gn1, gn2 = g_nsum[p, 0], g_nsum[p, 1], g_nsum[p, 2]
        gs = g_sil[p]
        for i in range(last[p] - 1, offsets[p] - 1, -1):
            k = ids[i]
            a, g, dx, dy = _pair_alpha(k, px, py, u, v, A, B, C, opac)
            clamped = a > MAX_ALPHA
            if clamped:
                a = MAX_ALPHA
            if a < MIN_ALPHA:
                continue
            T = T / (1.0 - a)
            w = a * T
            d, ndr, ok = _pair_depth(k, rx, ry, normal, nd, zc)
            # dL/dw-weighted features
            gcol[k, 0] += w * gc0
            gcol[k, 1] += w * gc1
            gcol[k, 2] += w * gc2
            gn[k, 0] += w * gn0
            gn[k, 1] += w * gn1
            gn[k, 2] += w * gn2
            gdd = w * gd
            if ok:
                gnd[k] += gdd / ndr
                gndr = -gdd * nd[k] / (ndr * ndr)
                gn[k, 0] += gndr * rx
                gn[k, 1] += gndr * ry
                gn[k, 2] += gndr
            else:
                gzc[k] += gdd
            # dF/dalpha = T f - behind / (1 - a)
            inv = 1.0 / (1.0 - a)
            galpha = (
                gc0 * (T * color[k, 0] - acc_c0 * inv)
                + gc1 * (T * color[k, 1] - acc_c1 * inv)
                + gc2 * (T * color[k, 2] - acc_c2 * inv)
                + gd * (T * d - acc_d * inv)
                + gn0 * (T * normal[k, 0] - acc_n0 * inv)
                + gn1 * (T * normal[k, 1] - acc_n1 * inv)
                + gn2 * (T * normal[k, 2] - acc_n2 * inv)
                + gs * (T - acc_s * inv)
            )
            acc_c0 += w * color[k, 0]
            acc_c1 += w * color[k, 1]
            acc_c2 += w * color[k, 2]
            acc_d += w * d
            acc_n0 += w * normal[k, 0]
            acc_n1 += w * normal[k, 1]
            acc_n2 += w * normal[k, 2]
            acc_s += w
            if clamped:
                continue
            gop[k] += galpha * g
            gpow = galpha * a
            if opac[k] * g == a and g < 1.0:
                gu[k] += gpow * (A[k] * dx + B[k] * dy)
                gv[k] += gpow * (B[k] * dx + C[k] * dy)
                gA[k] += -0.5 * gpow * dx * dx
                gB[k] += -gpow * dx * dy
                gC[k] += -0.5 * gpow * dy * dy
    return gu, gv, gA, gB, gC, gop, gcol, gn, gnd, gzc


class Composite(torch.autograd.Function):
    """Per-pixel front-to-back compositing of image-space splats.

    Inputs are per-splat tensors; ``radius`` and ``order`` are non-differentiable
    numpy arrays. Outputs ``(color_sum, depth_sum, normal_sum, silhouette)``
    flattened over pixels.
    """

    @staticmethod
    def forward(ctx, u, v, A, B, C, opac, color, normal, nd, zc, order, radius, cam, bg):
        W, H, fx, fy, cx, cy = cam
        arrs = [t.detach().numpy() for t in (u, v, A, B, C, opac, color, normal, nd, zc)]
        offsets, ids = _build_lists(order, arrs[0], arrs[1], radius, W, H)
        csum, dsum, nsum, tfinal, last, n_used = _forward(offsets, ids, *arrs, W, H, fx, fy, cx, cy)
        csum = csum + tfinal[:, None] * bg
        ctx.save_for_backward(u, v, A, B, C, opac, color, normal, nd, zc)
        ctx.lists = (offsets, ids, last, tfinal)
        ctx.cam = cam
        ctx.bg = bg
        ctx.n_used = n_used
        return (torch.from_numpy(csum), torch.from_numpy(dsum), torch.from_numpy(nsum),
                torch.from_numpy(1.0 - tfinal))

    @staticmethod
    def backward(ctx, g_csum, g_dsum, g_nsum, g_sil):
        W, H, fx, fy, cx, cy = ctx.cam
        offsets, ids, last, tfinal = ctx.lists
        arrs = [t.detach().numpy() for t in ctx.saved_tensors]
        grads = _backward(
            offsets, ids, last, tfinal, *arrs, W, H, fx, fy, cx, cy, ctx.bg,
            np.ascontiguousarray(g_csum.numpy()), np.ascontiguousarray(g_dsum.numpy()),
            np.ascontiguousarray(g_nsum.numpy()), np.ascontiguousarray(g_sil.numpy()),
        )
        return (*(torch.from_numpy(g) for g in grads), None, None, None, None)
