"""Differentiable surfel splatting in torch.

Each splat is projected to an image-space Gaussian footprint
(``J R diag(s^2) R^T J^T`` plus a 0.5 px floor). Pixels composite the splats
covering them front to back in camera-depth order. The per-pixel depth of a
splat is the intersection of the pixel ray with the splat's tangent plane
(its local z axis is the normal), falling back to the centre depth at grazing
angles. Compositing stops once accumulated opacity reaches 0.999.

Projection runs in torch; compositing runs in numba kernels with an explicit
backward pass, so the output is differentiable with respect to splat
parameters and the camera pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..geometry import Intrinsics, Pose
from .raster import GRAZING_COS, MAX_ALPHA, MIN_ALPHA, T_STOP, Composite
from .splats import SplatMap

DTYPE = torch.float64
NEAR = 0.05  # m
MIN_FOOTPRINT_VAR = 0.25  # (0.5 px)^2
CUTOFF_SIGMA = 3.2
SILHOUETTE_TAU = 0.5
GUARD = 0.3
SORT_DECIMALS = 9  # depths equal to 1 nm keep splat order, so rounding noise never reorders ties


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def _hat(w: torch.Tensor) -> torch.Tensor:
    z = torch.zeros((), dtype=w.dtype)
    return torch.stack(
        [torch.stack([z, -w[2], w[1]]), torch.stack([w[2], z, -w[0]]), torch.stack([-w[1], w[0], z])]
    )


def se3_exp(xi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Twist ``(omega, v)`` to ``(R, t)``; smooth at zero."""
    w, v = xi[:3], xi[3:]
    th2 = (w * w).sum()
    K = _hat(w)
    K2 = K @ K
    eye = torch.eye(3, dtype=xi.dtype)
    if float(th2.detach()) < 1e-12:
        A, B, C = 1.0 - th2 / 6, 0.5 - th2 / 24, 1.0 / 6 - th2 / 120
    else:
        th = torch.sqrt(th2)
        A = torch.sin(th) / th
        B = (1 - torch.cos(th)) / th2
        C = (th - torch.sin(th)) / (th2 * th)
    R = eye + A * K + B * K2
    V = eye + B * K + C * K2
    return R, V @ v


def pose_to_torch(pose: Pose) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.tensor(np.array(pose.R), dtype=DTYPE), torch.tensor(np.array(pose.t), dtype=DTYPE)


def perturbed_pose(pose: Pose, xi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Camera-to-world ``pose * exp(xi)`` as torch ``(R, t)``."""
    R0, t0 = pose_to_torch(pose)
    dR, dt = se3_exp(xi)
    return R0 @ dR, R0 @ dt + t0


def pose_from_xi(pose: Pose, xi: np.ndarray) -> Pose:
    return pose @ Pose.exp(np.asarray(xi, dtype=np.float64))


@dataclass
class SplatTensors:
    """Optimisable torch view of a :class:`SplatMap`.

    Scales and opacities are stored as log / logit so that plain gradient
    steps keep them positive and inside (0, 1).
    """

    positions: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor

    @classmethod
    def from_map(cls, m: SplatMap, requires_grad: bool = False) -> "SplatTensors":
        op = np.clip(m.opacities, 1e-6, 1 - 1e-6)
        t = lambda a: torch.tensor(a, dtype=DTYPE, requires_grad=requires_grad)  # noqa: E731
        return cls(
            t(m.positions.reshape(-1, 3)),
            t(m.quats.reshape(-1, 4)),
            t(np.log(m.scales.reshape(-1, 3))),
            t(np.log(op / (1 - op))),
            t(m.colors.reshape(-1, 3)),
        )

    def write_back(self, m: SplatMap) -> None:
        with torch.no_grad():
            m.positions = self.positions.detach().numpy().copy()
            q = self.quats.detach().numpy()
            m.quats = q / np.linalg.norm(q, axis=1, keepdims=True)
            m.scales = np.exp(self.log_scales.detach().numpy())
            m.opacities = torch.sigmoid(self.opacity_logits).detach().numpy().copy()
            m.colors = self.colors.detach().numpy().copy()
        m.clamp()

    def parameters(self) -> dict[str, torch.Tensor]:
        return {
            "positions": self.positions,
            "quats": self.quats,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W), 0 where silhouette <= tau
    normal: torch.Tensor  # (H, W, 3) camera frame, unit where covered
    silhouette: torch.Tensor  # (H, W)
    n_pairs: int = 0

    def depth_mask(self, tau: float = SILHOUETTE_TAU) -> torch.Tensor:
        return self.silhouette.detach() > tau

    def numpy(self) -> dict[str, np.ndarray]:
        d = {k: getattr(self, k).detach().numpy() for k in ("color", "depth", "normal", "silhouette")}
        d["depth"] = np.where(d["silhouette"] > SILHOUETTE_TAU, d["depth"], np.nan)
        return d


def render(splats: SplatTensors, R_wc: torch.Tensor, t_wc: torch.Tensor, intr: Intrinsics,
           exposure: tuple[torch.Tensor, torch.Tensor] | None = None,
           background: float = 0.0) -> RenderOutput:
    """Render colour, depth, normal and silhouette from camera-to-world ``(R_wc, t_wc)``."""
    H, W = intr.height, intr.width
    fx, fy, cx, cy = intr.fx, intr.fy, intr.cx, intr.cy
    R_cw = R_wc.transpose(0, 1)
    t_cw = -R_cw @ t_wc

    empty = RenderOutput(
        torch.full((H, W, 3), background, dtype=DTYPE), torch.zeros((H, W), dtype=DTYPE),
        torch.zeros((H, W, 3), dtype=DTYPE), torch.zeros((H, W), dtype=DTYPE), 0,
    )
    with torch.no_grad():
        z_all = (splats.positions @ R_cw[2] + t_cw[2]).numpy()
    vis = np.nonzero(z_all > NEAR)[0]
    if len(vis) == 0:
        return empty
    vis_t = torch.as_tensor(vis)
    pc = splats.positions[vis_t] @ R_cw.T + t_cw
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
        un, vn = u.numpy(), v.numpy()
        # centres must lie in a guard band around the image (frustum culling)
        onscreen = (
            (un >= -GUARD * W) & (un <= (1 + GUARD) * W) & (vn >= -GUARD * H) & (vn <= (1 + GUARD) * H)
            & (un + radius >= 0) & (un - radius <= W - 1) & (vn + radius >= 0) & (vn - radius <= H - 1)
        )
        radius = np.ascontiguousarray(np.where(onscreen, radius, -1.0))
        zn = z.numpy()
        order = np.argsort(np.round(zn, SORT_DECIMALS), kind="stable")
        order = np.ascontiguousarray(order[onscreen[order]])
    if len(order) == 0:
        return empty

    n_c = Rc[:, :, 2]
    facing = torch.where((n_c * pc).sum(-1, keepdim=True) > 0, -n_c, n_c)
    nd = (facing * pc).sum(-1)
    opac = torch.sigmoid(splats.opacity_logits[vis_t])
    cam = (W, H, float(fx), float(fy), float(cx), float(cy))
    col, dep, nrm, sil = Composite.apply(
        u, v, c / det, -b / det, a / det, opac, splats.colors[vis_t], facing.contiguous(), nd, z,
        order, radius, cam, float(background),
    )

    covered = sil > 1e-8
    sil_safe = torch.where(covered, sil, torch.ones_like(sil))
    depth = torch.where(covered, dep / sil_safe, torch.zeros_like(dep))
    nn = nrm.norm(dim=-1, keepdim=True)
    ok = nn > 1e-12
    normal = torch.where(ok, nrm / torch.where(ok, nn, torch.ones_like(nn)), torch.zeros_like(nrm))
    color = col.reshape(H, W, 3)
    if exposure is not None:
        A, bvec = exposure
        color = color @ A.T + bvec
    return RenderOutput(color, depth.reshape(H, W), normal.reshape(H, W, 3), sil.reshape(H, W), len(order))


def render_map(m: SplatMap, pose: Pose, intr: Intrinsics, **kw) -> dict[str, np.ndarray]:
    """Convenience numpy render of a map from a camera-to-world pose."""
    with torch.no_grad():
        R, t = pose_to_torch(pose)
        return render(SplatTensors.from_map(m), R, t, intr, **kw).numpy()
