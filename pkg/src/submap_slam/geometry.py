"""Camera geometry and rigid-body algebra.

Poses are camera-to-world transforms. Rotations are stored as unit
quaternions ``(w, x, y, z)`` and converted to matrices on demand.
Depth maps are plain ``(H, W)`` float arrays; a pixel is valid when its depth
is finite and strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_Z = 1e-6  # behind-camera cutoff (m)


class DegenerateConfigurationError(ValueError):
    """Raised when a closed-form alignment has no unique solution."""


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    # canonical hemisphere keeps equality checks stable
    return -q if q[0] < 0 else q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; picks the numerically largest pivot."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + np.sin(theta) / theta * K
        + (1 - np.cos(theta)) / theta**2 * K @ K
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    q = matrix_to_quat(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    theta = 2.0 * np.arctan2(s, q[0])
    return theta * v / s


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K @ K
    )


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t`` with a unit-quaternion rotation."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())
        self.q.setflags(write=False)
        self.t.setflags(write=False)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def exp(cls, xi: np.ndarray) -> "Pose":
        """SE(3) exponential of a twist ``(omega, v)``."""
        xi = np.asarray(xi, dtype=np.float64)
        w, v = xi[:3], xi[3:]
        return cls.from_rt(so3_exp(w), _left_jacobian(w) @ v)

    def log(self) -> np.ndarray:
        w = so3_log(self.R)
        v = np.linalg.solve(_left_jacobian(w), self.t)
        return np.concatenate([w, v])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qi, -(quat_to_matrix(qi) @ self.t))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.q, other.q), self.R @ other.t + self.t)

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform ``(..., 3)`` points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def close_to(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol)
        )

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def relative_pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """Rotation angle (rad) and translation distance (m) between two poses."""
    d = a.inverse() @ b
    return float(np.linalg.norm(so3_log(d.R))), float(np.linalg.norm(a.t - b.t))


# ---------------------------------------------------------------------------
# Intrinsics, projection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 70.0) -> "Intrinsics":
        f = float(0.5 * width / np.tan(np.deg2rad(hfov_deg) / 2))
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def pixel_rays(self) -> np.ndarray:
        """``(H, W, 3)`` rays with unit z in the camera frame."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1
        )


def depth_valid(depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & (depth > 0)


def unproject(depth: np.ndarray, intr: Intrinsics, pose: Pose | None = None):
    """Lift a depth map to a point map.

    Returns ``(points, valid)``; ``points`` is ``(H, W, 3)`` in the frame given
    by ``pose`` (camera frame when ``pose`` is None). Invalid pixels hold NaN.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != intr.shape:
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics {intr.shape}")
    valid = depth_valid(depth)
    d = np.where(valid, depth, np.nan)
    pts = intr.pixel_rays() * d[..., None]
    if pose is not None:
        pts = pose.apply(pts)
    return pts, valid


def project(points: np.ndarray, intr: Intrinsics, pose: Pose | None = None):
    """Project world points through a camera with camera-to-world ``pose``.

    Returns ``(uv, depth, valid)``: pixel coordinates ``(..., 2)``, camera-frame
    z, and a mask that is False for non-finite points or z <= EPS_Z.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pose is not None:
        pts = pose.inverse().apply(pts)
    z = pts[..., 2]
    valid = np.isfinite(pts).all(axis=-1) & (z > EPS_Z)
    zs = np.where(valid, z, 1.0)
    u = intr.fx * pts[..., 0] / zs + intr.cx
    v = intr.fy * pts[..., 1] / zs + intr.cy
    uv = np.stack([u, v], axis=-1)
    uv[~valid] = np.nan
    return uv, np.where(valid, z, np.nan), valid


def depth_from_points(points: np.ndarray, pose: Pose | None = None) -> np.ndarray:
    """Camera-frame z of a point map; NaN stays NaN."""
    pts = points if pose is None else pose.inverse().apply(points)
    return pts[..., 2]


# ---------------------------------------------------------------------------
# Similarity alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sim3Alignment:
    scale: float
    pose: Pose

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.pose.R.T + self.pose.t


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Sim3Alignment:
    """Least-squares ``dst ~ s R src + t`` (Umeyama 1991)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("point sets must have the same shape")
    n = len(src)
    if n < 3:
        raise DegenerateConfigurationError("need at least 3 correspondences")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs**2).sum() / n
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if var_s == 0 or sv_src[1] <= 1e-9 * max(sv_src[0], 1e-300):
        raise DegenerateConfigurationError("source points are collinear or coincident")
    cov = xd.T @ xs / n
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return Sim3Alignment(s, Pose.from_rt(R, t))


# ---------------------------------------------------------------------------
# Normals
# ---------------------------------------------------------------------------


def depth_to_normal(depth: np.ndarray, intr: Intrinsics):
    """Camera-frame normals from central differences of the unprojected depth.

    Normals point toward the camera (negative z). A pixel gets a normal only
    when its full 3x3 neighbourhood is valid. Returns ``(normals, valid)``.
    """
    pts, valid = unproject(depth, intr)
    H, W = depth.shape
    normals = np.full((H, W, 3), np.nan)
    ok = np.zeros((H, W), dtype=bool)
    if H < 3 or W < 3:
        return normals, ok
    nb = np.ones((H - 2, W - 2), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            nb &= valid[dy : dy + H - 2, dx : dx + W - 2]
    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    nb &= norm > 1e-12
    n = n / np.where(nb, norm, 1.0)[..., None]
    flip = n[..., 2] > 0
    n[flip] *= -1
    normals[1:-1, 1:-1][nb] = n[nb]
    ok[1:-1, 1:-1] = nb
    return normals, ok
