"""Analytic synthetic scenes and exact ray casting.

Scenes are built from axis-aligned rectangles, axis-aligned boxes and
spheres. World frame is z-up; cameras follow the OpenCV convention
(x right, y down, z forward).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LIGHT_DIR = np.array([0.35, 0.5, 0.8]) / np.linalg.norm([0.35, 0.5, 0.8])
AMBIENT = 0.4
DIFFUSE = 0.6
TEXTURE_AMPLITUDE = 0.35


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``x[axis] == offset`` bounded in the other two axes."""

    axis: int
    offset: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    albedo: tuple[float, float, float]
    texture: tuple = ()


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float]
    texture: tuple = ()


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    texture: tuple = ()


@dataclass(frozen=True)
class SyntheticScene:
    kind: str
    seed: int
    primitives: tuple = field(default_factory=tuple)
    bounds: tuple = ((-3.0, -3.0, 0.0), (3.0, 3.0, 4.0))

    @property
    def centroid(self) -> np.ndarray:
        lo, hi = np.array(self.bounds[0]), np.array(self.bounds[1])
        return 0.5 * (lo + hi)


def _texture(rng: np.random.Generator) -> tuple:
    """Two plane waves in world coordinates: ``(k1, phase1, k2, phase2)``."""
    waves = []
    for _ in range(2):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        period = rng.uniform(0.5, 1.1)
        waves.append((tuple(direction * 2 * np.pi / period), float(rng.uniform(0, 2 * np.pi))))
    return tuple(waves)


def _albedo(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(v) for v in rng.uniform(0.15, 0.9, size=3))


def _room(rng: np.random.Generator, half: float = 3.0, height: float = 4.0) -> list:
    prims = [
        Rect(2, 0.0, (-half, -half), (half, half), _albedo(rng), _texture(rng)),
        Rect(0, -half, (-half, 0.0), (half, height), _albedo(rng), _texture(rng)),
        Rect(0, half, (-half, 0.0), (half, height), _albedo(rng), _texture(rng)),
        Rect(1, -half, (-half, 0.0), (half, height), _albedo(rng), _texture(rng)),
        Rect(1, half, (-half, 0.0), (half, height), _albedo(rng), _texture(rng)),
    ]
    n_clutter = int(rng.integers(3, 9))
    for _ in range(n_clutter):
        # clutter stays near the walls or near the centre, below camera height
        if rng.uniform() < 0.3:
            c = rng.uniform(-0.5, 0.5, size=2)
        else:
            ang = rng.uniform(0, 2 * np.pi)
            r = rng.uniform(2.3, 2.7)
            c = np.clip(r * np.array([np.cos(ang), np.sin(ang)]), -2.6, 2.6)
        size = rng.uniform(0.15, 0.3)
        if rng.uniform() < 0.5:
            h = rng.uniform(0.3, 0.8)
            prims.append(
                Box(
                    (c[0] - size, c[1] - size, 0.0),
                    (c[0] + size, c[1] + size, h),
                    _albedo(rng),
                    _texture(rng),
                )
            )
        else:
            prims.append(Sphere((c[0], c[1], size), size, _albedo(rng), _texture(rng)))
    return prims


def _corridor(rng: np.random.Generator, length: float = 20.0, half_width: float = 1.2,
              height: float = 3.0) -> list:
    prims = [
        Rect(2, 0.0, (-1.0, -half_width), (length, half_width), _albedo(rng), _texture(rng)),
        Rect(1, -half_width, (-1.0, 0.0), (length, height), _albedo(rng), _texture(rng)),
        Rect(1, half_width, (-1.0, 0.0), (length, height), _albedo(rng), _texture(rng)),
    ]
    for _ in range(int(rng.integers(3, 9))):
        x = rng.uniform(1.0, length - 1.0)
        y = rng.choice([-1.0, 1.0]) * rng.uniform(0.75, 0.95)
        size = rng.uniform(0.1, 0.2)
        prims.append(
            Box((x - size, y - size, 0.0), (x + size, y + size, rng.uniform(0.3, 0.9)),
                _albedo(rng), _texture(rng))
        )
    return prims


def generate_scene(kind: str = "room", seed: int = 0) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    if kind == "room":
        return SyntheticScene("room", seed, tuple(_room(rng)), ((-3.0, -3.0, 0.0), (3.0, 3.0, 4.0)))
    if kind == "corridor":
        return SyntheticScene(
            "corridor", seed, tuple(_corridor(rng)), ((-1.0, -1.2, 0.0), (20.0, 1.2, 3.0))
        )
    raise ValueError(f"unknown scene kind {kind!r}")


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def _hit_rect(p: Rect, o: np.ndarray, d: np.ndarray):
    a = p.axis
    b, c = [i for i in range(3) if i != a]
    da = d[:, a]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p.offset - o[a]) / da
    x = o + t[:, None] * d
    inside = (
        (x[:, b] >= p.lo[0]) & (x[:, b] <= p.hi[0]) & (x[:, c] >= p.lo[1]) & (x[:, c] <= p.hi[1])
    )
    t = np.where(inside & (t > 1e-9) & np.isfinite(t), t, np.inf)
    n = np.zeros_like(d)
    n[:, a] = -np.sign(da)  # faces the ray origin
    return t, n


def _hit_box(p: Box, o: np.ndarray, d: np.ndarray):
    lo, hi = np.array(p.lo), np.array(p.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    hit = (t_enter <= t_exit) & (t_enter > 1e-9)
    t = np.where(hit, t_enter, np.inf)
    axis = tmin.argmax(axis=1)
    n = np.zeros_like(d)
    rows = np.arange(len(d))
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def _hit_sphere(p: Sphere, o: np.ndarray, d: np.ndarray):
    c = np.array(p.center)
    oc = o - c
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * d @ oc
    cc = oc @ oc - p.radius**2
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    x = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    n = (x - c) / p.radius
    return t, n


_HIT = {Rect: _hit_rect, Box: _hit_box, Sphere: _hit_sphere}


def raycast(scene: SyntheticScene, origin: np.ndarray, directions: np.ndarray):
    """Nearest hit along each ray ``origin + t * d``.

    Returns ``(t, normals, prim_index)``; misses have ``t = inf`` and index -1.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    best_t = np.full(len(d), np.inf)
    best_n = np.zeros_like(d)
    best_i = np.full(len(d), -1)
    for i, prim in enumerate(scene.primitives):
        t, n = _HIT[type(prim)](prim, o, d)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_n[closer] = n[closer]
        best_i[closer] = i
    return best_t, best_n, best_i


def shade(scene: SyntheticScene, points: np.ndarray, normals: np.ndarray, prim_index: np.ndarray,
          lambert: bool = True, textured: bool = True) -> np.ndarray:
    """Albedo (optionally textured) with a fixed directional light."""
    out = np.zeros((len(points), 3))
    for i, prim in enumerate(scene.primitives):
        sel = prim_index == i
        if not sel.any():
            continue
        col = np.tile(np.array(prim.albedo), (sel.sum(), 1))
        if textured and prim.texture:
            x = points[sel]
            t = sum(np.sin(x @ np.array(k) + ph) for k, ph in prim.texture) / len(prim.texture)
            col = col * (1.0 + TEXTURE_AMPLITUDE * t)[:, None]
        if lambert:
            lam = np.clip(normals[sel] @ LIGHT_DIR, 0.0, 1.0)
            col = col * (AMBIENT + DIFFUSE * lam)[:, None]
        out[sel] = col
    return np.clip(out, 0.0, 1.0)
