"""Per-patch appearance/geometry descriptors used for keyframe and loop scoring."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..geometry import Intrinsics, depth_to_normal, depth_valid

PATCH = 16
FEATURE_DIM = 32
PROJECTION_SEED = 1234

# block weights applied before the final normalisation
COLOR_WEIGHT = 1.5
NORMAL_WEIGHT = 0.3
DEPTH_WEIGHT = 0.7
TEXTURE_WEIGHT = 1.0
COLOR_REF = 0.35  # log-colour centre
DEPTH_REF = 2.0  # log-depth centre (m)
TEXTURE_CELLS = 4  # each patch is pooled to TEXTURE_CELLS^2 cells before projection


@lru_cache(maxsize=8)
def _projection(dim_out: int, dim_in: int) -> np.ndarray:
    rng = np.random.default_rng(PROJECTION_SEED)
    P = rng.normal(size=(dim_out, dim_in)) / np.sqrt(dim_out)
    P.setflags(write=False)
    return P


def _blocks(arr: np.ndarray, gh: int, gw: int, patch: int) -> np.ndarray:
    """``(H, W, C)`` -> ``(gh, gw, patch, patch, C)``."""
    a = arr[: gh * patch, : gw * patch]
    return a.reshape(gh, patch, gw, patch, a.shape[-1]).transpose(0, 2, 1, 3, 4)


def patch_features(color: np.ndarray, depth: np.ndarray, intr: Intrinsics,
                   dim: int = FEATURE_DIM, patch: int = PATCH) -> np.ndarray:
    """``(H/patch, W/patch, dim)`` unit descriptors.

    Blocks: log mean colour (3), mean camera-frame normal (3), log mean depth
    (1), and ``dim - 7`` fixed random projections of the patch pooled to a
    4x4 grid and normalised to zero mean / unit contrast. Deterministic.
    """
    if dim < 8:
        raise ValueError("feature dimension must be at least 8")
    H, W = depth.shape
    gh, gw = H // patch, W // patch
    if gh == 0 or gw == 0:
        raise ValueError("image smaller than one patch")
    normals, nvalid = depth_to_normal(depth, intr)
    dvalid = depth_valid(depth)

    c = _blocks(color, gh, gw, patch)
    mean_c = c.mean(axis=(2, 3))
    cells = TEXTURE_CELLS
    pooled = c.reshape(gh, gw, cells, patch // cells, cells, patch // cells, 3).mean(axis=(3, 5))
    pooled = pooled.reshape(gh, gw, -1)
    pooled = pooled - pooled.mean(axis=-1, keepdims=True)
    pooled = pooled / (pooled.std(axis=-1, keepdims=True) + 0.02)
    proj = pooled @ _projection(dim - 7, pooled.shape[-1]).T
    proj = proj / np.maximum(np.linalg.norm(proj, axis=-1, keepdims=True), 1e-12)

    def pool(arr, mask):
        a = _blocks(np.where(mask[..., None], arr, 0.0), gh, gw, patch)
        cnt = _blocks(mask[..., None].astype(float), gh, gw, patch).sum(axis=(2, 3, 4))
        return a.sum(axis=(2, 3)) / np.maximum(cnt, 1)[..., None], cnt

    mean_n, _ = pool(np.nan_to_num(normals), nvalid)
    mean_d, dcnt = pool(np.nan_to_num(depth)[..., None], dvalid)
    logd = np.where(dcnt > 0, np.log(np.maximum(mean_d[..., 0], 1e-6) / DEPTH_REF), 0.0)

    f = np.concatenate(
        [
            COLOR_WEIGHT * np.log((mean_c + 0.05) / COLOR_REF),
            NORMAL_WEIGHT * mean_n,
            DEPTH_WEIGHT * logd[..., None],
            TEXTURE_WEIGHT * proj,
        ],
        axis=-1,
    )
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    return f / np.maximum(norm, 1e-12)


def max_similarity(current: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """For each current patch, its best cosine similarity against all reference patches."""
    a = current.reshape(-1, current.shape[-1])
    b = reference.reshape(-1, reference.shape[-1])
    return (a @ b.T).max(axis=1)
