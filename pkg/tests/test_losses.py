import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from submap_slam.geometry import Intrinsics, depth_to_normal
from submap_slam.mapping.losses import (
    EmptyMaskError,
    anisotropy_loss,
    depth_to_normal_t,
    inverse_depth_loss,
    masked_l1,
    normal_consistency_loss,
    photometric_loss,
    scale_invariant_depth_loss,
    ssim_t,
)
from submap_slam.metrics import ssim

INTR = Intrinsics.from_fov(32, 24, 70.0)


def test_scale_invariant_zero_for_equal(rng):
    d = rng.uniform(0.5, 5, (24, 32))
    assert scale_invariant_depth_loss(d, d) == 0.0


@given(c=st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_scale_invariant_exact_under_scaling(c):
    d = np.random.default_rng(0).uniform(0.5, 5, (24, 32))
    assert abs(scale_invariant_depth_loss(c * d, d)) < 1e-12


@given(c=st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_scale_invariant_target_scaling(c):
    rng = np.random.default_rng(1)
    d = rng.uniform(0.5, 5, (24, 32))
    d_hat = d * np.exp(0.1 * rng.standard_normal(d.shape))
    assert scale_invariant_depth_loss(d_hat, c * d) == pytest.approx(scale_invariant_depth_loss(d_hat, d), abs=1e-12)


def test_scale_invariant_two_pixels():
    d = np.array([1.0, 2.0])
    d_hat = d * np.exp([0.0, 0.2])
    assert scale_invariant_depth_loss(d_hat, d) == pytest.approx(0.01, abs=1e-15)


def test_scale_invariant_mask_and_empty():
    d = np.array([[1.0, 2.0], [3.0, np.nan]])
    d_hat = np.array([[1.0, 2.0 * np.exp(0.2)], [100.0, 1.0]])
    mask = np.array([[True, True], [False, True]])
    assert scale_invariant_depth_loss(d_hat, d, mask) == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(EmptyMaskError):
        scale_invariant_depth_loss(d_hat, d, np.zeros((2, 2), bool))


def test_scale_invariant_tensor_gradient_matches_closed_form(rng):
    d = torch.as_tensor(rng.uniform(1, 3, 50))
    d_hat = torch.tensor(rng.uniform(1, 3, 50), requires_grad=True)
    scale_invariant_depth_loss(d_hat, d).backward()
    e = torch.log(d_hat.detach()) - torch.log(d)
    expected = 2 * (e - e.mean()) / len(e) / d_hat.detach()
    np.testing.assert_allclose(d_hat.grad, expected, rtol=1e-12)


def test_masked_l1_and_empty():
    a = torch.zeros((2, 2, 3), dtype=torch.float64)
    b = torch.ones((2, 2, 3), dtype=torch.float64)
    b[0, 0] = 3.0
    assert float(masked_l1(a, b)) == pytest.approx(1.5)
    assert float(masked_l1(a, b, torch.tensor([[False, True], [True, True]]))) == pytest.approx(1.0)
    with pytest.raises(EmptyMaskError):
        masked_l1(a, b, torch.zeros((2, 2), dtype=torch.bool))


def test_ssim_matches_numpy(rng):
    a = rng.uniform(0, 1, (24, 32, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    got = float(ssim_t(torch.as_tensor(a), torch.as_tensor(b)))
    assert got == pytest.approx(ssim(a, b), abs=1e-12)
    assert float(ssim_t(torch.as_tensor(a), torch.as_tensor(a))) == pytest.approx(1.0, abs=1e-12)


def test_photometric_loss_weighting(rng):
    a = torch.as_tensor(rng.uniform(0, 1, (24, 32, 3)))
    b = torch.as_tensor(rng.uniform(0, 1, (24, 32, 3)))
    l1 = float((a - b).abs().mean())
    s = float(ssim_t(a, b))
    assert float(photometric_loss(a, b, 0.0)) == pytest.approx(l1)
    assert float(photometric_loss(a, b, 0.2)) == pytest.approx(l1 + 0.2 * (1 - s))
    assert float(photometric_loss(a, a)) == pytest.approx(0.0, abs=1e-12)


def test_inverse_depth_loss():
    d = torch.tensor([1.0, 2.0, 4.0], dtype=torch.float64)
    d_hat = torch.tensor([2.0, 2.0, 1.0], dtype=torch.float64)
    mask = torch.tensor([True, True, False])
    assert float(inverse_depth_loss(d_hat, d, mask)) == pytest.approx(0.25)


def test_anisotropy_zero_for_isotropic():
    s = torch.log(torch.tensor([[0.1] * 3, [0.3] * 3], dtype=torch.float64))
    assert float(anisotropy_loss(s)) == pytest.approx(0.0, abs=1e-15)
    slender = torch.log(torch.tensor([[0.3, 0.1, 0.1]], dtype=torch.float64))
    # mean 0.5/3; deviations 0.1333, 0.0667, 0.0667
    assert float(anisotropy_loss(slender)) == pytest.approx(0.8 / 3, abs=1e-12)
    assert float(anisotropy_loss(torch.zeros((0, 3), dtype=torch.float64))) == 0.0


def _plane_depth(n, d0, intr):
    """Depth of the plane ``n . X = d0`` along every pixel ray (camera frame)."""
    rays = intr.pixel_rays()
    return d0 / (rays @ n)


def test_depth_normal_zero_on_exact_plane():
    n = np.array([0.2, -0.3, 1.0])
    n /= np.linalg.norm(n)
    depth = torch.as_tensor(_plane_depth(n, 2.0, INTR))
    na, oka = depth_to_normal_t(depth, INTR)
    nb, okb = depth_to_normal_t(depth.clone(), INTR)
    mask = oka & okb
    assert int(mask.sum()) == (INTR.width - 2) * (INTR.height - 2)
    assert float(normal_consistency_loss(na, nb, mask)) == pytest.approx(0.0, abs=1e-12)
    # the recovered normal is the plane normal, facing the camera
    np.testing.assert_allclose(na[mask].numpy(), np.broadcast_to(-n, (int(mask.sum()), 3)), atol=1e-9)


def test_depth_to_normal_matches_numpy():
    rng = np.random.default_rng(3)
    depth = 2.0 + 0.1 * rng.standard_normal((24, 32))
    depth[5, 7] = np.nan
    n_np, ok_np = depth_to_normal(depth, INTR)
    n_t, ok_t = depth_to_normal_t(torch.as_tensor(depth), INTR)
    assert np.array_equal(ok_np, ok_t.numpy())
    np.testing.assert_allclose(n_t.numpy()[ok_np], n_np[ok_np], atol=1e-12)


def test_normal_loss_empty_mask():
    n = torch.zeros((2, 2, 3), dtype=torch.float64)
    with pytest.raises(EmptyMaskError):
        normal_consistency_loss(n, n, torch.zeros((2, 2), dtype=torch.bool))
