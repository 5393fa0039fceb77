import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinegroup.warp import (compose, invert_field, jacobian_determinant, relative_field, sample_points,
                            warp_image, warp_mask)

from conftest import smooth_field
from oracles import bilinear


def test_zero_field_is_identity():
    img = np.random.default_rng(0).random((12, 10))
    np.testing.assert_array_equal(warp_image(img, np.zeros((12, 10, 2))), img)


def test_ramp_shift_exact_inside():
    H, W = 8, 10
    img = np.tile(np.arange(W, dtype=float), (H, 1))
    field = np.zeros((H, W, 2))
    field[..., 0] = 0.5
    out = warp_image(img, field)
    np.testing.assert_allclose(out[:, :-1], img[:, :-1] + 0.5, atol=1e-12)


def test_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    img = rng.random((16, 16))
    field = rng.normal(0, 3, (16, 16, 2))
    out = warp_image(img, field)
    ref = np.array([[bilinear(img, x + field[y, x, 0], y + field[y, x, 1]) for x in range(16)]
                    for y in range(16)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_stack_warp_matches_single():
    rng = np.random.default_rng(2)
    imgs = rng.random((3, 9, 9))
    fields = rng.normal(0, 1, (3, 9, 9, 2))
    out = warp_image(imgs, fields)
    for n in range(3):
        np.testing.assert_allclose(out[n], warp_image(imgs[n], fields[n]), atol=1e-14)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        warp_image(np.zeros((8, 8)), np.zeros((8, 9, 2)))


def test_mask_zero_field_and_integer_shift():
    rng = np.random.default_rng(3)
    mask = rng.integers(0, 6, (10, 10)).astype(np.uint8)
    np.testing.assert_array_equal(warp_mask(mask, np.zeros((10, 10, 2))), mask)
    field = np.zeros((10, 10, 2))
    field[..., 0] = 2.0
    out = warp_mask(mask, field, 6)
    np.testing.assert_array_equal(out[:, :-2], mask[:, 2:])


def test_mask_tie_goes_to_smaller_label():
    mask = np.zeros((8, 8), np.uint8)
    mask[:, 4:] = 3
    mask[:, :4] = 5
    field = np.zeros((8, 8, 2))
    field[:, 3, 0] = 0.5  # halfway between a 5 and a 3
    assert warp_mask(mask, field)[0, 3] == 3


def test_compose_constants_add():
    a = np.zeros((8, 8, 2)); a[..., 0] = 1.0
    b = np.zeros((8, 8, 2)); b[..., 1] = -0.5
    np.testing.assert_allclose(compose(a, b)[2:6, 2:6], np.broadcast_to([1.0, -0.5], (4, 4, 2)))


def test_compose_with_zero_is_identity():
    f = smooth_field(np.random.default_rng(4), 12, 12)
    z = np.zeros_like(f)
    np.testing.assert_allclose(compose(f, z), f, atol=1e-14)
    np.testing.assert_allclose(compose(z, f), f, atol=1e-14)


def test_compose_warps_sequentially():
    # warping by compose(a, b) equals warping by a, then by b
    rng = np.random.default_rng(5)
    a = smooth_field(rng, 24, 24)
    b = smooth_field(rng, 24, 24)
    img = np.add.outer(np.arange(24.0), 2 * np.arange(24.0))  # linear, so bilinear is exact
    once = warp_image(img, compose(a, b))
    twice = warp_image(warp_image(img, a), b)
    np.testing.assert_allclose(once[4:-4, 4:-4], twice[4:-4, 4:-4], atol=1e-10)


def test_invert_translation():
    f = np.zeros((16, 16, 2))
    f[..., 0] = 1.5
    res = invert_field(f, tol=1e-8)
    assert res.converged
    np.testing.assert_allclose(res.field[:, :14, 0], -1.5, atol=1e-8)


def test_invert_zero():
    res = invert_field(np.zeros((8, 8, 2)))
    assert res.converged and res.iterations == 1 and res.residual == 0.0


def test_inversion_residual_small_for_smooth_fields():
    rng = np.random.default_rng(6)
    for _ in range(5):
        f = smooth_field(rng, 32, 32)
        res = invert_field(f, tol=1e-4)
        r = np.linalg.norm(compose(f, res.field), axis=-1)
        assert res.converged and r.max() < 0.05


def test_non_convergence_is_reported_not_raised(caplog):
    f = np.zeros((16, 16, 2))
    f[..., 0] = 1.0
    res = invert_field(f, max_iters=1)
    assert not res.converged
    assert "did not converge" in caplog.text


def test_relative_field():
    T = 3
    f = np.zeros((T, 16, 16, 2))
    for n in range(T):
        f[n, ..., 0] = n * 0.5
    rel = relative_field(2, 0, f, tol=1e-8)
    np.testing.assert_allclose(rel[:, :10, 0], 1.0, atol=1e-8)
    np.testing.assert_allclose(relative_field(1, 1, f, tol=1e-8)[:, :10], 0.0, atol=1e-8)
    with pytest.raises(IndexError):
        relative_field(3, 0, f)


def test_jacobian_identity_and_linear():
    np.testing.assert_array_equal(jacobian_determinant(np.zeros((2, 8, 8, 2))), 1.0)
    ys, xs = np.mgrid[0:8, 0:8].astype(float)
    f = np.stack([0.1 * xs + 0.2 * ys, -0.3 * xs + 0.05 * ys], axis=-1)
    np.testing.assert_allclose(jacobian_determinant(f), 1.1 * 1.05 - 0.2 * -0.3, atol=1e-12)


def test_jacobian_central_differences_inside():
    f = np.random.default_rng(7).normal(size=(9, 9, 2))
    det = jacobian_determinant(f)
    y, x = 4, 4
    dxx = (f[y, x + 1, 0] - f[y, x - 1, 0]) / 2
    dxy = (f[y + 1, x, 0] - f[y - 1, x, 0]) / 2
    dyx = (f[y, x + 1, 1] - f[y, x - 1, 1]) / 2
    dyy = (f[y + 1, x, 1] - f[y - 1, x, 1]) / 2
    assert det[y, x] == pytest.approx((1 + dxx) * (1 + dyy) - dxy * dyx, abs=1e-12)


def test_sample_points_matches_oracle():
    rng = np.random.default_rng(8)
    f = rng.normal(size=(10, 12, 2))
    pts = rng.uniform(-1, 13, (20, 2))
    out = sample_points(f, pts)
    for (x, y), v in zip(pts, out):
        assert v[0] == pytest.approx(bilinear(f[..., 0], x, y), abs=1e-12)
        assert v[1] == pytest.approx(bilinear(f[..., 1], x, y), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_translation_inverse_property(tx, ty):
    f = np.zeros((16, 16, 2))
    f[..., 0], f[..., 1] = tx, ty
    res = invert_field(f, tol=1e-9)
    inside = (slice(3, 13), slice(3, 13))
    np.testing.assert_allclose(res.field[inside][..., 0], -tx, atol=1e-8)
    np.testing.assert_allclose(res.field[inside][..., 1], -ty, atol=1e-8)
