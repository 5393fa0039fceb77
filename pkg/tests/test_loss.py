import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinegroup import RegistrationConfig
from cinegroup.anatomy import distance_transform
from cinegroup.loss import (LossBreakdown, average_template, ce_loss, composite_loss, cyclic_loss, dice_loss,
                            distance_similarity_loss, lncc, pca_template, similarity_loss, smoothness_loss)
from cinegroup.warp import warp_image

import oracles
from conftest import smooth_field


# LNCC

def test_lncc_identity_and_affine():
    a = np.random.default_rng(0).random((20, 20))
    assert lncc(a, a) == pytest.approx(1.0, abs=1e-6)
    assert lncc(a, 2 * a + 3) == pytest.approx(1.0, abs=1e-6)
    assert lncc(a, -a) == pytest.approx(-1.0, abs=1e-6)


def test_lncc_noise_is_uncorrelated():
    vals = []
    for s in range(10):
        rng = np.random.default_rng(100 + s)
        vals.append(lncc(rng.random((64, 64)), rng.random((64, 64)), 9))
    assert max(abs(v) for v in vals) < 0.05


def test_lncc_matches_window_oracle():
    rng = np.random.default_rng(1)
    a = rng.random((12, 11))
    b = 0.5 * a + rng.random((12, 11))
    a[:4, :4] = 0.3  # a flat patch so some windows drop out
    for w in (3, 5):
        assert lncc(a, b, w) == pytest.approx(oracles.lncc(a, b, w), abs=1e-10)


def test_lncc_constant_images_score_zero():
    assert lncc(np.ones((10, 10)), np.ones((10, 10)), 3) == 0.0


@pytest.mark.parametrize("window", [4, 0, 2.5, 21])
def test_lncc_bad_window(window):
    with pytest.raises(ValueError):
        lncc(np.zeros((10, 10)), np.zeros((10, 10)), window)


# templates

def test_average_template():
    img = np.random.default_rng(2).random((6, 6))
    np.testing.assert_allclose(average_template(np.stack([img] * 3)).pixels, img)
    two = np.stack([np.zeros((4, 4)), np.ones((4, 4))])
    np.testing.assert_allclose(average_template(two).pixels, 0.5)
    stack = np.random.default_rng(3).random((5, 7, 7))
    ref = np.array([[sum(stack[n, y, x] for n in range(5)) / 5 for x in range(7)] for y in range(7)])
    np.testing.assert_allclose(average_template(stack).pixels, ref, atol=1e-7)


def test_pca_template_fallback_on_identical_frames():
    img = np.random.default_rng(4).random((6, 6))
    t = pca_template(np.stack([img] * 4))
    np.testing.assert_allclose(t.pixels, img, atol=1e-12)
    np.testing.assert_allclose(t.weights, 0.25)


def test_pca_weights_two_frames_closed_form():
    rng = np.random.default_rng(5)
    stack = rng.random((2, 8, 8))
    stack[1] = 0.6 * stack[1] + 0.7 * stack[0]
    X = stack.reshape(2, -1)
    Xc = X - X.mean(axis=1, keepdims=True)
    (a, b), (_, c) = Xc @ Xc.T / X.shape[1]
    lam = (a + c) / 2 + math.sqrt(((a - c) / 2) ** 2 + b * b)
    v = np.array([b, lam - a])
    v = v / v.sum()
    t = pca_template(stack)
    np.testing.assert_allclose(t.weights, v, atol=1e-8)
    np.testing.assert_allclose(t.pixels, np.tensordot(v, stack, 1), atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 6))
def test_pca_weights_sum_to_one(seed, T):
    stack = np.random.default_rng(seed).random((T, 6, 6))
    assert pca_template(stack).weights.sum() == pytest.approx(1.0, abs=1e-10)


# similarity

def test_similarity_cases():
    tmpl = np.random.default_rng(6).random((16, 16))
    assert similarity_loss(np.stack([tmpl] * 3), tmpl) == pytest.approx(0.0, abs=1e-6)
    alt = np.stack([tmpl, -tmpl, tmpl, -tmpl])
    assert similarity_loss(alt, tmpl) == pytest.approx(1.0, abs=1e-6)


def test_similarity_matches_per_frame_oracle():
    rng = np.random.default_rng(7)
    stack = rng.random((3, 10, 10))
    tmpl = stack.mean(axis=0)
    ref = 1 - np.mean([oracles.lncc(f, tmpl, 5) for f in stack])
    assert similarity_loss(stack, tmpl, 5) == pytest.approx(ref, abs=1e-6)


# smoothness

def smoothness_oracle(f, eps=1e-6):
    N, H, W, _ = f.shape
    s = 0.0
    for n in range(N):
        for y in range(H):
            for x in range(W):
                for c in range(2):
                    if x + 1 < W:
                        s += math.sqrt((f[n, y, x + 1, c] - f[n, y, x, c]) ** 2 + eps * eps) - eps
                    if y + 1 < H:
                        s += math.sqrt((f[n, y + 1, x, c] - f[n, y, x, c]) ** 2 + eps * eps) - eps
    return s / (2 * N * H * W)


def test_smoothness_constant_and_linear():
    f = np.full((3, 16, 16, 2), 0.7)
    assert smoothness_loss(f) == 0.0
    xs = np.arange(64.0)
    lin = np.zeros((4, 64, 64, 2))
    lin[..., 0] = 0.1 * xs[None, None, :]
    assert smoothness_loss(lin) == pytest.approx(0.05, rel=0.05)


def test_smoothness_matches_loop_oracle():
    f = np.random.default_rng(8).normal(size=(2, 5, 6, 2))
    assert smoothness_loss(f) == pytest.approx(smoothness_oracle(f), abs=1e-8)


# cyclic

def cyclic_oracle(f):
    N, H, W, _ = f.shape
    s = 0.0
    for y in range(H):
        for x in range(W):
            for c in range(2):
                s += sum(f[n, y, x, c] for n in range(N)) ** 2
    return math.sqrt(s / (2 * N * H * W))


@pytest.mark.parametrize("N,t", [(2, 0.3), (5, -1.2), (25, 2.0)])
def test_cyclic_constant_closed_form(N, t):
    f = np.zeros((N, 8, 8, 2))
    f[..., 0] = t
    assert cyclic_loss(f) == pytest.approx(abs(t) * math.sqrt(N / 2), abs=1e-10)


def test_cyclic_zero_sum_and_oracle():
    rng = np.random.default_rng(9)
    f = rng.normal(size=(4, 6, 6, 2))
    assert cyclic_loss(f - f.mean(axis=0)) < 1e-7
    assert cyclic_loss(f) == pytest.approx(cyclic_oracle(f), abs=1e-10)


# segmentation

def _block_masks():
    gt = np.zeros((2, 12, 12), np.uint8)
    for k in range(1, 6):
        gt[:, 2 * k - 2:2 * k, 0:4] = k
    return gt


def test_dice_loss_cases():
    gt = _block_masks()
    assert dice_loss(gt, gt) == pytest.approx(0.0, abs=1e-6)
    disjoint = np.zeros_like(gt)
    for k in range(1, 6):
        disjoint[:, 2 * k - 2:2 * k, 6:10] = k
    assert dice_loss(disjoint, gt) == pytest.approx(1.0, abs=1e-6)
    half = np.zeros_like(gt)
    for k in range(1, 6):
        half[:, 2 * k - 2:2 * k, 2:4] = k   # half of the structure ...
        half[:, 2 * k - 2:2 * k, 6:8] = k   # ... plus an equal area outside
    assert dice_loss(half, gt) == pytest.approx(0.5, abs=1e-6)
    only_half = np.zeros_like(gt)
    for k in range(1, 6):
        only_half[:, 2 * k - 2:2 * k, 2:4] = k
    assert dice_loss(only_half, gt) == pytest.approx(1 / 3, abs=1e-6)


def test_ce_loss_cases():
    gt = _block_masks()
    assert ce_loss(gt, gt) == pytest.approx(0.0, abs=1e-12)
    uniform = np.full((2, 6, 12, 12), 1 / 6)
    assert ce_loss(uniform, gt) == pytest.approx(math.log(6), abs=1e-12)
    half = np.zeros((2, 6, 12, 12))
    for k in range(6):
        half[:, k][gt == k] = 0.5
        half[:, (k + 1) % 6][gt == k] = 0.5
    assert ce_loss(half, gt) == pytest.approx(math.log(2), abs=1e-12)


# distance similarity

def test_distance_similarity_cases(small_phantom):
    maps = distance_transform(small_phantom.masks).maps
    static = np.stack([maps[0]] * 4)
    assert distance_similarity_loss(static, maps[0]) == pytest.approx(0.0, abs=1e-6)
    zero = np.zeros(small_phantom.fields.fields.shape[1:])
    warped = np.stack([np.stack([warp_image(m, zero) for m in maps[0]])] * 3)
    assert distance_similarity_loss(warped, maps[0]) == pytest.approx(0.0, abs=1e-6)


def test_distance_similarity_matches_oracle():
    rng = np.random.default_rng(10)
    masks = np.zeros((2, 12, 12), np.uint8)
    masks[:, 3:8, 2:7] = 1
    masks[:, 5:10, 7:11] = 3
    maps = distance_transform(masks).maps
    warped = np.stack([np.stack([warp_image(m, smooth_field(rng, 12, 12, 0.3)) for m in maps[n]])
                       for n in range(2)])
    tmpl = warped.mean(axis=0)
    ref = 1 - np.mean([oracles.lncc(warped[n, k], tmpl[k], 5) for n in range(2) for k in range(5)])
    assert distance_similarity_loss(warped, tmpl, 5) == pytest.approx(ref, abs=1e-6)


# composite

def test_composite_static_zero_is_zero(small_phantom):
    static = np.stack([small_phantom.sequence.frames[0]] * 4)
    b = composite_loss(static, np.zeros(static.shape + (2,)))
    assert b.total == pytest.approx(0.0, abs=1e-6)
    assert b.similarity_d == b.seg_r == b.seg_s == 0.0


def test_composite_without_anatomy_terms(small_phantom):
    cfg = RegistrationConfig(w0=0, w1=0, w2=0)
    f = small_phantom.fields.fields
    b = composite_loss(small_phantom.sequence, f, cfg)
    assert b.total == pytest.approx(b.similarity + 0.8 * b.smoothness + 0.01 * b.cyclic, abs=1e-12)
    assert b.cyclic < 1e-10  # ground-truth motion sums to zero


def test_composite_total_invariant_with_masks(small_phantom):
    cfg = RegistrationConfig()
    b = composite_loss(small_phantom.sequence, small_phantom.fields.fields, cfg, small_phantom.masks)
    recomputed = (b.similarity + cfg.lambda0 * b.smoothness + cfg.lambda1 * b.cyclic + cfg.w0 * b.similarity_d
                  + cfg.w1 * b.seg_r + cfg.w2 * b.seg_s)
    assert abs(b.total - recomputed) < 1e-10
    assert b.seg_s == 0.0 and b.similarity_d > 0 and b.seg_r > 0


def test_composite_without_masks_zeroes_anatomy(small_phantom):
    b = composite_loss(small_phantom.sequence, small_phantom.fields.fields, RegistrationConfig())
    assert b.similarity_d == b.seg_r == b.seg_s == 0.0
    with pytest.raises(ValueError):
        composite_loss(small_phantom.sequence, small_phantom.fields.fields[:3])


def test_breakdown_row_order():
    b = LossBreakdown.from_terms(dict(similarity=1, smoothness=2, cyclic=3, similarity_d=4, seg_r=5, seg_s=6),
                                 RegistrationConfig())
    assert b.as_row()[-1] == pytest.approx(1 + 0.8 * 2 + 0.01 * 3 + 5 * 4 + 5 + 6)
