"""Bilinear warping, field composition, fixed-point inversion and Jacobians.

The torch kernels (``*_t``) operate on batched float64 tensors and are
differentiable; they back both the numpy API below and the loss terms used
by the optimiser.  All sampling replicates the border.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .core import check_fields

log = logging.getLogger(__name__)

DTYPE = torch.float64


def _t(a):
    return torch.as_tensor(np.array(a, dtype=np.float64), dtype=DTYPE)


def identity_grid(H, W, like=None):
    dtype = DTYPE if like is None else like.dtype
    ys, xs = torch.meshgrid(torch.arange(H, dtype=dtype), torch.arange(W, dtype=dtype), indexing="ij")
    return xs, ys


def sample(values, x, y):
    """Bilinearly sample ``values`` (B, C, H, W) at pixel coordinates ``x``, ``y`` (B, h, w).

    Coordinates are clamped to the image, which is equivalent to replicate
    padding for values and gives zero gradient outside the grid.
    """
    B, C, H, W = values.shape
    x = x.clamp(0, W - 1)
    y = y.clamp(0, H - 1)
    x0 = torch.floor(x).clamp(max=max(W - 2, 0))
    y0 = torch.floor(y).clamp(max=max(H - 2, 0))
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)

    flat = values.reshape(B, C, H * W)
    out_shape = (B, C) + x.shape[1:]

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(B, 1, -1).expand(B, C, -1)
        return torch.gather(flat, 2, idx).reshape(out_shape)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def warp_t(values, fields):
    """``out(x) = values(x + phi(x))`` for values (B, C, H, W) and fields (B, H, W, 2)."""
    H, W = fields.shape[1:3]
    xs, ys = identity_grid(H, W, fields)
    return sample(values, xs + fields[..., 0], ys + fields[..., 1])


def sample_field(field, disp):
    """Sample ``field`` (B, H, W, 2) at ``x + disp(x)``; returns (B, H, W, 2)."""
    out = warp_t(field.permute(0, 3, 1, 2), disp)
    return out.permute(0, 2, 3, 1)


def compose_t(outer, inner):
    return inner + sample_field(outer, inner)


def _iterate(field, tol, max_iters, v, damping):
    update = float("inf")
    it = 0
    while it < max_iters:
        it += 1
        v_new = -sample_field(field, v)
        if damping != 1.0:
            v_new = v + damping * (v_new - v)
        update = (v_new - v).abs().amax().item()
        v = v_new
        if update < tol:
            break
    return v, it, update < tol


def _fixed_point(field, tol, max_iters, init=None, relax=True):
    """Solve ``v = -phi(x + v)``; plain iteration first, a half-step relaxation if that stalls.

    The plain map oscillates once the field's slope exceeds one somewhere,
    even without folding; the relaxed map shares its fixed point and
    contracts for slopes up to three.
    """
    v0 = torch.zeros_like(field) if init is None else init.clone()
    v, it, ok = _iterate(field, tol, max_iters, v0, 1.0)
    if ok or not relax:
        return v, it, ok
    v, it2, ok = _iterate(field, tol, max_iters, v0, 0.5)
    return v, it + it2, ok


class _FixedPointInverse(torch.autograd.Function):
    """Inverse displacement with an implicit-function gradient.

    At the fixed point ``v + phi(x + v) = 0``; differentiating gives
    ``dv = -(I + J)^-1 dS`` with ``J`` the per-pixel 2x2 Jacobian of the
    sampled field with respect to ``v``.
    """

    @staticmethod
    def forward(ctx, field, tol, max_iters, init, relax):
        v, it, converged = _fixed_point(field, tol, max_iters, init, relax)
        ctx.save_for_backward(field, v)
        ctx.info = (it, converged)
        return v

    @staticmethod
    def backward(ctx, grad_v):
        field, v = ctx.saved_tensors
        with torch.enable_grad():
            f = field.detach().requires_grad_(True)
            vv = v.detach().requires_grad_(True)
            s = sample_field(f, vv)
            rows = [torch.autograd.grad(s[..., c].sum(), vv, retain_graph=True)[0] for c in range(2)]
            J = torch.stack(rows, dim=-2)  # (..., c, d) = ds_c / dv_d
            A = torch.eye(2, dtype=v.dtype) + J
            lam = torch.linalg.solve(A.transpose(-1, -2), grad_v.unsqueeze(-1)).squeeze(-1)
            (grad_f,) = torch.autograd.grad(s, f, grad_outputs=lam)
        return -grad_f, None, None, None, None


def invert_t(field, tol=1e-10, max_iters=200, init=None, relax=True):
    """Differentiable fixed-point inverse of a batch of fields (B, H, W, 2)."""
    return _FixedPointInverse.apply(field, tol, max_iters, init, relax)


# ---------------------------------------------------------------------------
# numpy API


def _image_batch(image):
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        return _t(a)[None, None], lambda out: out[0, 0]
    if a.ndim == 3:
        return _t(a)[:, None], lambda out: out[:, 0]
    raise ValueError(f"expected H x W or T x H x W images, got {a.shape}")


def _field_batch(field):
    f = check_fields(field)
    return _t(f if f.ndim == 4 else f[None])


def _check_pair(image_shape, field):
    if np.shape(field)[:-1] != tuple(image_shape):
        raise ValueError(f"field shape {np.shape(field)} does not match image shape {tuple(image_shape)}")


def warp_image(image, field):
    """Pull ``image`` through ``field``: ``out(x) = image(x + field(x))``.

    Accepts a single ``H x W`` image with an ``H x W x 2`` field or
    matching ``T``-stacks of both.
    """
    _check_pair(np.shape(image), field)
    imgs, unpack = _image_batch(image)
    with torch.no_grad():
        out = warp_t(imgs, _field_batch(field))
    return unpack(out).numpy()


def one_hot(labels, n_classes):
    labels = np.asarray(labels)
    return (labels[..., None, :, :] == np.arange(n_classes)[:, None, None]).astype(np.float64)


def warp_mask(mask, field, n_labels=None):
    """Warp a label map by bilinearly warping each label indicator and taking the argmax.

    Ties resolve to the smaller label index.
    """
    mask = np.asarray(mask)
    _check_pair(mask.shape, field)
    if n_labels is None:
        n_labels = int(mask.max()) + 1
    oh = one_hot(mask, n_labels)
    single = mask.ndim == 2
    if single:
        oh = oh[None]
    with torch.no_grad():
        probs = warp_t(_t(oh), _field_batch(field)).numpy()
    out = np.argmax(probs, axis=1).astype(np.uint8)
    return out[0] if single else out


def compose(outer, inner):
    """Displacement of ``T_outer o T_inner``: ``inner(x) + outer(x + inner(x))``."""
    if np.shape(outer) != np.shape(inner):
        raise ValueError(f"cannot compose fields of shapes {np.shape(outer)} and {np.shape(inner)}")
    single = np.ndim(outer) == 3
    with torch.no_grad():
        out = compose_t(_field_batch(outer), _field_batch(inner)).numpy()
    return out[0] if single else out


@dataclass(frozen=True)
class InversionResult:
    field: np.ndarray
    iterations: int
    residual: float  # max |compose(field, inverse)| in pixels, over the batch
    converged: bool
    residuals: np.ndarray = None  # per-frame residuals for stacked input


def invert_field(field, tol=0.01, max_iters=100, warn_folding=True):
    """Fixed-point inverse ``v_{k+1}(x) = -phi(x + v_k(x))`` starting from zero.

    Iterates until the largest per-pixel update falls below ``tol`` pixels or
    ``max_iters`` is reached; if that fails, the iteration restarts with
    half-steps for another ``max_iters``.  Non-convergence is reported through the
    result, never raised.
    """
    f = _field_batch(field)
    single = np.ndim(field) == 3
    if warn_folding and np.any(jacobian_determinant(np.asarray(field, dtype=np.float64)) <= 0):
        log.warning("field folds (Jacobian <= 0); its inverse is not well defined")
    with torch.no_grad():
        v, it, converged = _fixed_point(f, tol, max_iters)
        res = compose_t(f, v).norm(dim=-1).amax(dim=(1, 2)).numpy()
    if not converged:
        log.warning("field inversion did not converge in %d iterations (residual %.3g px)", it, res.max())
    v = v.numpy()
    return InversionResult(v[0] if single else v, it, float(res.max()), bool(converged), res)


def relative_field(i, j, fields, tol=0.01, max_iters=100):
    """Displacement of ``T_i o T_j^-1``, mapping frame-``j`` coordinates to frame ``i``."""
    fields = np.asarray(fields)
    T = fields.shape[0]
    for k in (i, j):
        if not -T <= k < T:
            raise IndexError(f"frame index {k} out of range for {T} frames")
    inv = invert_field(fields[j], tol, max_iters)
    return compose(fields[i], inv.field)


def jacobian_determinant(field):
    """Determinant of ``d(x + phi)/dx`` for fields of shape (..., H, W, 2).

    Central differences inside, one-sided differences on the border.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.shape[-1] != 2 or f.ndim < 3:
        raise ValueError(f"expected (..., H, W, 2) field, got {f.shape}")
    if f.shape[-3] < 3 or f.shape[-2] < 3:
        raise ValueError("Jacobian needs at least a 3 x 3 grid")
    ax_y, ax_x = f.ndim - 3, f.ndim - 2
    dxx = np.gradient(f[..., 0], axis=ax_x)
    dxy = np.gradient(f[..., 0], axis=ax_y)
    dyx = np.gradient(f[..., 1], axis=ax_x)
    dyy = np.gradient(f[..., 1], axis=ax_y)
    return (1.0 + dxx) * (1.0 + dyy) - dxy * dyx


def sample_points(field, points):
    """Bilinearly sample an ``H x W x 2`` field at (N, 2) points; border replicated."""
    f = _t(check_fields(field)).permute(2, 0, 1)[None]
    p = _t(points).reshape(1, 1, -1, 2)
    with torch.no_grad():
        out = sample(f, p[..., 0], p[..., 1])
    return out[0, :, 0].T.numpy().reshape(np.shape(points))
