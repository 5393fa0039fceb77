"""Loss terms of the joint groupwise objective.

Every term has a differentiable torch kernel (suffix ``_t``) used by the
solver, and a numpy-facing wrapper returning plain floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import LabelMaskSet, ProbabilityMaskSet, RegistrationConfig, check_labels
from .warp import DTYPE, _t, compose_t, invert_t, warp_t

VAR_EPS = 1e-5
WARM_INVERSE_ITERS = 5  # fixed-point steps per optimiser step when warm-started
DICE_EPS = 1e-7
CE_FLOOR = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    similarity: float
    smoothness: float
    cyclic: float
    similarity_d: float
    seg_r: float
    seg_s: float
    total: float

    @classmethod
    def from_terms(cls, terms, config):
        t = {k: float(terms[k]) for k in ("similarity", "smoothness", "cyclic", "similarity_d", "seg_r", "seg_s")}
        total = (t["similarity"] + config.lambda0 * t["smoothness"] + config.lambda1 * t["cyclic"]
                 + config.w0 * t["similarity_d"] + config.w1 * t["seg_r"] + config.w2 * t["seg_s"])
        return cls(total=total, **t)

    def as_row(self):
        return [self.similarity, self.smoothness, self.cyclic, self.similarity_d, self.seg_r, self.seg_s, self.total]


FIELDS = ("similarity", "smoothness", "cyclic", "similarity_d", "seg_r", "seg_s", "total")


@dataclass(frozen=True)
class TemplateImage:
    pixels: np.ndarray
    weights: np.ndarray = None


# ---------------------------------------------------------------------------
# LNCC


def lncc_t(a, b, window):
    """Windowed normalised cross-correlation of image batches ``a``, ``b`` (B, H, W).

    Windows in which either image has local variance below ``VAR_EPS`` are
    left out of the average.  Returns one value per batch entry.
    """
    r = window // 2
    x = torch.stack([a, b], dim=1)
    x = F.pad(x, (r, r, r, r), mode="replicate")
    pa, pb = x[:, 0], x[:, 1]
    stats = torch.stack([pa, pb, pa * pa, pb * pb, pa * pb], dim=1)
    m = F.avg_pool2d(stats, window, stride=1)
    mu_a, mu_b = m[:, 0], m[:, 1]
    var_a = m[:, 2] - mu_a * mu_a
    var_b = m[:, 3] - mu_b * mu_b
    cov = m[:, 4] - mu_a * mu_b
    valid = (var_a >= VAR_EPS) & (var_b >= VAR_EPS)
    denom = torch.sqrt(torch.where(valid, var_a * var_b, torch.ones_like(var_a)))
    ncc = torch.where(valid, cov / denom, torch.zeros_like(cov))
    count = valid.sum(dim=(1, 2))
    return ncc.sum(dim=(1, 2)) / count.clamp(min=1)


def _check_window(shape, window):
    if int(window) != window or window % 2 == 0 or window < 1:
        raise ValueError(f"LNCC window must be an odd integer, got {window}")
    if window > min(shape[-2:]):
        raise ValueError(f"window {window} exceeds image size {shape[-2:]}")


def lncc(a, b, window=9):
    """Local normalised cross-correlation in [-1, 1] of two ``H x W`` images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"lncc needs two equal-shape 2D images, got {a.shape} and {b.shape}")
    _check_window(a.shape, window)
    with torch.no_grad():
        return float(lncc_t(_t(a)[None], _t(b)[None], int(window))[0])


# ---------------------------------------------------------------------------
# templates


def average_template_t(warped):
    return warped.mean(dim=0)


class _LeadingEigvec(torch.autograd.Function):
    """Leading eigenvector of a symmetric matrix by power iteration.

    Backward uses first-order eigenvector perturbation,
    ``dv = (lambda I - C)^+ dC v``.
    """

    @staticmethod
    def forward(ctx, C, tol, max_iters):
        n = C.shape[0]
        v = torch.ones(n, dtype=C.dtype) + 1e-3 * torch.linspace(-1, 1, n, dtype=C.dtype)
        v = v / v.norm()
        for _ in range(max_iters):
            w = C @ v
            nw = w.norm()
            if nw == 0:
                break
            w = w / nw
            done = (w - v).norm() < tol
            v = w
            if done:
                break
        lam = v @ C @ v
        ctx.save_for_backward(C, v, lam)
        return v, lam

    @staticmethod
    def backward(ctx, grad_v, grad_lam):
        C, v, lam = ctx.saved_tensors
        n = C.shape[0]
        P = torch.eye(n, dtype=C.dtype) - torch.outer(v, v)
        A = lam * torch.eye(n, dtype=C.dtype) - C + lam * torch.outer(v, v)
        u = P @ torch.linalg.solve(A, P @ grad_v)
        grad_C = torch.outer(u, v)
        if grad_lam is not None:
            grad_C = grad_C + grad_lam * torch.outer(v, v)
        return grad_C, None, None


def pca_weights_t(warped, tol=1e-10, max_iters=1000):
    """Template weights from the leading eigenvector of the T x T frame covariance.

    Returns ``None`` when the covariance is degenerate.
    """
    T = warped.shape[0]
    X = warped.reshape(T, -1)
    Xc = X - X.mean(dim=1, keepdim=True)
    C = Xc @ Xc.T / X.shape[1]
    v, lam = _LeadingEigvec.apply(C, tol, max_iters)
    s = v.sum()
    if lam.item() < 1e-12 or abs(s.item()) < 1e-12:
        return None
    v = v * torch.sign(s).detach()
    return v / v.sum()


def pca_template_t(warped):
    w = pca_weights_t(warped)
    if w is None:
        return average_template_t(warped), None
    return torch.tensordot(w, warped, dims=1), w


def template_t(warped, mode):
    if mode == "pca":
        return pca_template_t(warped)[0]
    return average_template_t(warped)


def _check_stack(warped):
    warped = np.asarray(warped, dtype=np.float64)
    if warped.ndim != 3 or warped.shape[0] < 2:
        raise ValueError(f"expected a T x H x W stack with T >= 2, got {warped.shape}")
    return warped


def average_template(warped):
    warped = _check_stack(warped)
    return TemplateImage(warped.mean(axis=0))


def pca_template(warped):
    """PCA-weighted template; falls back to the mean when the covariance vanishes."""
    warped = _check_stack(warped)
    with torch.no_grad():
        pix, w = pca_template_t(_t(warped))
    if w is None:
        T = warped.shape[0]
        return TemplateImage(pix.numpy(), np.full(T, 1.0 / T))
    return TemplateImage(pix.numpy(), w.numpy())


# ---------------------------------------------------------------------------
# similarity and regularisers


def similarity_t(warped, template, window):
    """``1 - mean_n LNCC(warped_n, template)``."""
    return 1.0 - lncc_t(warped, template.expand_as(warped), window).mean()


def similarity_loss(warped, template, window=9):
    warped = _check_stack(warped)
    template = np.asarray(template, dtype=np.float64)
    if template.shape != warped.shape[1:]:
        raise ValueError("template shape does not match frames")
    _check_window(template.shape, window)
    with torch.no_grad():
        return float(similarity_t(_t(warped), _t(template), int(window)))


def smoothness_t(fields, eps=1e-6):
    """Charbonnier-smoothed l1 norm of forward differences, ``1/(2 N |Omega|)`` normalised.

    Each term is ``sqrt(d^2 + eps^2) - eps`` so that constant fields score
    exactly zero.
    """
    N, H, W, _ = fields.shape
    gx = fields[:, :, 1:] - fields[:, :, :-1]
    gy = fields[:, 1:] - fields[:, :-1]
    total = (torch.sqrt(gx * gx + eps * eps) - eps).sum() + (torch.sqrt(gy * gy + eps * eps) - eps).sum()
    return total / (2 * N * H * W)


def smoothness_loss(fields, eps=1e-6):
    f = np.asarray(fields, dtype=np.float64)
    with torch.no_grad():
        return float(smoothness_t(_t(f), eps))


def _safe_sqrt(q):
    # zero subgradient at the origin instead of an infinite one
    pos = q > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, q, torch.ones_like(q))), torch.zeros_like(q))


def cyclic_t(fields):
    N, H, W, _ = fields.shape
    s = fields.sum(dim=0)
    return _safe_sqrt((s * s).sum() / (2 * N * H * W))


def cyclic_loss(fields):
    f = np.asarray(fields, dtype=np.float64)
    with torch.no_grad():
        return float(cyclic_t(_t(f)))


# ---------------------------------------------------------------------------
# segmentation losses


def one_hot_t(labels, n_classes):
    return (labels.unsqueeze(1) == torch.arange(n_classes).view(1, -1, 1, 1)).to(DTYPE)


def dice_t(pred, gt_onehot):
    """Soft Dice loss over foreground channels; inputs (T, K+1, H, W)."""
    inter = (pred[:, 1:] * gt_onehot[:, 1:]).sum(dim=(0, 2, 3))
    denom = pred[:, 1:].sum(dim=(0, 2, 3)) + gt_onehot[:, 1:].sum(dim=(0, 2, 3)) + DICE_EPS
    return 1.0 - (2.0 * inter / denom).mean()


def ce_t(pred, gt_labels):
    p = torch.gather(pred, 1, gt_labels.long().unsqueeze(1)).squeeze(1)
    return -torch.log(p.clamp(CE_FLOOR, 1.0)).mean()


def _as_labels(m):
    if isinstance(m, LabelMaskSet):
        return m.labels, m.n_structures
    a = check_labels(m)
    return a, 5


def _as_probs(pred, K):
    if isinstance(pred, ProbabilityMaskSet):
        return pred.probs
    p = np.asarray(pred)
    if p.ndim == 4:
        return ProbabilityMaskSet(p).probs
    labels, _ = _as_labels(pred)
    return np.moveaxis(labels[..., None] == np.arange(K + 1), -1, -3).astype(np.float64)


def dice_loss(pred, gt):
    """``1 - mean_k`` soft Dice over foreground structures, pooled over all frames."""
    gt_labels, K = _as_labels(gt)
    probs = _as_probs(pred, K)
    if probs.shape[0] != gt_labels.shape[0] or probs.shape[2:] != gt_labels.shape[1:]:
        raise ValueError(f"prediction {probs.shape} and ground truth {gt_labels.shape} disagree")
    with torch.no_grad():
        gt_oh = one_hot_t(torch.as_tensor(gt_labels.astype(np.int64)), probs.shape[1])
        return float(dice_t(_t(probs), gt_oh))


def ce_loss(pred, gt):
    """Mean over pixels of ``-log p(true class)``, probabilities clamped to [1e-12, 1]."""
    gt_labels, K = _as_labels(gt)
    probs = _as_probs(pred, K)
    if probs.shape[0] != gt_labels.shape[0] or probs.shape[2:] != gt_labels.shape[1:]:
        raise ValueError(f"prediction {probs.shape} and ground truth {gt_labels.shape} disagree")
    with torch.no_grad():
        return float(ce_t(_t(probs), torch.as_tensor(gt_labels.astype(np.int64))))


def distance_similarity_t(warped_maps, window):
    """``1 - mean_{n,k} LNCC(warped_maps[n, k], template_maps[k])`` with the template the frame mean."""
    T, K, H, W = warped_maps.shape
    template = warped_maps.mean(dim=0, keepdim=True).expand_as(warped_maps)
    return 1.0 - lncc_t(warped_maps.reshape(T * K, H, W), template.reshape(T * K, H, W), window).mean()


def distance_similarity_loss(warped_maps, template_maps, window=9):
    m = np.asarray(getattr(warped_maps, "maps", warped_maps), dtype=np.float64)
    tmpl = np.asarray(template_maps, dtype=np.float64)
    if m.ndim != 4 or tmpl.shape != m.shape[1:]:
        raise ValueError(f"template maps {tmpl.shape} do not match warped maps {m.shape}")
    _check_window(tmpl.shape, window)
    T, K, H, W = m.shape
    with torch.no_grad():
        tt = _t(tmpl)[None].expand(T, K, H, W).reshape(T * K, H, W)
        return float(1.0 - lncc_t(_t(m).reshape(T * K, H, W), tt, int(window)).mean())


# ---------------------------------------------------------------------------
# composite objective


@dataclass
class Guidance:
    """Per-frame anatomical inputs, precomputed once per pyramid level."""

    labels: torch.Tensor        # (T, H, W) int64
    distance_maps: torch.Tensor  # (T, K, H, W)
    ed_index: int
    n_classes: int

    @classmethod
    def from_masks(cls, labels, n_structures=5, ed_index=None):
        from .anatomy import distance_transform, find_ed_es

        labels = np.asarray(labels)
        if ed_index is None:
            try:
                ed_index = find_ed_es(labels)[0]
            except ValueError:
                ed_index = 0
        dmaps = distance_transform(labels, n_structures).maps
        return cls(torch.as_tensor(labels.astype(np.int64)), _t(dmaps), int(ed_index), n_structures + 1)


def composite_terms_t(frames, fields, config, guidance=None, state=None):
    """Evaluate every loss term as a torch scalar; returns a dict including ``total``.

    ``state`` (optional dict) carries a warm start for the field inverses
    between calls.
    """
    warped = warp_t(frames.unsqueeze(1), fields).squeeze(1)
    template = template_t(warped, config.template_mode)
    zero = torch.zeros((), dtype=DTYPE)
    terms = {
        "similarity": similarity_t(warped, template, config.lncc_window),
        "smoothness": smoothness_t(fields, config.charbonnier_eps),
        "cyclic": cyclic_t(fields),
        "similarity_d": zero,
        "seg_r": zero,
        "seg_s": zero,
    }
    if guidance is not None:
        if config.w0 > 0:
            warped_maps = warp_t(guidance.distance_maps, fields)
            terms["similarity_d"] = distance_similarity_t(warped_maps, config.lncc_window)
        if config.w1 > 0:
            terms["seg_r"] = seg_r_t(fields, guidance, config, state)
    terms["total"] = (terms["similarity"] + config.lambda0 * terms["smoothness"]
                      + config.lambda1 * terms["cyclic"] + config.w0 * terms["similarity_d"]
                      + config.w1 * terms["seg_r"] + config.w2 * terms["seg_s"])
    return terms


def propagate_probs_t(fields, source_onehot, source_index, state=None):
    """Warp the one-hot source mask into every frame through ``T_src o T_n^-1``.

    With a ``state`` dict (inside the optimiser loop) the inverse is
    warm-started from the previous step and only solved approximately;
    without one it is solved to near machine precision.
    """
    T = fields.shape[0]
    if state is None:
        inv = invert_t(fields, 1e-10, 200)
    else:
        init = state.get("inverse")
        if init is not None and init.shape != fields.shape:
            init = None
        inv = invert_t(fields, 1e-4, WARM_INVERSE_ITERS, init, relax=False)
        state["inverse"] = inv.detach()
    rel = compose_t(fields[source_index].expand_as(fields), inv)
    return warp_t(source_onehot.expand(T, -1, -1, -1), rel)


def seg_r_t(fields, guidance, config, state=None):
    ed = guidance.ed_index
    src = one_hot_t(guidance.labels[ed:ed + 1], guidance.n_classes)
    probs = propagate_probs_t(fields, src, ed, state)
    gt_oh = one_hot_t(guidance.labels, guidance.n_classes)
    hard = one_hot_t(probs.detach().argmax(dim=1), guidance.n_classes)
    return dice_t(hard, gt_oh) + ce_t(probs, guidance.labels)


def composite_loss(sequence, fields, config=None, masks=None):
    """Evaluate the joint objective for given fields and return a :class:`LossBreakdown`.

    Without masks the anatomical terms are reported as zero.
    """
    config = config or RegistrationConfig()
    frames = np.asarray(getattr(sequence, "frames", sequence), dtype=np.float64)
    fields = np.asarray(getattr(fields, "fields", fields), dtype=np.float64)
    if fields.shape != frames.shape + (2,):
        raise ValueError(f"fields {fields.shape} do not match sequence {frames.shape}")
    guidance = None
    if masks is not None:
        labels, K = _as_labels(masks)
        if labels.shape != frames.shape:
            raise ValueError(f"masks {labels.shape} do not match sequence {frames.shape}")
        guidance = Guidance.from_masks(labels, K)
    with torch.no_grad():
        terms = composite_terms_t(_t(frames), _t(fields), config, guidance)
    return LossBreakdown.from_terms(terms, config)
