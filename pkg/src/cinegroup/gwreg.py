"""Groupwise registration by multi-resolution Adam over dense displacement fields."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import CineSequence, RegistrationConfig, check_fields, check_labels, check_sequence
from .loss import FIELDS, Guidance, LossBreakdown, composite_terms_t, template_t
from .warp import DTYPE, _t, invert_field, sample, warp_t

log = logging.getLogger(__name__)

GRAD_FLOOR = 1e-4  # finite-difference gradients below this count as zero


class RegistrationDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class OptimizationTrace:
    levels: list = field(default_factory=list)       # per level: list of LossBreakdown
    shapes: list = field(default_factory=list)       # grid shape per level
    wall_clock: list = field(default_factory=list)   # seconds per level
    inversion_residuals: np.ndarray = None
    inversion_converged: bool = True

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "iteration"] + list(FIELDS))
            for lvl, rows in enumerate(self.levels):
                for it, b in enumerate(rows):
                    w.writerow([lvl, it] + [f"{v:.10g}" for v in b.as_row()])


# ---------------------------------------------------------------------------
# pyramid


def _pad_even(a, axes):
    pad = [(0, 0)] * a.ndim
    for ax in axes:
        if a.shape[ax] % 2:
            pad[ax] = (0, 1)
    return np.pad(a, pad, mode="edge") if any(p != (0, 0) for p in pad) else a


def downsample_image(image, factor=2):
    """2 x 2 box average over the last two axes; odd sizes are edge-padded by one first."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    a = _pad_even(np.asarray(image, dtype=np.float64), (-2, -1))
    H, W = a.shape[-2:]
    return a.reshape(a.shape[:-2] + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1))


def downsample_labels(labels, n_labels):
    """Block-majority label map (ties to the smaller label)."""
    labels = np.asarray(labels)
    oh = (labels[..., None] == np.arange(n_labels)).astype(np.float64)
    oh = np.moveaxis(oh, -1, -3)
    return np.argmax(downsample_image(oh), axis=-3).astype(np.uint8)


def upsample_field(field, factor=2, shape=None):
    """Bilinear upsampling of (..., h, w, 2) displacements to ``shape`` with values doubled.

    Fine pixel ``i`` sits at coarse coordinate ``(i - 0.5) / 2``.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    f = np.asarray(field, dtype=np.float64)
    h, w = f.shape[-3:-1]
    H, W = shape if shape is not None else (2 * h, 2 * w)
    lead = f.shape[:-3]
    fb = _t(f.reshape((-1, h, w, 2))).permute(0, 3, 1, 2)
    ys, xs = torch.meshgrid(torch.arange(H, dtype=DTYPE), torch.arange(W, dtype=DTYPE), indexing="ij")
    B = fb.shape[0]
    xc = ((xs - 0.5) / 2).expand(B, H, W)
    yc = ((ys - 0.5) / 2).expand(B, H, W)
    with torch.no_grad():
        out = sample(fb, xc, yc).permute(0, 2, 3, 1) * 2.0
    return out.numpy().reshape(lead + (H, W, 2))


# ---------------------------------------------------------------------------
# solver


def _evaluate(frames, fields, config, guidance, state):
    with torch.no_grad():
        return composite_terms_t(frames, fields, config, guidance, state)


def _optimise_level(frames, init, config, guidance, level, trace):
    params = torch.nn.Parameter(init.clone())
    opt = torch.optim.Adam([params], lr=config.learning_rate,
                           betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)
    state = {}
    rows = []
    best_total, best = None, None
    for it in range(config.iterations_per_level):
        opt.zero_grad()
        terms = composite_terms_t(frames, params, config, guidance, state)
        total = terms["total"]
        if not torch.isfinite(total):
            trace.levels.append(rows)
            raise RegistrationDiverged(f"non-finite loss at level {level}, iteration {it}", trace)
        rows.append(LossBreakdown.from_terms({k: v.item() for k, v in terms.items()}, config))
        if best_total is None or total.item() < best_total:
            best_total, best = total.item(), params.detach().clone()
        total.backward()
        opt.step()
    final = params.detach().clone()
    t_final = _evaluate(frames, final, config, guidance, state)["total"].item()
    if not np.isfinite(t_final):
        trace.levels.append(rows)
        raise RegistrationDiverged(f"non-finite loss at the end of level {level}", trace)
    if best_total is None or t_final <= best_total:
        best = final
    trace.levels.append(rows)
    return best


def register_groupwise(sequence, config=None, masks=None, ed_index=None):
    """Estimate template-to-frame displacement fields for every frame.

    Returns ``(fields, trace)`` with ``fields`` a ``T x H x W x 2`` array.
    Without masks the anatomical terms are switched off.  With masks they
    steer every level except full resolution (unless
    ``config.guide_full_resolution``), where mask rasterisation would pull
    the fields towards pixel-aligned boundaries.
    """
    config = config or RegistrationConfig()
    frames = check_sequence(getattr(sequence, "frames", sequence))
    T, H, W = frames.shape
    labels = None
    if masks is not None:
        labels = check_labels(getattr(masks, "labels", masks))
        if labels.shape != frames.shape:
            raise ValueError(f"masks {labels.shape} do not match sequence {frames.shape}")
        if ed_index is None:
            from .anatomy import find_ed_es
            try:
                ed_index = find_ed_es(labels)[0]
            except ValueError:
                ed_index = 0
    elif config.w0 > 0 or config.w1 > 0 or config.w2 > 0:
        log.info("no masks supplied; anatomical loss weights ignored")
        config = config.replace(w0=0.0, w1=0.0, w2=0.0)

    pyramid = [frames]
    label_pyr = [labels]
    for _ in range(config.pyramid_levels - 1):
        pyramid.append(downsample_image(pyramid[-1]))
        if labels is not None:
            label_pyr.append(downsample_labels(label_pyr[-1], int(labels.max()) + 1))
    n_classes = 6 if labels is None else max(6, int(labels.max()) + 1)

    trace = OptimizationTrace()
    fields = None
    for level in range(config.pyramid_levels - 1, -1, -1):
        img = pyramid[level]
        h, w = img.shape[1:]
        if fields is None:
            fields = np.zeros((T, h, w, 2))
        else:
            fields = upsample_field(fields, 2, (h, w))
        guidance = None
        if labels is not None and (level > 0 or config.pyramid_levels == 1 or config.guide_full_resolution):
            guidance = Guidance.from_masks(label_pyr[level], n_classes - 1, ed_index)
        t0 = time.perf_counter()
        best = _optimise_level(_t(img), _t(fields), config, guidance, level, trace)
        trace.wall_clock.append(time.perf_counter() - t0)
        trace.shapes.append((h, w))
        fields = best.numpy()
    inv = invert_field(fields, config.inversion_tol, config.inversion_max_iters, warn_folding=False)
    trace.inversion_residuals = inv.residuals
    trace.inversion_converged = inv.converged
    return fields, trace


def gradient_check(sequence, fields, config=None, masks=None, h=1e-3, corrupt=None):
    """Largest deviation between the analytic and central-difference gradients.

    The deviation is divided by the largest finite-difference component; when
    that is numerically zero (below ``GRAD_FLOOR``) the absolute deviation is
    returned instead.  ``corrupt`` may map the
    analytic gradient before comparison (used to test the harness itself).
    """
    config = config or RegistrationConfig()
    frames = _t(np.asarray(getattr(sequence, "frames", sequence), dtype=np.float64))
    f0 = np.asarray(getattr(fields, "fields", fields), dtype=np.float64)
    guidance = None
    if masks is not None:
        guidance = Guidance.from_masks(check_labels(getattr(masks, "labels", masks)))

    p = torch.nn.Parameter(_t(f0))
    composite_terms_t(frames, p, config, guidance)["total"].backward()
    analytic = p.grad.numpy().copy()
    if corrupt is not None:
        analytic = corrupt(analytic)

    numeric = np.zeros_like(f0)
    flat = f0.reshape(-1)
    for i in range(flat.size):
        vals = []
        for s in (h, -h):
            g = flat.copy()
            g[i] += s
            vals.append(_evaluate(frames, _t(g.reshape(f0.shape)), config, guidance, None)["total"].item())
        numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * h)
    err = np.abs(analytic - numeric).max()
    scale = np.abs(numeric).max()
    return float(err / scale) if scale > GRAD_FLOOR else float(err)


# ---------------------------------------------------------------------------
# estimator


class GroupwiseRegistration(BaseEstimator, TransformerMixin):
    """Groupwise registration of a cine stack to its implicit template.

    ``fit`` takes a ``T x H x W`` stack (and optional label masks) and learns
    ``fields_``; ``transform`` pulls a stack into template space with them.
    """

    def __init__(self, lambda0=0.8, lambda1=0.01, w0=5.0, w1=1.0, w2=1.0, lncc_window=9,
                 pyramid_levels=3, iterations_per_level=200, learning_rate=0.1,
                 adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8, template_mode="average",
                 inversion_tol=0.01, inversion_max_iters=100, charbonnier_eps=1e-6,
                 guide_full_resolution=False):
        self.lambda0 = lambda0
        self.lambda1 = lambda1
        self.w0 = w0
        self.w1 = w1
        self.w2 = w2
        self.lncc_window = lncc_window
        self.pyramid_levels = pyramid_levels
        self.iterations_per_level = iterations_per_level
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.template_mode = template_mode
        self.inversion_tol = inversion_tol
        self.inversion_max_iters = inversion_max_iters
        self.charbonnier_eps = charbonnier_eps
        self.guide_full_resolution = guide_full_resolution

    @classmethod
    def from_config(cls, config):
        return cls(**config.to_dict())

    def config(self):
        return RegistrationConfig(**self.get_params())

    def fit(self, X, y=None, masks=None):
        frames = check_sequence(getattr(X, "frames", X))
        self.fields_, self.trace_ = register_groupwise(frames, self.config(), masks)
        self.n_frames_, self.frame_shape_ = frames.shape[0], frames.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "fields_")
        frames = np.asarray(getattr(X, "frames", X), dtype=np.float64)
        if frames.shape != (self.n_frames_,) + tuple(self.frame_shape_):
            raise ValueError(f"expected a {(self.n_frames_,) + tuple(self.frame_shape_)} stack, got {frames.shape}")
        with torch.no_grad():
            return warp_t(_t(frames)[:, None], _t(self.fields_))[:, 0].numpy()

    def template(self, X):
        """Implicit template of ``X`` under the fitted fields."""
        with torch.no_grad():
            return template_t(_t(self.transform(X)), self.template_mode).numpy()

    def inverse_fields(self):
        check_is_fitted(self, "fields_")
        return invert_field(self.fields_, self.inversion_tol, self.inversion_max_iters).field
