"""Overlap, contour-distance, landmark, Jacobian and agreement statistics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .anatomy import Contour, _label_index, extract_contour
from .core import STRUCTURES, LandmarkSet, check_fields
from .warp import compose, invert_field, jacobian_determinant, sample_points

log = logging.getLogger(__name__)


def dsc_metric(a, b, label):
    """Dice overlap of one label in two masks; two empty masks score 1."""
    k = _label_index(label)
    a = np.asarray(a) == k
    b = np.asarray(b) == k
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    s = a.sum() + b.sum()
    if s == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / float(s)


def _points(c):
    p = c.points if isinstance(c, Contour) else np.asarray(c, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 2:
        raise ValueError("degenerate contour")
    return p


def point_to_polyline(points, poly, closed=True):
    """Distance from each point to the nearest segment of ``poly``."""
    a = poly if closed else poly[:-1]
    b = np.roll(poly, -1, axis=0) if closed else poly[1:]
    ab = b - a                                    # (S, 2)
    ap = points[:, None, :] - a[None]             # (P, S, 2)
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("psk,sk->ps", ap, ab) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    d = ap - t[..., None] * ab[None]
    return np.sqrt(np.einsum("psk,psk->ps", d, d)).min(axis=1)


def _scaled(c, spacing):
    return _points(c) * np.asarray(spacing, dtype=np.float64)


def mcd(a, b, spacing=(1.0, 1.0), closed=True):
    """Symmetric mean vertex-to-polyline distance between two contours (mm)."""
    pa, pb = _scaled(a, spacing), _scaled(b, spacing)
    return 0.5 * (point_to_polyline(pa, pb, closed).mean() + point_to_polyline(pb, pa, closed).mean())


def hd(a, b, spacing=(1.0, 1.0), closed=True):
    """Hausdorff distance from vertex-to-polyline distances (mm)."""
    pa, pb = _scaled(a, spacing), _scaled(b, spacing)
    return float(max(point_to_polyline(pa, pb, closed).max(), point_to_polyline(pb, pa, closed).max()))


def transfer_points(points, fields, source, target, tol=0.01, max_iters=100):
    """Carry points of frame ``source`` to frame ``target`` through ``T_target o T_source^-1``."""
    fields = check_fields(fields)
    inv = invert_field(fields[source], tol, max_iters, warn_folding=False)
    rel = compose(fields[target], inv.field)
    return np.asarray(points, dtype=np.float64) + sample_points(rel, points)


def landmark_error(gt, fields, reference_frame=0, spacing=(1.0, 1.0), tol=0.01, max_iters=100):
    """(T, 4) distances in mm between transferred reference landmarks and ground truth."""
    pts = gt.points if isinstance(gt, LandmarkSet) else np.asarray(gt, dtype=np.float64)
    fields = check_fields(fields)
    T = fields.shape[0]
    if pts.shape[0] != T:
        raise ValueError(f"landmarks for {pts.shape[0]} frames, fields for {T}")
    H, W = fields.shape[1:3]
    inv = invert_field(fields[reference_frame], tol, max_iters, warn_folding=False).field
    sp = np.asarray(spacing, dtype=np.float64)
    err = np.zeros((T, pts.shape[1]))
    for n in range(T):
        moved = pts[reference_frame] + sample_points(compose(fields[n], inv), pts[reference_frame])
        clipped = np.clip(moved, 0, [W - 1, H - 1])
        if np.any(clipped != moved):
            log.warning("landmark transferred outside the image in frame %d; clamped", n)
        err[n] = np.linalg.norm((clipped - pts[n]) * sp, axis=1)
    return err


def jacobian_stats(fields):
    """Population std of the pooled Jacobian determinants and the fraction with det <= 0."""
    det = jacobian_determinant(check_fields(fields))
    return float(det.std()), float((det <= 0).mean())


def bland_altman(x, y):
    """Bias and 95% limits of agreement ``bias +- 1.96 sd`` (sample sd)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("bland_altman needs two equal-length 1D sequences")
    if len(x) < 2:
        raise ValueError("need at least two pairs")
    d = x - y
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return bias, bias - 1.96 * sd, bias + 1.96 * sd


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    """Per-structure and per-landmark summaries.

    ``structures[name][metric]`` holds per-frame values; ``es_index`` selects
    the ES-only variants.
    """

    structures: dict = field(default_factory=dict)
    landmarks: dict = field(default_factory=dict)
    jacobian_std: float = None
    folding_fraction: float = None
    es_index: int = None

    def rows(self):
        out = []

        def add(kind, name, metric, values):
            v = np.asarray(values, dtype=np.float64)
            out.append([kind, name, metric, "all", float(v.mean()), float(v.std())])
            if self.es_index is not None:
                out.append([kind, name, metric, "es", float(v[self.es_index]), 0.0])

        for name, metrics in self.structures.items():
            for metric, values in metrics.items():
                add("structure", name, metric, values)
        for name, values in self.landmarks.items():
            add("landmark", name, "mcd", values)
        if self.jacobian_std is not None:
            out.append(["field", "all", "jacobian_std", "all", self.jacobian_std, 0.0])
            out.append(["field", "all", "folding_fraction", "all", self.folding_fraction, 0.0])
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "name", "metric", "frames", "mean", "std"])
            for r in self.rows():
                w.writerow(r[:4] + [f"{r[4]:.10g}", f"{r[5]:.10g}"])

    def to_dict(self):
        return {
            "structures": {n: {m: [float(x) for x in v] for m, v in d.items()} for n, d in self.structures.items()},
            "landmarks": {n: [float(x) for x in v] for n, v in self.landmarks.items()},
            "jacobian_std": self.jacobian_std,
            "folding_fraction": self.folding_fraction,
            "es_index": self.es_index,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


LANDMARK_NAMES = ("mitral_a", "mitral_b", "tricuspid_a", "tricuspid_b")


def evaluate(pred, gt, spacing=(1.0, 1.0), fields=None, landmarks=None, reference_frame=0,
             es_index=None, structures=STRUCTURES):
    """Build a :class:`MetricReport` comparing predicted against reference masks.

    Per-frame values are averaged uniformly over frames.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"mask stacks differ: {pred.shape} vs {gt.shape}")
    report = MetricReport(es_index=es_index)
    for name in structures:
        k = _label_index(name)
        if not (gt == k).any() and not (pred == k).any():
            continue
        vals = {"dsc": [], "mcd": [], "hd": []}
        for n in range(gt.shape[0]):
            vals["dsc"].append(dsc_metric(pred[n], gt[n], k))
            try:
                ca = extract_contour(pred[n], k, n)
                cb = extract_contour(gt[n], k, n)
            except ValueError:
                vals["mcd"].append(np.nan)
                vals["hd"].append(np.nan)
                continue
            vals["mcd"].append(mcd(ca, cb, spacing))
            vals["hd"].append(hd(ca, cb, spacing))
        report.structures[name] = vals
    if fields is not None:
        report.jacobian_std, report.folding_fraction = jacobian_stats(fields)
        if landmarks is not None:
            err = landmark_error(landmarks, fields, reference_frame, spacing)
            report.landmarks = {LANDMARK_NAMES[i]: err[:, i] for i in range(err.shape[1])}
    return report
