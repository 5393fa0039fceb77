"""Distance maps, contours, mask propagation and voting, strain and volumes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import LABELS, STRUCTURES, DistanceMapSet, LabelMaskSet, LandmarkSet, check_fields, check_labels
from .warp import compose, invert_field, sample_points, warp_mask

log = logging.getLogger(__name__)

TRUNCATE_PX = 20.0

# which landmark pair bounds the wall of each chamber
HINGES = {"LV": (0, 1), "LVM": (0, 1), "LA": (0, 1), "RV": (2, 3), "RA": (2, 3)}


def _labels(masks):
    if isinstance(masks, LabelMaskSet):
        return masks.labels, masks.n_structures
    return check_labels(masks), len(STRUCTURES)


def _label_index(label):
    if isinstance(label, str):
        try:
            return LABELS[label]
        except KeyError:
            raise ValueError(f"unknown structure {label!r}; expected one of {STRUCTURES}") from None
    return int(label)


# ---------------------------------------------------------------------------
# distance maps


def boundary_mask(labels, k):
    """Pixels of label ``k`` that are 4-adjacent to a different label."""
    fg = labels == k
    edge = np.zeros_like(fg)
    edge[..., 1:, :] |= labels[..., :-1, :] != k
    edge[..., :-1, :] |= labels[..., 1:, :] != k
    edge[..., :, 1:] |= labels[..., :, :-1] != k
    edge[..., :, :-1] |= labels[..., :, 1:] != k
    return fg & edge


def distance_transform(masks, n_structures=None, truncate=TRUNCATE_PX):
    """Per-frame, per-structure distance to the structure boundary, clipped and scaled to [0, 1].

    Structures absent from a frame give the constant map 1.
    """
    labels, K = _labels(masks)
    if n_structures is not None:
        K = n_structures
    single = labels.ndim == 2
    if single:
        labels = labels[None]
    T, H, W = labels.shape
    out = np.ones((T, K, H, W))
    for n in range(T):
        for k in range(1, K + 1):
            b = boundary_mask(labels[n], k)
            if b.any():
                d = ndimage.distance_transform_edt(~b)
                out[n, k - 1] = np.minimum(d, truncate) / truncate
    return DistanceMapSet(out)


# ---------------------------------------------------------------------------
# contours

# clockwise on screen (y grows downwards), starting north
_RING = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)]


@dataclass(frozen=True)
class Contour:
    points: np.ndarray  # (N, 2) closed polyline of (x, y) pixel coordinates
    label: int = 0
    frame: int = 0

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
            raise ValueError("a contour needs at least three (x, y) vertices")
        object.__setattr__(self, "points", p)

    def scaled(self, s, center=None):
        c = self.points.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
        return Contour(c + s * (self.points - c), self.label, self.frame)

    def perimeter(self, spacing=(1.0, 1.0)):
        q = self.points * np.asarray(spacing)
        return float(np.linalg.norm(np.roll(q, -1, axis=0) - q, axis=1).sum())


def signed_area(points):
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _trace(binary):
    """Moore-neighbour border following; returns boundary pixel centres in order."""
    img = np.pad(binary, 1)
    ys, xs = np.nonzero(img)
    start = (int(xs[np.argmin(ys * img.shape[1] + xs)]), int(ys.min()))
    # raster scan guarantees the west neighbour of the first pixel is background
    back = (start[0] - 1, start[1])
    cur = start
    pts = [cur]
    first_state = None
    for _ in range(4 * img.size + 8):
        d = (back[0] - cur[0], back[1] - cur[1])
        i0 = _RING.index(d)
        nxt = None
        for j in range(1, 9):
            dx, dy = _RING[(i0 + j) % 8]
            cand = (cur[0] + dx, cur[1] + dy)
            if img[cand[1], cand[0]]:
                nxt = cand
                pdx, pdy = _RING[(i0 + j - 1) % 8]
                back = (cur[0] + pdx, cur[1] + pdy)
                break
        if nxt is None:  # isolated pixel
            break
        state = (cur, nxt)
        if first_state is None:
            first_state = state
        elif state == first_state:
            break
        cur = nxt
        pts.append(cur)
    if len(pts) > 1 and pts[-1] == pts[0]:
        pts.pop()
    return np.array(pts, dtype=np.float64) - 1.0


def extract_contour(mask, label, frame=0):
    """Ordered closed boundary of one structure (largest 8-connected component).

    The returned polyline runs through boundary pixel centres with positive
    shoelace area in (x, y) pixel coordinates.
    """
    k = _label_index(label)
    mask = np.asarray(mask)
    fg = mask == k
    if not fg.any():
        raise ValueError(f"structure {label} is absent")
    comp, n = ndimage.label(fg, structure=np.ones((3, 3), bool))
    if n > 1:
        sizes = ndimage.sum(fg, comp, index=np.arange(1, n + 1))
        log.warning("structure %s has %d components; using the largest", label, n)
        fg = comp == (1 + int(np.argmax(sizes)))
    if boundary_mask(fg.astype(np.int8), 1).sum() < 3:
        raise ValueError(f"structure {label} has fewer than three boundary pixels")
    pts = _trace(fg)
    if len(pts) < 3:
        raise ValueError(f"structure {label} is too thin to form a closed contour")
    if signed_area(pts) < 0:
        pts = pts[::-1]
    return Contour(pts, k, frame)


# ---------------------------------------------------------------------------
# propagation, dictionary and voting


def _inverses(fields, tol, max_iters):
    inv = invert_field(fields, tol, max_iters)
    if not inv.converged:
        log.warning("some field inverses did not converge (residual %.3g px)", inv.residual)
    return inv.field


def propagate_masks(source, source_index, fields, n_labels=len(STRUCTURES) + 1, tol=0.01, max_iters=100):
    """Carry the mask of frame ``source_index`` onto every frame.

    Frame ``n`` receives ``source`` warped through ``T_src o T_n^-1``; the
    source frame itself is returned unchanged.
    """
    fields = check_fields(fields)
    source = check_labels(source)
    T = fields.shape[0]
    if not 0 <= source_index < T:
        raise IndexError(f"source frame {source_index} out of range")
    inv = _inverses(fields, tol, max_iters)
    rel = compose(np.broadcast_to(fields[source_index], fields.shape).copy(), inv)
    out = warp_mask(np.broadcast_to(source, (T,) + source.shape).copy(), rel, n_labels)
    out[source_index] = source
    return LabelMaskSet(out)


def build_dictionary(masks, fields, n_labels=len(STRUCTURES) + 1, tol=0.01, max_iters=100):
    """``T x T x H x W`` array; entry ``(r, n)`` is frame ``r``'s mask carried onto frame ``n``."""
    labels, K = _labels(masks)
    fields = check_fields(fields, labels.shape)
    T = labels.shape[0]
    inv = _inverses(fields, tol, max_iters)
    out = np.empty((T, T) + labels.shape[1:], dtype=np.uint8)
    for r in range(T):
        rel = compose(np.broadcast_to(fields[r], fields.shape).copy(), inv)
        out[r] = warp_mask(np.broadcast_to(labels[r], labels.shape).copy(), rel, n_labels)
        out[r, r] = labels[r]
    return out


def majority_vote(dictionary):
    """Per-pixel most frequent label among the candidates for each frame; ties go to the smaller label."""
    d = np.asarray(dictionary)
    if d.ndim != 4 or d.shape[0] != d.shape[1]:
        raise ValueError(f"expected a T x T x H x W dictionary, got {d.shape}")
    n_labels = int(d.max()) + 1
    counts = np.stack([(d == k).sum(axis=0) for k in range(n_labels)])
    return np.argmax(counts, axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# wall length and strain


def _project(points, q):
    """Closest point on the closed polyline; returns (distance_px, segment index, t)."""
    a = points
    b = np.roll(points, -1, axis=0)
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", q - a, ab) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    d = np.linalg.norm(a + t[:, None] * ab - q, axis=1)
    i = int(np.argmin(d))
    return float(d[i]), i, float(t[i])


def wall_path(contour, hinge_a, hinge_b, max_dist=5.0):
    """Vertices of the longer contour arc between the projections of two hinge points."""
    pts = contour.points if isinstance(contour, Contour) else np.asarray(contour, dtype=np.float64)
    N = len(pts)
    projections = []
    for h in (hinge_a, hinge_b):
        d, i, t = _project(pts, np.asarray(h, dtype=np.float64))
        if d > max_dist:
            raise ValueError(f"hinge point {tuple(h)} lies {d:.2f} px from the contour (limit {max_dist})")
        projections.append((i + t, pts[i] + t * (pts[(i + 1) % N] - pts[i])))

    def arc(p_from, p_to):
        (s0, q0), (s1, q1) = p_from, p_to
        if s1 < s0:
            s1 += N
        idx = [j % N for j in range(math.floor(s0) + 1, math.ceil(s1))]
        return np.vstack([q0, pts[idx].reshape(-1, 2), q1])

    (sa, _), (sb, _) = projections
    if abs(sa - sb) < 1e-12:
        # degenerate split: the whole perimeter
        q = projections[0][1]
        i = math.floor(sa)
        idx = [(i + 1 + j) % N for j in range(N)]
        return np.vstack([q, pts[idx], q])
    forward = arc(projections[0], projections[1])
    backward = arc(projections[1], projections[0])
    return forward if _length(forward) >= _length(backward) else backward


def _length(path, spacing=(1.0, 1.0)):
    q = np.asarray(path) * np.asarray(spacing)
    return float(np.linalg.norm(np.diff(q, axis=0), axis=1).sum())


def wall_length(contour, hinge_a, hinge_b, spacing=(1.0, 1.0), max_dist=5.0):
    """Length (mm) of the longer arc between two hinge points, i.e. the wall without the valve plane."""
    return _length(wall_path(contour, hinge_a, hinge_b, max_dist), spacing)


def wall_strain(contours, hinges, ed_index=0, spacing=(1.0, 1.0), max_dist=5.0):
    """Whole-wall strain ``L_n / L_ed - 1`` from per-frame contours and (T, 2, 2) hinge pairs."""
    hinges = np.asarray(hinges, dtype=np.float64)
    if len(contours) != len(hinges):
        raise ValueError(f"{len(contours)} contours but {len(hinges)} hinge pairs")
    lengths = np.array([wall_length(c, h[0], h[1], spacing, max_dist) for c, h in zip(contours, hinges)])
    L0 = lengths[ed_index]
    if L0 <= 0:
        raise ValueError("degenerate end-diastolic wall")
    strain = lengths / L0 - 1.0
    strain[ed_index] = 0.0
    return strain


@dataclass(frozen=True)
class StrainCurve:
    strain: np.ndarray          # (T,) whole-wall strain, 0 at ED
    chamber: str
    ed_index: int
    segment_strain: np.ndarray = None  # (T, n_segments)
    gls_sum: np.ndarray = None         # sum of segment strains per frame
    gls_mean: np.ndarray = None        # mean of segment strains per frame


def _resample(path, step=0.5):
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(int(np.ceil(s[-1] / step)), 1)
    u = np.linspace(0.0, s[-1], n + 1)
    return np.column_stack([np.interp(u, s, path[:, 0]), np.interp(u, s, path[:, 1])]), u


def gls_curve(masks, landmarks, chamber="LV", spacing=(1.0, 1.0), fields=None, n_segments=1,
              ed_index=None, tol=0.01, max_iters=100):
    """Longitudinal strain ``(L - L0) / L0`` of one chamber wall against end-diastole.

    Whole-wall lengths come from each frame's contour between that frame's
    hinge landmarks.  With ``n_segments > 1`` the end-diastolic wall is split
    into equal-arc segments that are carried to every frame through
    ``fields``; both the per-segment strains, their sum and their mean are
    reported.
    """
    labels, _ = _labels(masks)
    lm = landmarks.points if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, dtype=np.float64)
    T = labels.shape[0]
    if lm.shape[0] != T:
        raise ValueError(f"need landmarks for all {T} frames, got {lm.shape[0]}")
    if chamber not in HINGES:
        raise ValueError(f"no hinge definition for chamber {chamber!r}")
    ia, ib = HINGES[chamber]
    if ed_index is None:
        ed_index = find_ed_es(labels)[0]
    contours = [extract_contour(labels[n], chamber, n) for n in range(T)]
    hinges = lm[:, [ia, ib]]
    strain = wall_strain(contours, hinges, ed_index, spacing)

    seg = gsum = gmean = None
    if n_segments > 1:
        if fields is None:
            raise ValueError("segmental strain needs displacement fields")
        fields = check_fields(fields, labels.shape)
        dense, s = _resample(wall_path(contours[ed_index], *hinges[ed_index]))
        edges = np.linspace(0.0, s[-1], n_segments + 1)
        inv = _inverses(fields, tol, max_iters)
        seg = np.zeros((T, n_segments))
        ed_len = None
        for n in range(T):
            if n == ed_index:
                carried = dense
            else:
                rel = compose(fields[n], inv[ed_index])
                carried = dense + sample_points(rel, dense)
            seg_len = np.array([
                _length(carried[(s >= edges[i] - 1e-9) & (s <= edges[i + 1] + 1e-9)], spacing)
                for i in range(n_segments)
            ])
            if n == ed_index:
                ed_len = seg_len
            seg[n] = seg_len
        seg = seg / ed_len - 1.0
        seg[ed_index] = 0.0
        gsum = seg.sum(axis=1)
        gmean = seg.mean(axis=1)
    return StrainCurve(strain, chamber, int(ed_index), seg, gsum, gmean)


# ---------------------------------------------------------------------------
# volumes


def chamber_area(mask, label="LV", spacing=(1.0, 1.0)):
    """Area in mm^2 of one structure in a single frame."""
    n = int((np.asarray(mask) == _label_index(label)).sum())
    if n == 0:
        raise ValueError(f"structure {label} is empty")
    return n * float(spacing[0]) * float(spacing[1])


def volume_area_length(area, long_axis_length):
    """Single-plane area-length volume ``8 A^2 / (3 pi L)``; mm^2 and mm in, mL out."""
    if not long_axis_length > 0:
        raise ValueError("long-axis length must be positive")
    return 8.0 * area ** 2 / (3.0 * math.pi * long_axis_length) / 1000.0


def lvef(edv, esv):
    if not edv > 0:
        raise ValueError("end-diastolic volume must be positive")
    if esv > edv:
        log.warning("ESV (%.3g) exceeds EDV (%.3g); ejection fraction is negative", esv, edv)
    return 100.0 * (edv - esv) / edv


def long_axis_length(mask, label="LV", spacing=(1.0, 1.0), hinges=None):
    """Long-axis length in mm.

    With mitral ``hinges`` it is the distance from the hinge midpoint to the
    farthest structure pixel (the apex); otherwise the extent of the
    structure along its principal axis.
    """
    ys, xs = np.nonzero(np.asarray(mask) == _label_index(label))
    if len(xs) == 0:
        raise ValueError(f"structure {label} is empty")
    pts = np.column_stack([xs, ys]).astype(np.float64) * np.asarray(spacing)
    if hinges is not None:
        mid = np.asarray(hinges, dtype=np.float64).mean(axis=0) * np.asarray(spacing)
        return float(np.linalg.norm(pts - mid, axis=1).max())
    c = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    proj = c @ vt[0]
    return float(proj.max() - proj.min() + min(spacing))


def find_ed_es(masks):
    """End-diastole / end-systole as the frames of largest / smallest LV area (earliest on ties)."""
    labels, _ = _labels(masks)
    areas = (labels == LABELS["LV"]).sum(axis=(1, 2))
    if np.any(areas == 0):
        raise ValueError("LV must be present in every frame")
    return int(np.argmax(areas)), int(np.argmin(areas))


# ---------------------------------------------------------------------------
# JSON exchange for contours and landmarks


def write_anatomy_json(path, landmarks=None, contours=None, n_frames=None):
    """Write ``{"frames": [{"index", "structures", "landmarks"}]}``.

    ``contours`` maps frame index to ``{name: Contour or (N, 2) array}``.
    """
    lm = None if landmarks is None else np.asarray(getattr(landmarks, "points", landmarks))
    if n_frames is None:
        n_frames = len(lm) if lm is not None else (max(contours) + 1 if contours else 0)
    frames = []
    for n in range(n_frames):
        entry = {"index": n, "structures": {}}
        for name, c in (contours or {}).get(n, {}).items():
            pts = c.points if isinstance(c, Contour) else np.asarray(c)
            entry["structures"][name] = [[float(x), float(y)] for x, y in pts]
        if lm is not None:
            entry["landmarks"] = [[float(x), float(y)] for x, y in lm[n]]
        frames.append(entry)
    with open(path, "w") as fh:
        json.dump({"frames": frames}, fh, indent=1)


def read_anatomy_json(path, image_shape=None):
    """Return ``(LandmarkSet or None, {frame: {name: Contour}})``."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        frames = sorted(doc["frames"], key=lambda f: f["index"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed anatomy JSON ({exc})") from None
    contours = {}
    lms = []
    for f in frames:
        contours[f["index"]] = {
            name: Contour(np.asarray(pts, dtype=np.float64), LABELS.get(name, 0), f["index"])
            for name, pts in f.get("structures", {}).items()
        }
        if "landmarks" in f:
            lms.append(f["landmarks"])
    landmarks = None
    if lms:
        if len(lms) != len(frames):
            raise ValueError(f"{path}: landmarks missing for some frames")
        landmarks = LandmarkSet(np.asarray(lms, dtype=np.float64), image_shape)
    return landmarks, contours
