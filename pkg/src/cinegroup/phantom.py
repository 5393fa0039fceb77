"""Synthetic four-chamber cine phantom with analytic ground truth.

The heart sits inside a disc of radius ``r0`` that is scaled uniformly about
the image centre ``c``; outside it a raised-cosine envelope tapers the
motion to zero at ``r1``, so the image border never moves::

    phi_n(x) = alpha_n * (x - c) * g(|x - c|)
    g(r) = 1                                   r <= r0
         = (1 + cos(pi (r - r0) / (r1 - r0))) / 2   r0 < r < r1
         = 0                                   r >= r1
    alpha_n = (A / M) * sin(2 pi n / T),   M = max_r r g(r)

so the largest displacement is ``A`` pixels and ``sum_n phi_n = 0``.
Radii are fractions of ``min(H, W)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import LABELS, CineSequence, DisplacementFieldSet, LabelMaskSet, LandmarkSet

R0 = 0.26
R1 = 0.48

# (dx, dy, semi-axis x, semi-axis y) relative to the image centre, in units of min(H, W)
GEOMETRY = {
    "LV": (0.08, -0.06, 0.06, 0.11),
    "LVM": (0.08, -0.06, 0.085, 0.135),
    "RV": (-0.10, -0.05, 0.065, 0.10),
    "LA": (0.08, 0.165, 0.07, 0.06),
    "RA": (-0.09, 0.155, 0.065, 0.06),
}
HINGE_ANGLE = math.radians(40.0)

BACKGROUND = 0.2
MYOCARDIUM = 0.4
BLOOD = 0.9
TEXTURE_PERIOD = 0.14  # fraction of min(H, W)


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 256
    width: int = 256
    frames: int = 25
    amplitude: float = 8.0
    noise: float = 0.01
    gain: float = 1.0
    offset: float = 0.0
    texture: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("phantom grids must be at least 32 x 32")
        if self.frames < 4:
            raise ValueError("phantom needs at least 4 frames")
        if not self.amplitude >= 0:
            raise ValueError("amplitude must be non-negative")
        if self.noise < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.gain <= 0:
            raise ValueError("contrast gain must be positive")
        S = min(self.height, self.width)
        clearance = S / 2 - heart_radius() * S
        if self.amplitude >= clearance:
            raise ValueError(f"amplitude {self.amplitude} px exceeds the wall clearance {clearance:.2f} px")
        if self.amplitude > 0 and min_radial_stretch(self.alpha_max) <= 0:
            raise ValueError(f"amplitude {self.amplitude} px folds the envelope")

    @property
    def size(self):
        return min(self.height, self.width)

    @property
    def center(self):
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    @property
    def alpha_max(self):
        return self.amplitude / (_envelope_peak() * self.size)

    def alphas(self):
        n = np.arange(self.frames)
        return self.alpha_max * np.sin(2 * np.pi * n / self.frames)


def heart_radius():
    """Largest distance (fraction of the grid) from the centre to any structure."""
    r = 0.0
    for dx, dy, ax, ay in GEOMETRY.values():
        t = np.linspace(0, 2 * np.pi, 721)
        r = max(r, float(np.hypot(dx + ax * np.cos(t), dy + ay * np.sin(t)).max()))
    return r


def envelope(r, r0=R0, r1=R1):
    r = np.asarray(r, dtype=np.float64)
    u = np.clip((r - r0) / (r1 - r0), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * u))


def envelope_slope(r, r0=R0, r1=R1):
    r = np.asarray(r, dtype=np.float64)
    inside = (r > r0) & (r < r1)
    return np.where(inside, -0.5 * np.pi / (r1 - r0) * np.sin(np.pi * (r - r0) / (r1 - r0)), 0.0)


def _envelope_peak():
    r = np.linspace(0, R1, 20001)
    return float((r * envelope(r)).max())


def min_radial_stretch(alpha_max):
    """Smallest principal stretch of ``x + alpha (x - c) g`` over ``|alpha| <= alpha_max``."""
    r = np.linspace(0, R1, 20001)
    g, dg = envelope(r), envelope_slope(r)
    out = np.inf
    for a in (alpha_max, -alpha_max):
        out = min(out, (1 + a * (g + r * dg)).min(), (1 + a * g).min())
    return float(out)


def displacement(points, alpha, spec):
    """Analytic ``phi`` at (..., 2) pixel points for scale factor ``alpha``."""
    d = np.asarray(points, dtype=np.float64) - spec.center
    r = np.linalg.norm(d, axis=-1, keepdims=True) / spec.size
    return alpha * d * envelope(r)


def inverse_points(points, alpha, spec, iters=80):
    """Template coordinates of frame points, inverting the radial map by bisection."""
    d = np.asarray(points, dtype=np.float64) - spec.center
    rp = np.linalg.norm(d, axis=-1) / spec.size
    lo = np.zeros_like(rp)
    hi = np.maximum(rp, R1) * (1 + abs(alpha)) + 1e-9
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f = mid * (1 + alpha * envelope(mid)) - rp
        lo = np.where(f < 0, mid, lo)
        hi = np.where(f < 0, hi, mid)
    r = 0.5 * (lo + hi)
    scale = np.where(rp > 0, r / np.where(rp > 0, rp, 1.0), 1.0)
    return spec.center + d * scale[..., None]


def _ellipse_rho(points, name, spec):
    dx, dy, ax, ay = GEOMETRY[name]
    S = spec.size
    c = spec.center + S * np.array([dx, dy])
    u = (points[..., 0] - c[0]) / (ax * S)
    v = (points[..., 1] - c[1]) / (ay * S)
    rho = np.sqrt(u * u + v * v)
    grad = np.sqrt((u / (ax * S)) ** 2 + (v / (ay * S)) ** 2) / np.maximum(rho, 1e-12)
    return rho, (rho - 1.0) / np.maximum(grad, 1e-12)


def rest_labels(points, spec):
    """Label of the rest geometry at template points."""
    out = np.zeros(points.shape[:-1], dtype=np.uint8)
    inside = {name: _ellipse_rho(points, name, spec)[0] <= 1.0 for name in GEOMETRY}
    out[inside["LVM"]] = LABELS["LVM"]
    for name in ("LV", "RV", "LA", "RA"):
        out[inside[name]] = LABELS[name]
    return out


def rest_intensity(points, spec):
    """Anti-aliased rest image (before gain, offset and noise) at template points."""
    width = 0.6

    def ind(name):
        return 0.5 * (1.0 - np.tanh(_ellipse_rho(points, name, spec)[1] / width))

    img = (BACKGROUND + (MYOCARDIUM - BACKGROUND) * ind("LVM") + (BLOOD - MYOCARDIUM) * ind("LV")
           + (BLOOD - BACKGROUND) * (ind("RV") + ind("LA") + ind("RA")))
    if spec.texture:
        img = img + spec.texture * texture(points, spec.size)
    return img


def texture(points, size):
    """Tag-like background pattern in ``[-1, 1]`` that moves with the tissue."""
    lam = TEXTURE_PERIOD * size
    x, y = points[..., 0], points[..., 1]
    return np.sin(2 * np.pi * x / lam) * np.sin(2 * np.pi * y / (1.3 * lam))


def rest_landmarks(spec):
    """Mitral then tricuspid hinge points on the LV and RV walls, on the atrial side."""
    S = spec.size
    pts = []
    for name in ("LV", "RV"):
        dx, dy, ax, ay = GEOMETRY[name]
        c = spec.center + S * np.array([dx, dy])
        for sgn in (-1, 1):
            pts.append(c + S * np.array([ax * math.sin(sgn * HINGE_ANGLE), ay * math.cos(HINGE_ANGLE)]))
    return np.array(pts)


@dataclass(frozen=True)
class Phantom:
    spec: PhantomSpec
    sequence: CineSequence
    masks: LabelMaskSet
    fields: DisplacementFieldSet
    landmarks: LandmarkSet
    ed_index: int
    es_index: int
    alphas: np.ndarray

    @property
    def wall_length_ratio(self):
        """Analytic wall length relative to ED; the heart is scaled uniformly."""
        return (1 + self.alphas) / (1 + self.alphas[self.ed_index])

    def metadata(self):
        return {
            "spec": asdict(self.spec),
            "ed_index": self.ed_index,
            "es_index": self.es_index,
            "alpha": [float(a) for a in self.alphas],
            "wall_length_ratio": [float(r) for r in self.wall_length_ratio],
            "envelope": {"kind": "raised_cosine", "r0": R0 * self.spec.size, "r1": R1 * self.spec.size,
                         "center": [float(c) for c in self.spec.center]},
        }

    def write_metadata(self, path):
        with open(path, "w") as fh:
            json.dump(self.metadata(), fh, indent=1, sort_keys=True)


def generate(spec=None, **kwargs):
    """Render a phantom; keyword arguments build a :class:`PhantomSpec`."""
    spec = spec or PhantomSpec(**kwargs)
    H, W, T = spec.height, spec.width, spec.frames
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    grid = np.stack([xs, ys], axis=-1)
    alphas = spec.alphas()
    rng = np.random.default_rng(spec.seed)

    frames = np.empty((T, H, W))
    labels = np.empty((T, H, W), dtype=np.uint8)
    fields = np.empty((T, H, W, 2))
    lms = np.empty((T, 4, 2))
    lm0 = rest_landmarks(spec)
    for n, a in enumerate(alphas):
        src = inverse_points(grid, a, spec)
        frames[n] = rest_intensity(src, spec) * spec.gain + spec.offset
        labels[n] = rest_labels(src, spec)
        fields[n] = displacement(grid, a, spec)
        lms[n] = lm0 + displacement(lm0, a, spec)
    if spec.noise > 0:
        frames = frames + rng.normal(0.0, spec.noise, frames.shape)
    frames = np.clip(frames, 0.0, 1.0)

    ed, es = int(np.argmax(alphas)), int(np.argmin(alphas))
    return Phantom(spec, CineSequence(frames), LabelMaskSet(labels), DisplacementFieldSet(fields),
                   LandmarkSet(lms, (H, W)), ed, es, alphas)
