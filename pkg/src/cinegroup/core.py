"""Domain types, input validation and the ``.cgt`` tensor container.

Coordinates are in pixels with the origin at the centre of the top-left
pixel; ``x`` runs along the width (columns) and ``y`` along the height
(rows).  Displacement fields store ``(dx, dy)`` in their last axis and map
template coordinates to frame coordinates, ``T_n(x) = x + phi_n(x)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields as dc_fields, asdict
from pathlib import Path

import numpy as np

STRUCTURES = ("LV", "LVM", "RV", "LA", "RA")
LABELS = {name: i + 1 for i, name in enumerate(STRUCTURES)}

MAGIC = b"CGT1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class ContainerError(ValueError):
    """Base class for malformed tensor containers."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class DtypeMismatchError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


class NonFiniteError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# validation helpers


def _frozen(arr):
    arr = np.array(arr, order="C")  # own copy: freezing must not touch the caller's array
    arr.setflags(write=False)
    return arr


def check_sequence(frames):
    """Validate a ``T x H x W`` intensity stack and return it as float64."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ValueError(f"expected a T x H x W stack, got shape {frames.shape}")
    T, H, W = frames.shape
    if T < 2:
        raise ValueError("a cine sequence needs at least two frames")
    if H < 8 or W < 8:
        raise ValueError(f"frames must be at least 8 x 8, got {H} x {W}")
    if not np.all(np.isfinite(frames)):
        raise NonFiniteError("sequence contains non-finite intensities")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise ValueError("intensities must lie in [0, 1]; use normalize_sequence")
    return frames


def check_fields(fields, shape=None):
    """Validate a ``T x H x W x 2`` displacement stack (or a single ``H x W x 2`` field)."""
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim not in (3, 4) or fields.shape[-1] != 2:
        raise ValueError(f"expected (..., H, W, 2) displacements, got shape {fields.shape}")
    if not np.all(np.isfinite(fields)):
        raise NonFiniteError("displacement field contains non-finite values")
    if shape is not None and tuple(fields.shape[-3:-1]) != tuple(shape[-2:]):
        raise ValueError(f"field grid {fields.shape[-3:-1]} does not match image grid {tuple(shape[-2:])}")
    return fields


def check_labels(labels, n_structures=len(STRUCTURES)):
    labels = np.asarray(labels)
    if labels.dtype.kind == "f":
        if not np.all(labels == np.round(labels)):
            raise ValueError("label maps must hold integers")
    elif labels.dtype.kind not in "iub":
        raise ValueError(f"unsupported label dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() > n_structures):
        raise ValueError(f"labels must lie in 0..{n_structures}, found {labels.min()}..{labels.max()}")
    return labels.astype(np.uint8)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CineSequence:
    frames: np.ndarray
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "frames", _frozen(check_sequence(self.frames)))
        sx, sy = (float(s) for s in self.spacing)
        if not (sx > 0 and sy > 0):
            raise ValueError("pixel spacing must be positive")
        object.__setattr__(self, "spacing", (sx, sy))

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class LabelMaskSet:
    labels: np.ndarray
    structure_names: tuple = STRUCTURES

    def __post_init__(self):
        names = tuple(self.structure_names)
        labels = check_labels(self.labels, len(names))
        if labels.ndim != 3:
            raise ValueError(f"expected T x H x W labels, got shape {labels.shape}")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "structure_names", names)

    @property
    def n_structures(self):
        return len(self.structure_names)


@dataclass(frozen=True)
class ProbabilityMaskSet:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 4:
            raise ValueError(f"expected T x (K+1) x H x W probabilities, got {probs.shape}")
        if not np.all(np.isfinite(probs)) or probs.min() < 0 or probs.max() > 1:
            raise ValueError("probabilities must be finite and within [0, 1]")
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-5:
            raise ValueError("per-pixel class probabilities must sum to 1")
        object.__setattr__(self, "probs", _frozen(probs))


@dataclass(frozen=True)
class DisplacementFieldSet:
    fields: np.ndarray

    def __post_init__(self):
        f = check_fields(self.fields)
        if f.ndim != 4:
            raise ValueError("expected a T x H x W x 2 stack of fields")
        object.__setattr__(self, "fields", _frozen(f))

    def __len__(self):
        return self.fields.shape[0]

    def __getitem__(self, i):
        return self.fields[i]


@dataclass(frozen=True)
class DistanceMapSet:
    maps: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.float64)
        if m.ndim != 4:
            raise ValueError(f"expected T x K x H x W distance maps, got {m.shape}")
        if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
            raise ValueError("distance maps must be finite and within [0, 1]")
        object.__setattr__(self, "maps", _frozen(m))


@dataclass(frozen=True)
class LandmarkSet:
    """Four valve-hinge points per frame: mitral pair then tricuspid pair."""

    points: np.ndarray
    image_shape: tuple = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 3 or p.shape[1:] != (4, 2):
            raise ValueError(f"expected T x 4 x 2 landmarks, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise NonFiniteError("landmarks must be finite")
        if self.image_shape is not None:
            H, W = self.image_shape[-2:]
            if (p[..., 0].min() < 0 or p[..., 1].min() < 0
                    or p[..., 0].max() > W - 1 or p[..., 1].max() > H - 1):
                raise ValueError("landmarks fall outside the image")
        object.__setattr__(self, "points", _frozen(p))

    @property
    def mitral(self):
        return self.points[:, 0:2]

    @property
    def tricuspid(self):
        return self.points[:, 2:4]


@dataclass(frozen=True)
class RegistrationConfig:
    lambda0: float = 0.8
    lambda1: float = 0.01
    w0: float = 5.0
    w1: float = 1.0
    w2: float = 1.0
    lncc_window: int = 9
    pyramid_levels: int = 3
    iterations_per_level: int = 200
    learning_rate: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    template_mode: str = "average"
    inversion_tol: float = 0.01
    inversion_max_iters: int = 100
    charbonnier_eps: float = 1e-6
    guide_full_resolution: bool = False  # anatomical terms on the finest pyramid level too

    def __post_init__(self):
        for name in ("lambda0", "lambda1", "w0", "w1", "w2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite non-negative weight, got {v}")
        if int(self.lncc_window) != self.lncc_window or self.lncc_window < 3 or self.lncc_window % 2 == 0:
            raise ValueError(f"lncc_window must be an odd integer >= 3, got {self.lncc_window}")
        if self.pyramid_levels < 1 or self.iterations_per_level < 0:
            raise ValueError("pyramid_levels must be >= 1 and iterations_per_level >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("invalid Adam hyper-parameters")
        if self.template_mode not in ("average", "pca"):
            raise ValueError(f"template_mode must be 'average' or 'pca', got {self.template_mode!r}")
        if self.inversion_tol <= 0 or self.inversion_max_iters < 1:
            raise ValueError("inversion_tol must be positive and inversion_max_iters >= 1")
        if self.charbonnier_eps <= 0:
            raise ValueError("charbonnier_eps must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return type(self)(**{**self.to_dict(), **changes})


# ---------------------------------------------------------------------------
# tensor container


def write_container(tensor, path):
    """Write ``tensor`` as a ``.cgt`` file (little-endian, row-major).

    Float tensors are stored as ``f32`` and unsigned bytes as ``u8``.
    """
    arr = np.asarray(tensor)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("refusing to write non-finite float payload")
        code = "f32"
    elif arr.dtype == np.uint8 or arr.dtype == np.bool_:
        code = "u8"
    else:
        raise DtypeMismatchError(f"unsupported payload dtype {arr.dtype}; cast to float32 or uint8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
    header = json.dumps(
        {"dtype": code, "shape": list(arr.shape), "layout": "row-major", "endian": "little"},
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def read_container(path, dtype=None):
    """Read a ``.cgt`` file, optionally insisting on ``dtype`` (``"f32"`` or ``"u8"``)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a CGT1 container")
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise TruncatedPayloadError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        code = header["dtype"]
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ContainerError(f"{path}: malformed header ({exc})") from None
    if code not in _DTYPES:
        raise DtypeMismatchError(f"{path}: unknown dtype {code!r}")
    if dtype is not None and code != dtype:
        raise DtypeMismatchError(f"{path}: expected {dtype}, file holds {code}")
    if header.get("layout", "row-major") != "row-major" or header.get("endian", "little") != "little":
        raise ContainerError(f"{path}: only little-endian row-major payloads are supported")
    if any(s < 0 for s in shape):
        raise ShapeMismatchError(f"{path}: negative dimension in {shape}")
    dt = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = raw[8 + hlen:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header needs {expected}")
    if len(payload) > expected:
        raise ShapeMismatchError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


# ---------------------------------------------------------------------------


def normalize_sequence(raw, spacing=(1.0, 1.0)):
    """Linearly rescale a raw stack so its minimum is 0 and maximum is 1."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteError("raw sequence contains non-finite values")
    lo, hi = raw.min(), raw.max()
    if not hi > lo:
        raise DegenerateInputError("cannot normalise a constant sequence")
    out = (raw - lo) / (hi - lo)
    # guard the endpoints against rounding
    out[raw == lo] = 0.0
    out[raw == hi] = 1.0
    return CineSequence(np.clip(out, 0.0, 1.0), spacing)
