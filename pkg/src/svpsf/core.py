"""Shared types, validation helpers, polar coordinates and valid-mode convolution.

Images are plain 2-D ``float64`` numpy arrays (row = y, column = x) holding
luminance in [0, 1]. Kernels are square odd-sized arrays that are
nonnegative and sum to one. Helpers here validate both so that every module
can accept array-likes, the way scikit-learn's ``check_array`` does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import signal


class SvpsfError(Exception):
    """Base class for library errors."""


class DimensionError(SvpsfError, ValueError):
    """Array shapes do not fit together."""


class ParameterError(SvpsfError, ValueError):
    """A parameter value is outside its domain."""


class DataError(SvpsfError, ValueError):
    """A dataset does not contain what an operation needs."""


class DivergenceError(SvpsfError, ArithmeticError):
    """Optimization produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ProtocolError(SvpsfError):
    """An evaluation would break train/test separation."""


class FormatError(SvpsfError, ValueError):
    """A file on disk is malformed."""


def check_image(image, name="image"):
    """Return ``image`` as a finite 2-D float64 array clipped to [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return np.clip(arr, 0.0, 1.0)


def check_kernel(kernel, atol=1e-9):
    """Validate a PSF kernel: square, odd side, nonnegative, unit sum."""
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise DimensionError(f"kernel must be square with odd side, got {k.shape}")
    if not np.all(np.isfinite(k)):
        raise ParameterError("kernel contains non-finite values")
    if np.any(k < 0):
        raise ParameterError("kernel has negative entries")
    if abs(k.sum() - 1.0) > atol:
        raise ParameterError(f"kernel sums to {k.sum():.12g}, expected 1")
    return k


def kernel_radius(kernel):
    return (np.shape(kernel)[-1] - 1) // 2


def delta_kernel(radius=12):
    k = np.zeros((2 * radius + 1, 2 * radius + 1))
    k[radius, radius] = 1.0
    return k


def kernel_centroid(kernel):
    """Centroid ``(dx, dy)`` of a kernel relative to its center, in pixels (x right, y down)."""
    k = np.asarray(kernel, dtype=np.float64)
    r = kernel_radius(k)
    offs = np.arange(-r, r + 1, dtype=np.float64)
    total = k.sum()
    return float((k.sum(axis=0) * offs).sum() / total), float((k.sum(axis=1) * offs).sum() / total)


class PolarPos(NamedTuple):
    """Image height (0 at center, 1 at the corner) and polar angle in [0, 2*pi)."""

    ih: float
    theta: float


def image_center(width, height):
    return (width - 1) / 2.0, (height - 1) / 2.0


def to_polar(x, y, width, height):
    """Polar position of pixel ``(x, y)``.

    The angle is counterclockwise from the +x axis with y pointing up, i.e. a
    pixel above the center (smaller row index) has ``theta = pi/2``. Accepts
    scalars (returns a :class:`PolarPos`) or arrays (returns a tuple of arrays).
    """
    cx, cy = image_center(width, height)
    dx = np.asarray(x, dtype=np.float64) - cx
    dy = cy - np.asarray(y, dtype=np.float64)
    ih = np.hypot(dx, dy) / math.hypot(cx, cy)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    # mod can return exactly 2*pi for tiny negative angles
    theta = np.where(theta >= 2 * np.pi, 0.0, theta)
    if ih.ndim == 0:
        return PolarPos(float(ih), float(theta))
    return ih, theta


def from_polar(ih, theta, width, height):
    """Inverse of :func:`to_polar`, returning fractional pixel coordinates."""
    cx, cy = image_center(width, height)
    r = np.asarray(ih, dtype=np.float64) * math.hypot(cx, cy)
    return cx + r * np.cos(theta), cy - r * np.sin(theta)


def convolve_valid(image, kernel):
    """True 2-D convolution keeping only fully supported output pixels.

    Output shape is ``(h - kh + 1, w - kw + 1)``. Computed as a direct sum over
    kernel taps in row-major order, so a delta kernel reproduces the central
    crop bit for bit and :func:`svpsf.optics.render_blur` with a constant
    kernel reproduces this function exactly.
    """
    img = np.asarray(image, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if img.ndim != 2 or k.ndim != 2:
        raise DimensionError("convolve_valid expects 2-D image and kernel")
    kh, kw = k.shape
    if img.shape[0] < kh or img.shape[1] < kw:
        raise DimensionError(f"image {img.shape} is smaller than kernel {k.shape}")
    oh, ow = img.shape[0] - kh + 1, img.shape[1] - kw + 1
    out = np.zeros((oh, ow))
    for v in range(kh):
        for u in range(kw):
            out += k[v, u] * img[kh - 1 - v : kh - 1 - v + oh, kw - 1 - u : kw - 1 - u + ow]
    return out


def convolve_valid_fft(image, kernel):
    """FFT version of :func:`convolve_valid` for large inputs (not bit-exact)."""
    return signal.fftconvolve(np.asarray(image, float), np.asarray(kernel, float), mode="valid")


def crop_center(image, margin):
    """Drop ``margin`` pixels from every side."""
    if margin == 0:
        return np.asarray(image)
    return np.asarray(image)[margin:-margin, margin:-margin]


DEFAULT_DEPTH_RANGE = (0.5, 1.415)


@dataclass(frozen=True)
class CameraConfig:
    """Thin-lens camera with a focus-bracketed stack.

    Lengths are meters. ``f1`` is the F-number of the sharp capture, ``f2`` of
    the blurred captures; ``breathing_mags[n]`` is the field-of-view
    magnification at focus distance ``n`` relative to the first one.
    ``depth_range`` is the span of scene depths the PSFs must cover.
    """

    focal_length: float = 0.020
    f1: float = 22.0
    f2: float = 6.0
    focus_distances: tuple = (0.3,)
    pixel_pitch: float = 10e-6
    image_width: int = 501
    image_height: int = 501
    breathing_mags: tuple = field(default=None)
    depth_range: tuple = field(default=None)

    def __post_init__(self):
        fds = tuple(float(v) for v in self.focus_distances)
        object.__setattr__(self, "focus_distances", fds)
        mags = self.breathing_mags
        mags = (1.0,) * len(fds) if mags is None else tuple(float(v) for v in mags)
        object.__setattr__(self, "breathing_mags", mags)
        rng = DEFAULT_DEPTH_RANGE if self.depth_range is None else self.depth_range
        object.__setattr__(self, "depth_range", tuple(float(v) for v in rng))
        self.validate()

    def validate(self):
        fds = self.focus_distances
        if not fds:
            raise ParameterError("focus_distances must not be empty")
        if any(b <= a for a, b in zip(fds, fds[1:])):
            raise ParameterError("focus_distances must be strictly increasing")
        if min(fds) <= self.focal_length:
            raise ParameterError("focus_distances must exceed focal_length")
        if not self.f1 > self.f2 > 0:
            raise ParameterError("need f1 > f2 > 0 (sharp capture uses the larger F-number)")
        if len(self.breathing_mags) != len(fds):
            raise ParameterError("breathing_mags must have one entry per focus distance")
        if self.breathing_mags[0] != 1.0:
            raise ParameterError("breathing_mags[0] must be 1")
        if self.pixel_pitch <= 0 or self.image_width < 1 or self.image_height < 1:
            raise ParameterError("pixel_pitch and image size must be positive")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ParameterError(f"invalid depth_range {self.depth_range}")

    @property
    def n_focus(self):
        return len(self.focus_distances)

    @property
    def r_max(self):
        """Center-to-corner distance in pixels."""
        cx, cy = image_center(self.image_width, self.image_height)
        return math.hypot(cx, cy)

    def to_dict(self):
        return {
            "focal_length": self.focal_length,
            "f1": self.f1,
            "f2": self.f2,
            "focus_distances": list(self.focus_distances),
            "pixel_pitch": self.pixel_pitch,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "breathing_mags": list(self.breathing_mags),
            "depth_range": list(self.depth_range),
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown camera keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("focus_distances", "breathing_mags", "depth_range"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DepthMap:
    """Per-pixel depth in meters with a validity mask."""

    depths: np.ndarray
    valid: np.ndarray
    valid_range: tuple

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depths.shape != self.valid.shape or self.depths.ndim != 2:
            raise DimensionError("depths and valid mask must be matching 2-D arrays")
        lo, hi = self.valid_range
        inside = (self.depths >= lo - 1e-12) & (self.depths <= hi + 1e-12)
        self.valid = self.valid & inside & np.isfinite(self.depths)

    @property
    def height(self):
        return self.depths.shape[0]

    @property
    def width(self):
        return self.depths.shape[1]

    @classmethod
    def constant(cls, depth, width, height, valid_range=None):
        valid_range = valid_range or (depth, depth)
        return cls(np.full((height, width), float(depth)), np.ones((height, width), bool), valid_range)

