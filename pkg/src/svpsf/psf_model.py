"""Rotationally symmetric PSF model over (image height, depth) bins.

Each bin holds an unconstrained logit array; the kernel is its softmax, so
every materialized kernel is strictly positive and sums to one. Queries
interpolate bilinearly between bin kernels and return the kernel at
orientation ``theta = 0``; :func:`rotate_kernel` turns it to a pixel's polar
angle.
"""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np

from .core import (
    DimensionError,
    FormatError,
    ParameterError,
    SvpsfError,
    from_polar,
    to_polar,
)

MAGIC = b"PSFG1"
_HEADER = struct.Struct("<5i")


def materialize(params):
    """Softmax of ``params`` reshaped to a square kernel.

    Accepts a flat array of length ``(2K+1)**2`` or an array whose last two
    axes are square; leading axes are treated as a batch.
    """
    p = np.asarray(params, dtype=np.float64)
    if p.ndim == 1:
        side = math.isqrt(p.size)
        if side * side != p.size or side % 2 == 0:
            raise DimensionError(f"cannot shape {p.size} parameters into an odd square kernel")
        p = p.reshape(side, side)
    if not np.all(np.isfinite(p)):
        raise ParameterError("non-finite PSF parameters")
    flat = p.reshape(p.shape[:-2] + (-1,))
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    k = e / e.sum(axis=-1, keepdims=True)
    return k.reshape(p.shape)


def softmax_backprop(kernel, grad):
    """Map a gradient w.r.t. a softmax kernel back to its logits."""
    k = np.asarray(kernel)
    axes = (-2, -1)
    return k * (grad - (grad * k).sum(axis=axes, keepdims=True))


def _is_quarter_turn(theta):
    q = theta / (np.pi / 2)
    k = round(q)
    return abs(q - k) < 1e-12, int(k) % 4


def resample_map(thetas, radius):
    """Bilinear inverse-mapping tables for rotating a kernel by each angle.

    Returns ``(idx, w)`` of shape ``(B, S*S, 4)``: output pixel ``o`` of
    rotation ``b`` reads ``sum(w[b, o] * p.flat[idx[b, o]])``. Taps falling
    outside the kernel have zero weight (zero fill).
    """
    thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
    side = 2 * radius + 1
    rows, cols = np.mgrid[0:side, 0:side]
    x = (cols - radius).ravel().astype(np.float64)
    y = (radius - rows).ravel().astype(np.float64)
    c = np.cos(thetas)[:, None]
    s = np.sin(thetas)[:, None]
    # rotate the output grid backwards (y-up frame) to find the source point
    xs = c * x + s * y
    ys = -s * x + c * y
    src_col = radius + xs
    src_row = radius - ys
    # snap near-integers so quarter turns are exact permutations
    for a in (src_col, src_row):
        near = np.rint(a)
        snap = np.abs(a - near) < 1e-9
        a[snap] = near[snap]
    c0 = np.floor(src_col)
    r0 = np.floor(src_row)
    fc = src_col - c0
    fr = src_row - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)
    idx = np.empty(thetas.shape + (side * side, 4), dtype=np.int64)
    w = np.empty(idx.shape, dtype=np.float64)
    taps = ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc))
    for t, (dr, dc, wt) in enumerate(taps):
        rr = r0 + dr
        cc = c0 + dc
        inside = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
        idx[..., t] = np.where(inside, rr * side + cc, 0)
        w[..., t] = np.where(inside, wt, 0.0)
    return idx, w


def rotate_linear(p, theta):
    """The bare bilinear resampling map (no renormalization)."""
    p = np.asarray(p, dtype=np.float64)
    idx, w = resample_map(theta, (p.shape[0] - 1) // 2)
    return (p.ravel()[idx[0]] * w[0]).sum(axis=-1).reshape(p.shape)


def rotation_backprop(grad_out, theta):
    """Adjoint of :func:`rotate_linear` applied to ``grad_out``."""
    g = np.asarray(grad_out, dtype=np.float64)
    quarter, k = _is_quarter_turn(theta)
    if quarter:
        return np.rot90(g, -k).copy()
    idx, w = resample_map(theta, (g.shape[0] - 1) // 2)
    out = np.bincount(idx[0].ravel(), weights=(w[0] * g.ravel()[:, None]).ravel(), minlength=g.size)
    return out.reshape(g.shape)


def rotate_kernel(p, theta):
    """Rotate a kernel counterclockwise by ``theta`` about its center.

    Quarter turns are exact array rotations. Other angles use bilinear
    inverse mapping with zero fill, followed by renormalization to unit sum.
    """
    p = np.asarray(p, dtype=np.float64)
    quarter, k = _is_quarter_turn(theta)
    if quarter:
        return np.rot90(p, k).copy()
    out = rotate_linear(p, theta)
    return out / out.sum()


def rotate_kernel_backprop(p, theta, grad):
    """Gradient w.r.t. ``p`` of ``<grad, rotate_kernel(p, theta)>``."""
    quarter, k = _is_quarter_turn(theta)
    if quarter:
        return np.rot90(np.asarray(grad, dtype=np.float64), -k).copy()
    raw = rotate_linear(p, theta)
    total = raw.sum()
    r = raw / total
    g_raw = (grad - (grad * r).sum()) / total
    return rotation_backprop(g_raw, theta)


def axis_weights(centers, value):
    """Linear interpolation taps ``[(index, weight), ...]`` with edge clamping."""
    n = len(centers)
    if n == 1 or value <= centers[0]:
        return [(0, 1.0)]
    if value >= centers[-1]:
        return [(n - 1, 1.0)]
    i = int(np.searchsorted(centers, value, side="right")) - 1
    t = (value - centers[i]) / (centers[i + 1] - centers[i])
    if t == 0.0:
        return [(i, 1.0)]
    return [(i, 1.0 - t), (i + 1, t)]


def _blend(kernels, weights):
    if len(kernels) == 1:
        return kernels[0].copy()
    q = sum(w * k for w, k in zip(weights, kernels))
    return q / q.sum()


class PsfGrid:
    """Kernel table for one focus distance over (image-height, depth) bins.

    Parameters
    ----------
    ih_centers, depth_centers : sequence of float
        Strictly increasing bin centers. A single image-height bin makes the
        grid spatially invariant: it ignores position and is never rotated.
    params : ndarray, shape (n_ih, n_depth, 2K+1, 2K+1)
        Softmax logits per bin.
    """

    def __init__(self, ih_centers, depth_centers, params, focus_index=0, n_focus=1):
        self.ih_centers = np.array(ih_centers, dtype=np.float64)
        self.depth_centers = np.array(depth_centers, dtype=np.float64)
        params = np.array(params, dtype=np.float64)
        for name, c in (("ih_centers", self.ih_centers), ("depth_centers", self.depth_centers)):
            if c.ndim != 1 or c.size == 0:
                raise ParameterError(f"{name} must be a non-empty 1-D sequence")
            if np.any(np.diff(c) <= 0):
                raise ParameterError(f"{name} must be strictly increasing")
        if self.ih_centers[0] < 0 or self.ih_centers[-1] > 1:
            raise ParameterError("ih_centers must lie in [0, 1]")
        expected = (self.ih_centers.size, self.depth_centers.size)
        if params.ndim != 4 or params.shape[:2] != expected or params.shape[2] != params.shape[3]:
            raise DimensionError(f"params shape {params.shape} does not match bins {expected}")
        if params.shape[2] % 2 == 0:
            raise DimensionError("kernel side must be odd")
        if not np.all(np.isfinite(params)):
            raise ParameterError("non-finite PSF parameters")
        params.setflags(write=False)
        self.params = params
        self.focus_index = int(focus_index)
        self.n_focus = int(n_focus)
        self._kernels = None

    @classmethod
    def uniform(cls, depth_range, n_ih=9, n_depth=12, radius=12, focus_index=0, n_focus=1):
        """Grid with zero logits (uniform kernels) and uniformly spaced bins."""
        ih = np.linspace(0.0, 1.0, n_ih) if n_ih > 1 else np.zeros(1)
        depths = np.linspace(depth_range[0], depth_range[1], n_depth)
        side = 2 * radius + 1
        return cls(ih, depths, np.zeros((len(ih), n_depth, side, side)), focus_index, n_focus)

    @property
    def radius(self):
        return (self.params.shape[-1] - 1) // 2

    @property
    def is_invariant(self):
        return self.ih_centers.size == 1

    @property
    def depth_range(self):
        return float(self.depth_centers[0]), float(self.depth_centers[-1])

    def kernels(self):
        """All materialized bin kernels, shape ``(n_ih, n_depth, S, S)``."""
        if self._kernels is None:
            k = materialize(self.params)
            k.setflags(write=False)
            self._kernels = k
        return self._kernels

    def terms(self, ih, depth):
        """Nonzero bilinear taps ``[((i, j), weight), ...]`` for a query."""
        ih_taps = axis_weights(self.ih_centers, ih)
        d_taps = axis_weights(self.depth_centers, depth)
        return [((i, j), wi * wj) for i, wi in ih_taps for j, wj in d_taps]

    def query_psf(self, ih, depth):
        """Interpolated kernel at orientation zero."""
        if self.params.size == 0:
            raise SvpsfError("empty grid")
        k = self.kernels()
        terms = self.terms(ih, depth)
        return _blend([k[ij] for ij, _ in terms], [w for _, w in terms])

    def kernel_at(self, ih, theta, depth):
        """Kernel for a pixel at polar position ``(ih, theta)``."""
        p = self.query_psf(ih, depth)
        if self.is_invariant:
            return p
        return rotate_kernel(p, theta)

    def with_params(self, params):
        return PsfGrid(self.ih_centers, self.depth_centers, params, self.focus_index, self.n_focus)

    def digest(self):
        return hashlib.sha256(to_bytes(self)).hexdigest()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(to_bytes(self))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return from_bytes(fh.read(), source=str(path))


def to_bytes(grid):
    side = grid.params.shape[-1]
    head = _HEADER.pack(grid.focus_index, grid.n_focus, (side - 1) // 2, grid.ih_centers.size, grid.depth_centers.size)
    return b"".join(
        [
            MAGIC,
            head,
            grid.ih_centers.astype("<f8").tobytes(),
            grid.depth_centers.astype("<f8").tobytes(),
            np.ascontiguousarray(grid.params, dtype="<f4").tobytes(),
        ]
    )


def from_bytes(buf, source="<bytes>"):
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: bad magic, not a PSFG1 file")
    pos = len(MAGIC)
    if len(buf) < pos + _HEADER.size:
        raise FormatError(f"{source}: truncated header")
    focus_index, n_focus, radius, n_ih, n_d = _HEADER.unpack_from(buf, pos)
    pos += _HEADER.size
    if min(n_ih, n_d) < 1 or radius < 0 or not 0 <= focus_index < max(n_focus, 1):
        raise FormatError(f"{source}: inconsistent header")
    side = 2 * radius + 1
    need = pos + 8 * (n_ih + n_d) + 4 * n_ih * n_d * side * side
    if len(buf) != need:
        raise FormatError(f"{source}: expected {need} bytes, found {len(buf)}")
    ih = np.frombuffer(buf, "<f8", n_ih, pos)
    pos += 8 * n_ih
    depths = np.frombuffer(buf, "<f8", n_d, pos)
    pos += 8 * n_d
    params = np.frombuffer(buf, "<f4", n_ih * n_d * side * side, pos).reshape(n_ih, n_d, side, side)
    try:
        return PsfGrid(ih, depths, params.astype(np.float64), focus_index, n_focus)
    except SvpsfError as exc:
        raise FormatError(f"{source}: {exc}") from exc


class CartesianPsfGrid:
    """Per-(x, y)-bin kernels without rotation; the ablation alternative to :class:`PsfGrid`.

    Bin centers are in pixel units of a ``width`` x ``height`` image.
    """

    def __init__(self, x_centers, y_centers, depth_centers, params, width, height, focus_index=0):
        self.x_centers = np.array(x_centers, dtype=np.float64)
        self.y_centers = np.array(y_centers, dtype=np.float64)
        self.depth_centers = np.array(depth_centers, dtype=np.float64)
        params = np.array(params, dtype=np.float64)
        shape = (self.x_centers.size, self.y_centers.size, self.depth_centers.size)
        if params.ndim != 5 or params.shape[:3] != shape:
            raise DimensionError(f"params shape {params.shape} does not match bins {shape}")
        params.setflags(write=False)
        self.params = params
        self.width = int(width)
        self.height = int(height)
        self.focus_index = int(focus_index)
        self._kernels = None

    @classmethod
    def uniform(cls, depth_range, width, height, n_xy=9, n_depth=12, radius=12, focus_index=0):
        xs = np.linspace(0.0, width - 1.0, n_xy)
        ys = np.linspace(0.0, height - 1.0, n_xy)
        depths = np.linspace(depth_range[0], depth_range[1], n_depth)
        side = 2 * radius + 1
        return cls(xs, ys, depths, np.zeros((n_xy, n_xy, n_depth, side, side)), width, height, focus_index)

    @property
    def radius(self):
        return (self.params.shape[-1] - 1) // 2

    @property
    def is_invariant(self):
        return False

    @property
    def depth_range(self):
        return float(self.depth_centers[0]), float(self.depth_centers[-1])

    def kernels(self):
        if self._kernels is None:
            self._kernels = materialize(self.params)
        return self._kernels

    def terms(self, x, y, depth):
        xt = axis_weights(self.x_centers, x)
        yt = axis_weights(self.y_centers, y)
        dt = axis_weights(self.depth_centers, depth)
        return [((i, j, m), wx * wy * wd) for i, wx in xt for j, wy in yt for m, wd in dt]

    def query_xy(self, x, y, depth):
        k = self.kernels()
        terms = self.terms(x, y, depth)
        return _blend([k[t] for t, _ in terms], [w for _, w in terms])

    def kernel_at(self, ih, theta, depth):
        x, y = from_polar(ih, theta, self.width, self.height)
        return self.query_xy(float(x), float(y), depth)

    def with_params(self, params):
        return CartesianPsfGrid(
            self.x_centers, self.y_centers, self.depth_centers, params, self.width, self.height, self.focus_index
        )


    def digest(self):
        """SHA-256 of the bin centers and float32 parameters (there is no file format to hash)."""
        h = hashlib.sha256()
        for arr in (self.x_centers, self.y_centers, self.depth_centers):
            h.update(np.asarray(arr, "<f8").tobytes())
        h.update(np.asarray(self.params, "<f4").tobytes())
        return h.hexdigest()
