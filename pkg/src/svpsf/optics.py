"""Thin-lens optics simulator: ground-truth spatially variant PSFs and renderers.

Stands in for a real camera. The ground-truth PSF at image height ``ih`` is
an anti-aliased ellipse whose size follows the thin-lens circle of
confusion (with field curvature moving the focal plane off-axis), stretched
radially and squeezed tangentially as ``ih`` grows, turned to the pixel's
polar angle with the same bilinear rotation the PSF model uses (so the
ground truth is exactly rotationally symmetric in the model's sense), and
displaced radially by focus breathing.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage

from .core import (
    CameraConfig,
    DataError,
    DepthMap,
    DimensionError,
    FormatError,
    ParameterError,
    SvpsfError,
    check_image,
    crop_center,
    to_polar,
)
from .imageio import read_pfm, write_pfm

_SUB = 4


class SupportOverflowError(SvpsfError, ValueError):
    """The requested blur does not fit inside the kernel support."""


@dataclass(frozen=True)
class AberrationModel:
    """Field-dependent deviations from the ideal thin lens.

    ``coma_strength``: radial stretch per unit image height.
    ``field_curvature``: focus shift (m) at image height 1, scaling with ih**2.
    ``astig_ratio``: tangential squeeze per unit image height.
    """

    coma_strength: float = 0.6
    field_curvature: float = 0.05
    astig_ratio: float = 0.8

    def __post_init__(self):
        vals = (self.coma_strength, self.field_curvature, self.astig_ratio)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError("aberration parameters must be finite")
        if self.coma_strength <= -1 or self.astig_ratio <= -1:
            raise ParameterError("aberration stretch factors must stay positive on the field")

    @classmethod
    def ideal(cls):
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown aberration keys: {sorted(unknown)}")
        return cls(**d)


def coc_diameter(cfg, d, fd):
    """Blur-disk diameter in pixels of a point at depth ``d`` when focused at ``fd``.

    Uses the blurred-capture F-number ``cfg.f2``.
    """
    f = cfg.focal_length
    d = np.asarray(d, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    if np.any(d <= 0):
        raise ParameterError("depth must be positive")
    if np.any(fd <= f):
        raise ParameterError("focus distance must exceed the focal length")
    out = f * f * np.abs(d - fd) / (cfg.f2 * d * (fd - f)) / cfg.pixel_pitch
    return float(out) if out.ndim == 0 else out


def oracle_shape(cfg, ab, ih, d, focus_index):
    """Blur radius, radial/tangential stretch and breathing shift (pixels)."""
    ih = np.asarray(ih, dtype=np.float64)
    fd = cfg.focus_distances[focus_index] + ab.field_curvature * ih * ih
    radius = 0.5 * coc_diameter(cfg, d, fd)
    stretch = 1.0 + ab.coma_strength * ih
    squeeze = 1.0 / (1.0 + ab.astig_ratio * ih)
    shift = (cfg.breathing_mags[focus_index] - 1.0) * ih * cfg.r_max
    return radius, stretch, squeeze, shift


def _check_support(radius, stretch, squeeze, shift, K):
    extent = (np.asarray(radius) + 0.5) * np.maximum(stretch, squeeze) + np.abs(shift) + 2.0
    worst = float(np.max(extent))
    if worst > K:
        raise SupportOverflowError(f"blur extent {worst:.2f} px exceeds kernel radius {K}")


@numba.njit(cache=True)
def _draw_shape(R, a, b, K, h, buf):
    """Anti-aliased ellipse at theta = 0 (semi-axes ``a*R`` along x, ``b*R`` along y), unit sum.

    Only the centered ``(2h+1)**2`` window of ``buf`` can be nonzero.
    """
    buf[:, :] = 0.0
    inv16 = 1.0 / (_SUB * _SUB)
    ext = (R + 0.5) * max(a, b)
    lo = max(-h, -int(math.ceil(ext + 0.5)))
    hi = min(h, int(math.ceil(ext + 0.5)))
    # subsamples lie within 0.375*sqrt(2) px of the pixel center
    slack = 0.375 * math.sqrt(2.0) / min(a, b)
    total = 0.0
    for dv in range(lo, hi + 1):
        for du in range(lo, hi + 1):
            arc = du / a
            atc = dv / b
            rho = math.sqrt(arc * arc + atc * atc)
            if rho - slack >= R + 0.5:
                continue
            if rho + slack <= R - 0.5:
                v = 1.0
            else:
                acc = 0.0
                for sv in range(_SUB):
                    Y = -(dv + (sv + 0.5) / _SUB - 0.5)
                    for su in range(_SUB):
                        X = du + (su + 0.5) / _SUB - 0.5
                        ar = X / a
                        at = Y / b
                        w = R + 0.5 - math.sqrt(ar * ar + at * at)
                        if w > 0.0:
                            acc += min(w, 1.0)
                v = acc * inv16
            buf[dv + K, du + K] = v
            total += v
    buf /= total


@numba.njit(cache=True)
def _snap(v):
    near = math.floor(v + 0.5)
    return near if abs(v - near) < 1e-9 else v


@numba.njit(cache=True)
def _rotate_into(src, c, s, quarter, K, h, dst):
    """Bilinear inverse-mapped rotation, the same map as :func:`svpsf.psf_model.rotate_kernel`.

    ``src`` must vanish outside its centered ``(2h-1)**2`` window; outputs
    beyond the ``(2h+1)**2`` window then read only zeros and are skipped.
    """
    side = 2 * K + 1
    dst[:, :] = 0.0
    total = 0.0
    for r in range(K - h, K + h + 1):
        for q in range(K - h, K + h + 1):
            x = float(q - K)
            y = float(K - r)
            col = _snap(K + (c * x + s * y))
            row = _snap(K - (-s * x + c * y))
            c0 = math.floor(col)
            r0 = math.floor(row)
            fc = col - c0
            fr = row - r0
            ic = int(c0)
            ir = int(r0)
            v = 0.0
            for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
                rr = ir + dr
                cc = ic + dc
                if 0 <= rr < side and 0 <= cc < side:
                    v += src[rr, cc] * wt
            dst[r, q] = v
            total += v
    if not quarter:
        dst /= total


@numba.njit(cache=True)
def _splat_shift(src, sx, sy, K, h, dst):
    """Bilinear splat by ``(sx, sy)`` pixels (x right, y down); moves the centroid by exactly that."""
    side = 2 * K + 1
    fx = math.floor(sx)
    fy = math.floor(sy)
    tx = sx - fx
    ty = sy - fy
    ix = int(fx)
    iy = int(fy)
    dst[:, :] = 0.0
    for r in range(K - h, K + h + 1):
        for q in range(K - h, K + h + 1):
            v = src[r, q]
            if v == 0.0:
                continue
            for dr, dq, wt in ((0, 0, (1 - ty) * (1 - tx)), (0, 1, (1 - ty) * tx), (1, 0, ty * (1 - tx)), (1, 1, ty * tx)):
                rr = r + iy + dr
                qq = q + ix + dq
                if wt != 0.0 and 0 <= rr < side and 0 <= qq < side:
                    dst[rr, qq] += v * wt
    dst /= dst.sum()


@numba.njit(cache=True)
def _draw_kernels(radius, stretch, squeeze, cos_t, sin_t, quarter, shift, K, out):
    side = 2 * K + 1
    shape = np.empty((side, side))
    rot = np.empty((side, side))
    for m in range(radius.size):
        # the shape lies within `ext` of the center, its rotation within ext + sqrt(2)
        ext = (radius[m] + 0.5) * max(stretch[m], squeeze[m]) + 0.5
        h_shape = min(K, int(math.ceil(ext)) + 1)
        h_rot = min(K, int(math.ceil(ext * math.sqrt(2.0))) + 2)
        _draw_shape(radius[m], stretch[m], squeeze[m], K, h_shape, shape)
        _rotate_into(shape, cos_t[m], sin_t[m], quarter[m], K, h_rot, rot)
        if shift[m] == 0.0:
            out[m] = rot
        else:
            _splat_shift(rot, shift[m] * cos_t[m], -shift[m] * sin_t[m], K, h_rot, out[m])


def _quarter_turns(theta):
    q = theta / (np.pi / 2)
    return np.abs(q - np.rint(q)) < 1e-12


def oracle_kernels(cfg, ab, ih, theta, d, focus_index, radius=12):
    """Vectorized :func:`oracle_psf` over arrays of ``ih`` and ``theta``."""
    ih = np.atleast_1d(np.asarray(ih, dtype=np.float64))
    theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), ih.shape)
    if not 0 <= focus_index < cfg.n_focus:
        raise ParameterError(f"focus_index {focus_index} out of range")
    R, a, b, sh = oracle_shape(cfg, ab, ih, d, focus_index)
    R = np.broadcast_to(R, ih.shape)
    _check_support(R, a, b, sh, radius)
    out = np.empty(ih.shape + (2 * radius + 1, 2 * radius + 1))
    flat = out.reshape(-1, 2 * radius + 1, 2 * radius + 1)
    _draw_kernels(
        np.ascontiguousarray(R, dtype=np.float64).ravel(),
        np.ascontiguousarray(a).ravel(),
        np.ascontiguousarray(b).ravel(),
        np.cos(theta).ravel(),
        np.sin(theta).ravel(),
        _quarter_turns(theta).ravel(),
        np.ascontiguousarray(np.broadcast_to(sh, ih.shape)).ravel(),
        radius,
        flat,
    )
    return out


def oracle_psf(cfg, ab, ih, theta, d, focus_index, radius=12):
    """Ground-truth PSF at polar position ``(ih, theta)`` for depth ``d`` and focus ``focus_index``."""
    return oracle_kernels(cfg, ab, [ih], [theta], d, focus_index, radius)[0]


class OracleSource:
    """Adapter giving the ground-truth PSFs the same ``kernel_at`` interface as fitted grids."""

    is_invariant = False

    def __init__(self, cfg, ab, focus_index, radius=12):
        self.cfg = cfg
        self.ab = ab
        self.focus_index = focus_index
        self.radius = radius
        self.depth_range = cfg.depth_range

    def kernel_at(self, ih, theta, depth):
        return oracle_psf(self.cfg, self.ab, ih, theta, depth, self.focus_index, self.radius)

    def query_psf(self, ih, depth):
        return self.kernel_at(ih, 0.0, depth)


def tabulate_oracle(cfg, ab, focus_index, n_ih=9, n_depth=12, radius=12, floor=1e-12):
    """A :class:`~svpsf.psf_model.PsfGrid` whose bins hold the ground-truth kernels.

    Logits are ``log(kernel + floor)``, so bin kernels match the oracle up to
    ``floor`` per pixel.
    """
    from .psf_model import PsfGrid

    ih_c = np.linspace(0.0, 1.0, n_ih)
    d_c = np.linspace(*cfg.depth_range, n_depth)
    params = np.empty((n_ih, n_depth, 2 * radius + 1, 2 * radius + 1))
    for j, d in enumerate(d_c):
        params[:, j] = np.log(oracle_kernels(cfg, ab, ih_c, 0.0, d, focus_index, radius) + floor)
    return PsfGrid(ih_c, d_c, params, focus_index, cfg.n_focus)


def pointwise(fn):
    """Turn a scalar provider ``fn(x, y) -> kernel`` into a batch provider."""

    def provider(xs, ys):
        return np.stack([fn(int(x), int(y)) for x, y in zip(xs, ys)])

    return provider


def render_blur(sharp, provider, radius=12, rows_per_chunk=16):
    """Spatially variant gather convolution over the valid region.

    ``provider(xs, ys)`` receives 1-D arrays of output-pixel coordinates and
    returns the kernels for those pixels, shape ``(M, 2K+1, 2K+1)``. Output
    pixel ``(x, y)`` sits at ``(x + K, y + K)`` in ``sharp``. For a kernel
    that is the same everywhere the result equals
    :func:`svpsf.core.convolve_valid` bit for bit.
    """
    img = np.asarray(sharp, dtype=np.float64)
    side = 2 * radius + 1
    if img.ndim != 2 or img.shape[0] < side or img.shape[1] < side:
        raise DimensionError(f"image {img.shape} is smaller than kernel side {side}")
    oh, ow = img.shape[0] - 2 * radius, img.shape[1] - 2 * radius
    out = np.zeros((oh, ow))
    xs_row = np.arange(ow)
    for y0 in range(0, oh, rows_per_chunk):
        y1 = min(oh, y0 + rows_per_chunk)
        ys, xs = np.meshgrid(np.arange(y0, y1), xs_row, indexing="ij")
        kern = np.asarray(provider(xs.ravel(), ys.ravel()), dtype=np.float64)
        # tap-major layout keeps the inner multiply-add contiguous
        kern = np.ascontiguousarray(kern.reshape(y1 - y0, ow, side, side).transpose(2, 3, 0, 1))
        acc = out[y0:y1]
        for v in range(side):
            for u in range(side):
                r = y0 + 2 * radius - v
                c = 2 * radius - u
                acc += kern[v, u] * img[r : r + (y1 - y0), c : c + ow]
    return out


def oracle_provider(cfg, ab, depth, focus_index, radius=12, width=None, height=None):
    """Batch provider of ground-truth PSFs for a front-parallel plane at ``depth``."""
    width = cfg.image_width if width is None else width
    height = cfg.image_height if height is None else height

    def provider(xs, ys):
        ih, theta = to_polar(np.asarray(xs, float), np.asarray(ys, float), width, height)
        return oracle_kernels(cfg, ab, ih, theta, depth, focus_index, radius)

    return provider


def render_plane(cfg, ab, texture, depth, focus_index, radius=12):
    """Blurred capture of a textured front-parallel plane.

    ``texture`` must be ``(H + 2K, W + 2K)``; returns ``(H, W)``.
    """
    tex = check_image(texture, "texture")
    expected = (cfg.image_height + 2 * radius, cfg.image_width + 2 * radius)
    if tex.shape != expected:
        raise DimensionError(f"texture shape {tex.shape}, expected {expected}")
    return render_blur(tex, oracle_provider(cfg, ab, depth, focus_index, radius), radius)


def make_texture(shape, rng, octaves=(1.0, 2.0, 4.0, 8.0)):
    """Band-limited random texture in [0.05, 0.95] (a stand-in for photographic textures)."""
    img = np.zeros(shape)
    for i, sigma in enumerate(octaves):
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
        img += layer / layer.std() * (0.8**i)
    lo, hi = np.percentile(img, [1, 99])
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 0.9 + 0.05


def _f32(image):
    return np.asarray(image, dtype=np.float32).astype(np.float64)


# -- dataset manifest ---------------------------------------------------------


@dataclass(frozen=True)
class Record:
    path: str
    role: str
    focus_index: int
    focus_distance_m: float
    f_number: float
    depth_m: float
    texture_id: int

    def __post_init__(self):
        if self.role not in ("sharp", "blurred"):
            raise FormatError(f"record role must be sharp|blurred, got {self.role!r}")


@dataclass
class Manifest:
    records: list
    camera: CameraConfig | None = None
    aberration: AberrationModel | None = None
    seed: int | None = None
    root: Path = field(default=Path("."), compare=False)

    def to_dict(self):
        out = {"version": 1, "records": [asdict(r) for r in self.records]}
        if self.camera is not None:
            out["camera"] = self.camera.to_dict()
        if self.aberration is not None:
            out["aberration"] = asdict(self.aberration)
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def loads(cls, text, root=Path(".")):
        try:
            data = json.loads(text)
            records = [Record(**r) for r in data["records"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc
        camera = CameraConfig.from_dict(data["camera"]) if "camera" in data else None
        ab = AberrationModel.from_dict(data["aberration"]) if "aberration" in data else None
        return cls(records, camera, ab, data.get("seed"), Path(root))

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.loads(path.read_text(), root=path.parent)

    def depths(self):
        return sorted({r.depth_m for r in self.records})

    def focus_indices(self):
        return sorted({r.focus_index for r in self.records if r.role == "blurred"})


@dataclass
class Pair:
    sharp: np.ndarray
    blurred: np.ndarray
    depth: float
    focus_index: int
    texture_id: int


def load_pairs(manifest, focus_index):
    """Sharp/blurred pairs of one focus index, in manifest order."""
    if isinstance(manifest, (str, os.PathLike)):
        manifest = Manifest.load(manifest)
    sharp = {}
    for r in manifest.records:
        if r.role == "sharp":
            sharp[(r.texture_id, r.depth_m)] = r
    pairs, cache = [], {}
    for r in manifest.records:
        if r.role != "blurred" or r.focus_index != focus_index:
            continue
        key = (r.texture_id, r.depth_m)
        if key not in sharp:
            raise DataError(f"no sharp image for texture {r.texture_id} at depth {r.depth_m}")
        if key not in cache:
            cache[key] = read_pfm(manifest.root / sharp[key].path)
        blurred = read_pfm(manifest.root / r.path)
        if blurred.shape != cache[key].shape:
            raise DimensionError(f"{r.path}: shape {blurred.shape} differs from its sharp image")
        pairs.append(Pair(cache[key], blurred, r.depth_m, focus_index, r.texture_id))
    if not pairs:
        raise DataError(f"dataset has no pairs for focus index {focus_index}")
    return pairs


def gen_pair_dataset(cfg, ab, textures, depths, out_dir, seed=0, radius=12):
    """Render the sharp/blurred training set and write it with its manifest.

    For each texture and depth: one sharp image (no blur, the central crop of
    the texture) and one blurred image per focus distance. Returns the
    :class:`Manifest` (also written as ``manifest.json``).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = cfg.depth_range
    for d in depths:
        if not lo <= d <= hi:
            raise ParameterError(f"depth {d} outside target range {cfg.depth_range}")
    records = []
    for t, tex in enumerate(textures):
        tex = check_image(tex, "texture")
        for i, d in enumerate(depths):
            sharp = _f32(crop_center(tex, radius))
            name = f"t{t:03d}_d{i:03d}_sharp.pfm"
            write_pfm(out_dir / name, sharp)
            records.append(Record(name, "sharp", 0, cfg.focus_distances[0], cfg.f1, float(d), t))
            for n, fd in enumerate(cfg.focus_distances):
                blurred = np.clip(render_plane(cfg, ab, tex, d, n, radius), 0.0, 1.0)
                name = f"t{t:03d}_d{i:03d}_f{n:02d}.pfm"
                write_pfm(out_dir / name, blurred)
                records.append(Record(name, "blurred", n, fd, cfg.f2, float(d), t))
    manifest = Manifest(records, cfg, ab, seed, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def random_textures(cfg, count, seed, radius=12):
    rng = np.random.default_rng(seed)
    shape = (cfg.image_height + 2 * radius, cfg.image_width + 2 * radius)
    return [make_texture(shape, rng) for _ in range(count)]


def gen_two_plane_scene(cfg, ab, tex_fg, tex_bg, d_fg, d_bg, mask, seed=0, radius=12, noise_sigma=0.0):
    """Layered focal stack of a foreground plane over a background plane.

    ``mask`` (same frame as the textures) is 1 where the foreground is.
    Each stack image is ``blur_fg(tex_fg * mask) + (1 - blur_fg(mask)) * blur_bg(tex_bg)``.
    Returns the list of ``N`` images and the ground-truth :class:`DepthMap`.
    """
    if not d_fg < d_bg:
        raise ParameterError("foreground must be nearer than background")
    lo, hi = cfg.depth_range
    if not (lo <= d_fg <= hi and lo <= d_bg <= hi):
        raise ParameterError(f"plane depths must lie in {cfg.depth_range}")
    tex_fg = check_image(tex_fg, "tex_fg")
    tex_bg = check_image(tex_bg, "tex_bg")
    mask = check_image(mask, "mask")
    rng = np.random.default_rng(seed)
    stack = []
    for n in range(cfg.n_focus):
        bg = render_plane(cfg, ab, tex_bg, d_bg, n, radius)
        prov = oracle_provider(cfg, ab, d_fg, n, radius)
        if np.any(mask > 0):
            fg = render_blur(tex_fg * mask, prov, radius)
            alpha = render_blur(mask, prov, radius)
            img = fg + (1.0 - alpha) * bg
        else:
            img = bg
        if noise_sigma > 0:
            img = img + rng.normal(0.0, noise_sigma, img.shape)
        stack.append(_f32(np.clip(img, 0.0, 1.0)))
    inner = crop_center(mask, radius)
    depths = np.where(inner > 0.5, d_fg, d_bg)
    return stack, DepthMap(depths, np.ones(depths.shape, bool), cfg.depth_range)


def gen_one_plane_scene(cfg, ab, texture, depth, radius=12):
    """Focal stack of a single front-parallel plane and its constant depth map."""
    stack = [_f32(np.clip(render_plane(cfg, ab, texture, depth, n, radius), 0.0, 1.0)) for n in range(cfg.n_focus)]
    return stack, DepthMap.constant(depth, cfg.image_width, cfg.image_height, cfg.depth_range)


def laplacian_energy(image):
    return float(np.mean(ndimage.laplace(np.asarray(image, float)) ** 2))
