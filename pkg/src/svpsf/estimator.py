"""Self-supervised fitting of PSF grids from sharp/blurred image pairs.

:class:`PsfGridEstimator` follows the scikit-learn estimator protocol: its
constructor only stores hyperparameters, ``fit`` takes a dataset (a
:class:`~svpsf.optics.Manifest`, a manifest path, or a list of
:class:`~svpsf.optics.Pair`) and sets fitted attributes with a trailing
underscore, and ``predict`` maps ``(ih, theta, depth)`` rows to kernels.
"""

from __future__ import annotations

import logging
import math
import os
from typing import NamedTuple

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import (
    DataError,
    DimensionError,
    DivergenceError,
    ParameterError,
    PolarPos,
    image_center,
    to_polar,
)
from .losses import (
    LossWeights,
    radial_loss_batch,
    recon_loss_batch,
    smooth_loss_batch,
)
from .optics import Manifest, Pair, load_pairs
from .psf_model import (
    CartesianPsfGrid,
    PsfGrid,
    materialize,
    resample_map,
)

log = logging.getLogger(__name__)

MODES = ("ih-polar", "xy-cartesian", "invariant")
CENTER_SAMPLING = ("uniform", "ih-uniform")


class PatchSample(NamedTuple):
    """One unit of supervision: co-centered sharp and blurred patches."""

    sharp: np.ndarray
    blurred: np.ndarray
    pos: PolarPos
    depth: float
    focus_index: int
    center: tuple


def sample_patch(pair, rng, patch_size=64, radius=12, center_sampling="uniform"):
    """Draw a patch pair at a random center.

    The center ``(x, y)`` is an integer pixel with ``m <= x <= W-1-m`` where
    ``m = patch_size // 2 + radius``, so the sharp patch (``P + 2K`` wide)
    fits inside the image. ``"uniform"`` draws it uniformly over that box;
    ``"ih-uniform"`` draws the image height uniformly up to the farthest
    reachable center and the angle uniformly, rejecting centers outside the box.
    """
    h, w = pair.sharp.shape
    m = patch_size // 2 + radius
    if w - 1 - m < m or h - 1 - m < m:
        raise DimensionError(f"image {w}x{h} too small for patch {patch_size} with radius {radius}")
    if center_sampling == "uniform":
        x = int(rng.integers(m, w - m))
        y = int(rng.integers(m, h - m))
    elif center_sampling == "ih-uniform":
        x, y = _ih_uniform_center(rng, w, h, m)
    else:
        raise ParameterError(f"center_sampling must be one of {CENTER_SAMPLING}, got {center_sampling!r}")
    x0 = x - patch_size // 2
    y0 = y - patch_size // 2
    blurred = pair.blurred[y0 : y0 + patch_size, x0 : x0 + patch_size]
    sharp = pair.sharp[y0 - radius : y0 + patch_size + radius, x0 - radius : x0 + patch_size + radius]
    return PatchSample(sharp, blurred, to_polar(x, y, w, h), pair.depth, pair.focus_index, (x, y))


def _ih_uniform_center(rng, w, h, m):
    cx, cy = image_center(w, h)
    a, b = cx - m, cy - m
    r = rng.uniform(0.0, math.hypot(a, b))
    # the circle of radius r meets the center box in four mirrored arcs
    lo = math.acos(min(1.0, a / r)) if r > 0 else 0.0
    hi = math.asin(min(1.0, b / r)) if r > 0 else 0.5 * math.pi
    phi = rng.uniform(lo, max(lo, hi))
    sx, sy = rng.choice((-1.0, 1.0), size=2)
    x = min(max(int(round(cx + sx * r * math.cos(phi))), m), w - 1 - m)
    y = min(max(int(round(cy + sy * r * math.sin(phi))), m), h - 1 - m)
    return x, y


def _resolve_pairs(X, focus_index):
    if isinstance(X, (str, os.PathLike, Manifest)):
        manifest = Manifest.load(X) if not isinstance(X, Manifest) else X
        return load_pairs(manifest, focus_index), manifest.camera
    pairs = [p for p in X if p.focus_index == focus_index]
    if not pairs:
        raise DataError(f"dataset has no pairs for focus index {focus_index}")
    return pairs, None


def _axis_taps(centers, values):
    """Vectorized linear-interpolation taps with clamping: (lo, hi, t)."""
    n = len(centers)
    if n == 1:
        z = np.zeros(len(values), dtype=np.int64)
        return z, z, np.zeros(len(values))
    v = np.clip(values, centers[0], centers[-1])
    lo = np.clip(np.searchsorted(centers, v, side="right") - 1, 0, n - 2)
    t = (v - centers[lo]) / (centers[lo + 1] - centers[lo])
    return lo, lo + 1, t


class _Layout:
    """Maps samples to flat bin indices and weights for one model family."""

    def __init__(self, mode, grid):
        self.mode = mode
        self.grid = grid
        if mode == "xy-cartesian":
            self.axes = [grid.x_centers, grid.y_centers, grid.depth_centers]
        else:
            self.axes = [grid.ih_centers, grid.depth_centers]
        self.shape = tuple(len(a) for a in self.axes)
        self.rotate = mode == "ih-polar"

    def coords(self, samples):
        if self.mode == "xy-cartesian":
            return [
                np.array([s.center[0] for s in samples], float),
                np.array([s.center[1] for s in samples], float),
                np.array([s.depth for s in samples], float),
            ]
        return [np.array([s.pos.ih for s in samples]), np.array([s.depth for s in samples])]

    def taps(self, samples):
        """Flat bin indices (B, T) and weights (B, T), T = 2**n_axes."""
        per_axis = [_axis_taps(c, v) for c, v in zip(self.axes, self.coords(samples))]
        idx = np.zeros((len(samples), 1), dtype=np.int64)
        w = np.ones((len(samples), 1))
        for (lo, hi, t), size in zip(per_axis, self.shape):
            idx = np.concatenate([idx * size + lo[:, None], idx * size + hi[:, None]], axis=1)
            w = np.concatenate([w * (1 - t)[:, None], w * t[:, None]], axis=1)
        return idx, w


def _blend_batch(kernels, w):
    """Weighted sums of bin kernels, renormalized when more than one tap is live."""
    q_raw = np.einsum("bt,btij->bij", w, kernels)
    multi = (w > 0).sum(axis=1) > 1
    total = q_raw.sum(axis=(1, 2))
    scale = np.where(multi, total, 1.0)
    q = q_raw / scale[:, None, None]
    single = ~multi
    if np.any(single):
        # single live tap: return that kernel untouched
        pick = np.argmax(w[single], axis=1)
        q[single] = kernels[single, pick]
    return q, multi, scale


def _rotate_batch(q, thetas):
    side = q.shape[-1]
    idx, w = resample_map(thetas, (side - 1) // 2)
    flat = q.reshape(len(q), -1)
    raw = (flat[np.arange(len(q))[:, None, None], idx] * w).sum(axis=-1)
    total = raw.sum(axis=1)
    return (raw / total[:, None]).reshape(q.shape), (idx, w, total)


def _rotate_backprop_batch(r, grad, cache):
    idx, w, total = cache
    B, side = len(r), r.shape[-1]
    g = grad.reshape(B, -1)
    rr = r.reshape(B, -1)
    g_raw = (g - (g * rr).sum(axis=1, keepdims=True)) / total[:, None]
    offs = (np.arange(B) * side * side)[:, None, None]
    out = np.bincount((idx + offs).ravel(), weights=(w * g_raw[:, :, None]).ravel(), minlength=B * side * side)
    return out.reshape(B, side, side)


def batch_objective(params, layout, samples, weights, with_grad=True):
    """Mean total loss over ``samples`` and its gradient w.r.t. the flat logits.

    ``params`` has shape ``(n_bins, S, S)``. Returns ``(loss, grad, parts)``
    where ``parts`` holds the mean recon/smooth/radial components.
    """
    B = len(samples)
    idx, w = layout.taps(samples)
    used, inverse = np.unique(idx, return_inverse=True)
    bin_k = materialize(params[used])
    kern = bin_k[inverse.reshape(idx.shape)]
    q, multi, scale = _blend_batch(kern, w)
    if layout.rotate:
        thetas = np.array([s.pos.theta for s in samples])
        r, rot_cache = _rotate_batch(q, thetas)
    else:
        r = q
    s = np.stack([smp.sharp for smp in samples])
    b = np.stack([smp.blurred for smp in samples])
    lrec, grec = recon_loss_batch(b, s, r, weights.charbonnier_eps)
    lsm, gsm = smooth_loss_batch(q, weights.charbonnier_eps)
    lrad, grad_rad = radial_loss_batch(q)
    per_sample = lrec + weights.alpha * lsm + weights.beta * lrad
    loss = float(per_sample.mean())
    parts = (float(lrec.mean()), float(lsm.mean()), float(lrad.mean()))
    if not with_grad:
        return loss, None, parts
    g_q = (_rotate_backprop_batch(r, grec, rot_cache) if layout.rotate else grec)
    g_q = (g_q + weights.alpha * gsm + weights.beta * grad_rad) / B
    # undo the renormalization of multi-tap blends
    dot = (g_q * q).sum(axis=(1, 2))
    g_raw = np.where(multi[:, None, None], (g_q - dot[:, None, None]) / scale[:, None, None], g_q)
    g_bins = np.zeros((len(used),) + q.shape[1:])
    contrib = w[:, :, None, None] * g_raw[:, None]
    np.add.at(g_bins, inverse.reshape(idx.shape), contrib)
    g_logits = bin_k * (g_bins - (g_bins * bin_k).sum(axis=(1, 2), keepdims=True))
    grad = np.zeros_like(params)
    grad[used] = g_logits
    return loss, grad, parts


class PsfGridEstimator(BaseEstimator):
    """Fit a spatially variant PSF table for one focus distance.

    Parameters
    ----------
    mode : {"ih-polar", "xy-cartesian", "invariant"}
        ``ih-polar`` bins kernels by image height and rotates them to each
        patch's polar angle. ``xy-cartesian`` bins by pixel position without
        rotation. ``invariant`` keeps one kernel per depth.
    focus_index : int
        Which blurred images of the dataset to fit.
    patch_size, batch_size, steps, lr : training schedule. The learning rate
        follows a cosine decay to zero over ``steps``.
    alpha, beta, charbonnier_eps : loss weights (see :mod:`svpsf.losses`).
    n_ih_bins, n_depth_bins, n_xy_bins : grid resolution.
    radius : kernel radius K.
    depth_range : (min, max) depth of the bins; taken from the manifest's
        camera, else from the training depths, when ``None``.
    center_sampling : {"uniform", "ih-uniform"}
        How patch centers are drawn (see :func:`sample_patch`). Uniform pixel
        sampling rarely reaches the corners; ``ih-uniform`` gives every image
        height the same share of samples.
    random_state : seed for patch sampling.
    """

    def __init__(
        self,
        mode="ih-polar",
        focus_index=0,
        patch_size=64,
        batch_size=16,
        steps=20000,
        lr=0.05,
        alpha=1.0,
        beta=10.0,
        charbonnier_eps=1e-6,
        n_ih_bins=9,
        n_depth_bins=12,
        n_xy_bins=9,
        radius=12,
        depth_range=None,
        center_sampling="uniform",
        random_state=0,
        log_every=500,
    ):
        self.mode = mode
        self.focus_index = focus_index
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.alpha = alpha
        self.beta = beta
        self.charbonnier_eps = charbonnier_eps
        self.n_ih_bins = n_ih_bins
        self.n_depth_bins = n_depth_bins
        self.n_xy_bins = n_xy_bins
        self.radius = radius
        self.depth_range = depth_range
        self.center_sampling = center_sampling
        self.random_state = random_state
        self.log_every = log_every

    def _validate_params(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.patch_size < 2 * self.radius + 1:
            raise ParameterError("patch_size must be at least 2K+1")
        if self.center_sampling not in CENTER_SAMPLING:
            raise ParameterError(f"center_sampling must be one of {CENTER_SAMPLING}, got {self.center_sampling!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ParameterError("steps must be >= 0 and batch_size >= 1")

    def _init_grid(self, pairs, camera):
        if self.depth_range is not None:
            depth_range = tuple(self.depth_range)
        elif camera is not None:
            depth_range = camera.depth_range
        else:
            depths = [p.depth for p in pairs]
            depth_range = (min(depths), max(depths))
        if depth_range[0] == depth_range[1] or self.n_depth_bins == 1:
            n_depth, depth_range = 1, (depth_range[0], depth_range[0])
        else:
            n_depth = self.n_depth_bins
        h, w = pairs[0].sharp.shape
        if self.mode == "xy-cartesian":
            return CartesianPsfGrid.uniform(depth_range, w, h, self.n_xy_bins, n_depth, self.radius, self.focus_index)
        n_ih = 1 if self.mode == "invariant" else self.n_ih_bins
        n_focus = camera.n_focus if camera is not None else self.focus_index + 1
        return PsfGrid.uniform(depth_range, n_ih, n_depth, self.radius, self.focus_index, n_focus)

    def fit(self, X, y=None):
        """Fit on a dataset; ``y`` is ignored (the supervision is self-contained)."""
        self._validate_params()
        pairs, camera = _resolve_pairs(X, self.focus_index)
        grid = self._init_grid(pairs, camera)
        layout = _Layout(self.mode, grid)
        side = 2 * self.radius + 1
        params = np.zeros((int(np.prod(layout.shape)), side, side))
        weights = LossWeights(self.alpha, self.beta, self.charbonnier_eps)
        rng = np.random.default_rng(self.random_state)
        m1 = np.zeros_like(params)
        m2 = np.zeros_like(params)
        b1, b2, adam_eps = 0.9, 0.999, 1e-8
        support = np.zeros(len(params))
        history = np.empty((self.steps, 4))
        for step in range(self.steps):
            samples = [
                sample_patch(pairs[rng.integers(len(pairs))], rng, self.patch_size, self.radius, self.center_sampling)
                for _ in range(self.batch_size)
            ]
            loss, grad, parts = batch_objective(params, layout, samples, weights)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DivergenceError(f"non-finite loss at step {step}", step=step)
            idx, w = layout.taps(samples)
            np.add.at(support, idx.ravel(), w.ravel())
            lr_t = self.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))
            m1 = b1 * m1 + (1 - b1) * grad
            m2 = b2 * m2 + (1 - b2) * grad * grad
            mhat = m1 / (1 - b1 ** (step + 1))
            vhat = m2 / (1 - b2 ** (step + 1))
            params -= lr_t * mhat / (np.sqrt(vhat) + adam_eps)
            history[step] = (loss,) + parts
            if self.log_every and (step % self.log_every == 0 or step == self.steps - 1):
                log.info("step %d loss %.6g recon %.6g smooth %.6g radial %.6g", step, loss, *parts)
        params = _fill_unsupported(params.reshape(layout.shape + (side, side)), support.reshape(layout.shape))
        # parameters live on the float32 lattice so that saved grids reload exactly
        params = params.astype(np.float32).astype(np.float64)
        self.grid_ = grid.with_params(params)
        self.loss_history_ = history
        self.bin_support_ = support.reshape(layout.shape)
        self.n_steps_ = self.steps
        return self

    def kernel_at(self, ih, theta, depth):
        check_is_fitted(self, "grid_")
        return self.grid_.kernel_at(ih, theta, depth)

    def predict(self, X):
        """Kernels for rows ``(ih, theta, depth)``; shape ``(M, 2K+1, 2K+1)``."""
        check_is_fitted(self, "grid_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != 3:
            raise DimensionError("predict expects rows of (ih, theta, depth)")
        return np.stack([self.grid_.kernel_at(*row) for row in X])

    def smoothed_loss(self, span=200):
        """Exponentially smoothed training loss per step."""
        check_is_fitted(self, "loss_history_")
        a = 2.0 / (span + 1)
        out = np.empty(len(self.loss_history_))
        acc = self.loss_history_[0, 0] if len(out) else 0.0
        for i, v in enumerate(self.loss_history_[:, 0]):
            acc = a * v + (1 - a) * acc
            out[i] = acc
        return out

    def training_log(self):
        """Plain-text log: one ``step loss recon smooth radial`` line per step."""
        check_is_fitted(self, "loss_history_")
        lines = ["# step loss recon smooth radial"]
        lines += [f"{i} {r[0]:.9g} {r[1]:.9g} {r[2]:.9g} {r[3]:.9g}" for i, r in enumerate(self.loss_history_)]
        return "\n".join(lines) + "\n"


def _fill_unsupported(params, support, min_fraction=0.01):
    """Copy each starved bin from the nearest well-sampled bin (by index distance).

    A bin is starved when its accumulated interpolation weight is below
    ``min_fraction`` of the mean over bins; such bins barely move from their
    initialization yet still take part in interpolation.
    """
    ok = support > min_fraction * support.mean() if support.any() else support > 0
    if np.all(ok) or not np.any(ok):
        return params
    out = params.copy()
    have = np.argwhere(ok)
    for missing in np.argwhere(~ok):
        dist = ((have - missing) ** 2).sum(axis=1)
        out[tuple(missing)] = params[tuple(have[np.argmin(dist)])]
    return out


def gaussian_kernel(sigma, radius=12):
    """Centered isotropic Gaussian sampled at pixel centers, unit sum."""
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


class GaussianPsfBaseline(BaseEstimator):
    """Spatially invariant Gaussian PSF per training depth.

    For each depth, sigma minimizes the mean reconstruction loss over a fixed
    set of random patches: a grid scan followed by bounded Brent refinement.
    Queries between depths interpolate sigma linearly.
    """

    def __init__(
        self,
        focus_index=0,
        radius=12,
        sigma_range=(0.05, 6.0),
        n_grid=60,
        patch_size=64,
        n_patches=32,
        charbonnier_eps=1e-6,
        random_state=0,
    ):
        self.focus_index = focus_index
        self.radius = radius
        self.sigma_range = sigma_range
        self.n_grid = n_grid
        self.patch_size = patch_size
        self.n_patches = n_patches
        self.charbonnier_eps = charbonnier_eps
        self.random_state = random_state

    is_invariant = True

    def fit(self, X, y=None):
        pairs, _ = _resolve_pairs(X, self.focus_index)
        rng = np.random.default_rng(self.random_state)
        lo, hi = self.sigma_range
        grid = np.linspace(lo, hi, self.n_grid)
        depths = sorted({p.depth for p in pairs})
        sigmas = []
        for d in depths:
            at_d = [p for p in pairs if p.depth == d]
            samples = [sample_patch(at_d[rng.integers(len(at_d))], rng, self.patch_size, self.radius) for _ in range(self.n_patches)]
            s = np.stack([smp.sharp for smp in samples])
            b = np.stack([smp.blurred for smp in samples])
            s_fft = np.fft.rfft2(s)

            def objective(sigma):
                k = np.broadcast_to(gaussian_kernel(sigma, self.radius), (len(b),) + (2 * self.radius + 1,) * 2)
                return float(recon_loss_batch(b, s, k, self.charbonnier_eps, s_fft)[0].mean())

            scan = np.array([objective(v) for v in grid])
            i = int(np.argmin(scan))
            if i == 0:
                best = lo
            else:
                bracket = (grid[i - 1], grid[min(i + 1, len(grid) - 1)])
                res = optimize.minimize_scalar(objective, bounds=bracket, method="bounded", options={"xatol": 1e-4})
                best = float(res.x) if res.fun <= scan[i] else float(grid[i])
            sigmas.append(best)
        self.depths_ = np.array(depths)
        self.sigmas_ = np.array(sigmas)
        return self

    @property
    def depth_range(self):
        check_is_fitted(self, "depths_")
        return float(self.depths_[0]), float(self.depths_[-1])

    def sigma_at(self, depth):
        check_is_fitted(self, "sigmas_")
        return float(np.interp(depth, self.depths_, self.sigmas_))

    def kernel_at(self, ih, theta, depth):
        return gaussian_kernel(self.sigma_at(depth), self.radius)

    def query_psf(self, ih, depth):
        return self.kernel_at(ih, 0.0, depth)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.stack([self.kernel_at(*row) for row in X])
