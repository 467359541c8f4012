"""Depth from defocus by exhaustive depth-hypothesis search.

For a patch and a hypothesized depth ``d``, image ``i`` blurred by focus
``j``'s PSF should equal image ``j`` blurred by focus ``i``'s PSF (both then
carry the blur of both foci). The PSFs are queried at the patch's image
height and rotated to its polar angle, so the solver sees the same spatial
variation the PSF grids were fitted with.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import CameraConfig, DepthMap, DimensionError, FormatError, ParameterError, check_image, convolve_valid, to_polar
from .imageio import read_pfm, write_pfm
from .losses import charbonnier

DFD_MODES = ("ih-variant", "invariant")


@dataclass
class FocalStack:
    """Images of one scene at increasing focus distances."""

    images: list
    camera: CameraConfig | None = None

    def __post_init__(self):
        self.images = [check_image(im) for im in self.images]
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise DimensionError(f"stack images differ in size: {sorted(shapes)}")
        if self.camera is not None and len(self.images) != self.camera.n_focus:
            raise DimensionError(f"stack has {len(self.images)} images for {self.camera.n_focus} focus distances")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images[0].shape

    def save(self, directory, depth_gt=None):
        """Write PFM images and ``stack.json``; returns the JSON path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for n, im in enumerate(self.images):
            name = f"stack_f{n:02d}.pfm"
            write_pfm(directory / name, im)
            names.append(name)
        meta = {"images": names}
        if self.camera is not None:
            meta["camera"] = self.camera.to_dict()
        if depth_gt is not None:
            write_pfm(directory / "depth_gt.pfm", depth_gt.depths)
            meta["depth_gt"] = "depth_gt.pfm"
        path = directory / "stack.json"
        path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            meta = json.loads(path.read_text())
            names = meta["images"]
        except (ValueError, KeyError) as exc:
            raise FormatError(f"{path}: malformed stack file: {exc}") from exc
        camera = CameraConfig.from_dict(meta["camera"]) if "camera" in meta else None
        return cls([read_pfm(path.parent / n) for n in names], camera)


def _kernel(source, ih, theta, depth, mode):
    if mode == "invariant":
        return source.kernel_at(0.0, 0.0, depth)
    return source.kernel_at(ih, theta, depth)


def _patch_geometry(center, patch, radius, shape):
    x, y = center
    x0, y0 = x - patch // 2, y - patch // 2
    h, w = shape
    if x0 - radius < 0 or y0 - radius < 0 or x0 + patch + radius > w or y0 + patch + radius > h:
        raise DimensionError(f"patch at {center} with margin {radius} leaves the image")
    return x0, y0


def pair_cost(stack, sources, i, j, center, d_hyp, patch=32, mode="ih-variant", eps=1e-6):
    """Relative-blur mismatch between images ``i`` and ``j`` at one depth hypothesis.

    ``center`` is the integer pixel ``(x, y)``; the patch spans
    ``[x - patch//2, x - patch//2 + patch)`` and likewise in y.
    """
    if i == j:
        raise ParameterError("pair_cost needs two different focus indices")
    images = stack.images if isinstance(stack, FocalStack) else [np.asarray(im, float) for im in stack]
    K = sources[i].radius
    h, w = images[0].shape
    x0, y0 = _patch_geometry(center, patch, K, (h, w))
    cx, cy = x0 + (patch - 1) / 2, y0 + (patch - 1) / 2
    ih, theta = to_polar(cx, cy, w, h)
    p_i = _kernel(sources[i], ih, theta, d_hyp, mode)
    p_j = _kernel(sources[j], ih, theta, d_hyp, mode)
    reg_i = images[i][y0 - K : y0 + patch + K, x0 - K : x0 + patch + K]
    reg_j = images[j][y0 - K : y0 + patch + K, x0 - K : x0 + patch + K]
    diff = convolve_valid(reg_i, p_j) - convolve_valid(reg_j, p_i)
    return float(charbonnier(diff, eps)[0].mean())


def _second_best(costs, best):
    """Smallest cost among candidates not adjacent to ``best``."""
    mask = np.ones(len(costs), bool)
    mask[max(0, best - 1) : best + 2] = False
    rest = costs[mask]
    rest = rest[np.isfinite(rest)]
    return rest.min() if rest.size else np.inf


class DepthFromDefocus(BaseEstimator):
    """Patchwise depth search over a focal stack.

    Parameters
    ----------
    candidates : sequence of float, optional
        Depth hypotheses (m). Defaults to ``n_candidates`` values spread
        uniformly over the PSF sources' common depth range.
    patch_size, stride : patch tiling in pixels.
    mode : {"ih-variant", "invariant"}
        ``invariant`` queries every PSF at the image center, unrotated.
    margin_tau : a patch is invalid when its best cost exceeds ``margin_tau``
        times the best cost among non-adjacent hypotheses.
    """

    def __init__(self, candidates=None, n_candidates=33, patch_size=32, stride=16, mode="ih-variant", margin_tau=0.98, charbonnier_eps=1e-6):
        self.candidates = candidates
        self.n_candidates = n_candidates
        self.patch_size = patch_size
        self.stride = stride
        self.mode = mode
        self.margin_tau = margin_tau
        self.charbonnier_eps = charbonnier_eps

    def fit(self, sources, y=None):
        """Store one PSF source per focus index (fitted grids or any ``kernel_at`` provider)."""
        if self.mode not in DFD_MODES:
            raise ParameterError(f"mode must be one of {DFD_MODES}")
        sources = list(sources)
        if len(sources) < 2:
            raise ParameterError("depth from defocus needs at least two focus distances")
        radii = {s.radius for s in sources}
        if len(radii) != 1:
            raise DimensionError("all PSF sources must share one kernel radius")
        lo = max(s.depth_range[0] for s in sources)
        hi = min(s.depth_range[1] for s in sources)
        if self.candidates is not None:
            cands = np.sort(np.asarray(self.candidates, dtype=np.float64))
            if cands[0] < lo - 1e-12 or cands[-1] > hi + 1e-12:
                raise ParameterError(f"candidates must lie in the PSF depth range [{lo}, {hi}]")
        else:
            cands = np.linspace(lo, hi, self.n_candidates)
        self.sources_ = sources
        self.candidates_ = cands
        self.radius_ = radii.pop()
        return self

    def patch_origins(self, shape):
        h, w = shape
        K, P = self.radius_, self.patch_size
        xs = np.arange(K, w - K - P + 1, self.stride)
        ys = np.arange(K, h - K - P + 1, self.stride)
        if xs.size == 0 or ys.size == 0:
            raise DimensionError(f"image {w}x{h} too small for patch {P} with margin {K}")
        return [(int(x0), int(y0)) for y0 in ys for x0 in xs]

    def cost_curve(self, images, x0, y0):
        """Summed pair costs for every candidate at the patch with top-left ``(x0, y0)``."""
        K, P = self.radius_, self.patch_size
        h, w = images[0].shape
        n = len(images)
        side = 2 * K + 1
        size = P + 2 * K
        ih, theta = to_polar(x0 + (P - 1) / 2, y0 + (P - 1) / 2, w, h)
        regions = np.stack([im[y0 - K : y0 + P + K, x0 - K : x0 + P + K] for im in images])
        F = np.fft.rfft2(regions)
        kern = np.empty((n, len(self.candidates_), side, side))
        for f, src in enumerate(self.sources_):
            for c, d in enumerate(self.candidates_):
                kern[f, c] = _kernel(src, ih, theta, d, self.mode)
        Kf = np.fft.rfft2(kern, s=(size, size))
        total = np.zeros(len(self.candidates_))
        for i, j in combinations(range(n), 2):
            spec = F[i][None] * Kf[j] - F[j][None] * Kf[i]
            diff = np.fft.irfft2(spec, s=(size, size))[:, 2 * K :, 2 * K :]
            total += charbonnier(diff, self.charbonnier_eps)[0].reshape(len(diff), -1).mean(axis=1)
        return total

    def predict(self, stack):
        """Depth map for ``stack`` (a :class:`FocalStack` or a list of images)."""
        check_is_fitted(self, "sources_")
        images = stack.images if isinstance(stack, FocalStack) else [check_image(im) for im in stack]
        if len(images) != len(self.sources_):
            raise DimensionError(f"stack has {len(images)} images but {len(self.sources_)} PSF sources")
        shape = images[0].shape
        P = self.patch_size
        acc = np.zeros(shape)
        cnt = np.zeros(shape)
        patches = []
        for x0, y0 in self.patch_origins(shape):
            costs = self.cost_curve(images, x0, y0)
            finite = np.isfinite(costs)
            if not finite.any():
                patches.append((x0, y0, np.nan, False))
                continue
            best = int(np.argmin(np.where(finite, costs, np.inf)))
            second = _second_best(costs, best)
            valid = bool(costs[best] <= self.margin_tau * second)
            depth = float(self.candidates_[best])
            patches.append((x0, y0, depth, valid))
            if valid:
                acc[y0 : y0 + P, x0 : x0 + P] += depth
                cnt[y0 : y0 + P, x0 : x0 + P] += 1
        self.patches_ = patches
        depths = np.divide(acc, cnt, out=np.zeros(shape), where=cnt > 0)
        return DepthMap(depths, cnt > 0, (float(self.candidates_[0]), float(self.candidates_[-1])))


def estimate_depth(stack, sources, **params):
    """Functional wrapper: ``DepthFromDefocus(**params).fit(sources).predict(stack)``."""
    return DepthFromDefocus(**params).fit(sources).predict(stack)


def save_depth(depth_map, prefix):
    """Write ``<prefix>.pfm`` (invalid = 0), ``<prefix>_vis.pgm`` and ``<prefix>_mask.pgm``."""
    from .imageio import write_pgm

    prefix = Path(prefix)
    d = np.where(depth_map.valid, depth_map.depths, 0.0)
    write_pfm(prefix.with_suffix(".pfm"), d)
    lo, hi = depth_map.valid_range
    vis = np.where(depth_map.valid, (depth_map.depths - lo) / max(hi - lo, 1e-12), 0.0)
    write_pgm(prefix.parent / (prefix.name + "_vis.pgm"), vis)
    write_pgm(prefix.parent / (prefix.name + "_mask.pgm"), depth_map.valid.astype(float))
    return prefix.with_suffix(".pfm")
