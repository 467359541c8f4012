"""Evaluation metrics, the held-out PSF protocol, and PSF mosaics."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DataError,
    DimensionError,
    ParameterError,
    ProtocolError,
    kernel_centroid,
    to_polar,
)


def psf_mae(est, gt):
    """Mean absolute difference of two kernels after scaling both to unit sum."""
    a = np.asarray(est, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"kernel shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a / a.sum() - b / b.sum()).mean())


@dataclass(frozen=True)
class HoldoutSpec:
    """Test positions: an ``n_side`` x ``n_side`` pixel lattice at each of ``depths``."""

    depths: tuple
    width: int
    height: int
    n_side: int = 8

    def positions(self):
        return holdout_positions(self.width, self.height, self.n_side)

    def tuples(self):
        return [(ih, th, float(d)) for d in self.depths for ih, th in self.positions()]


def holdout_positions(width, height, n_side=8):
    """``(ih, theta)`` of cell centers of an ``n_side`` x ``n_side`` split of the image."""
    xs = (np.arange(n_side) + 0.5) * width / n_side - 0.5
    ys = (np.arange(n_side) + 0.5) * height / n_side - 0.5
    out = []
    for y in ys:
        for x in xs:
            pos = to_polar(x, y, width, height)
            out.append((pos.ih, pos.theta))
    return out


@dataclass
class EvalReport:
    records: list
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.records:
            raise DataError("an evaluation report needs at least one record")

    @property
    def aggregate(self):
        return float(np.mean([r["mae"] for r in self.records]))

    def to_dict(self):
        return {
            "aggregate_mae": self.aggregate,
            "config": self.config,
            "provenance": self.provenance,
            "records": self.records,
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text):
        data = json.loads(text)
        return cls(data["records"], data.get("config", {}), data.get("provenance", {}))

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text())


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_holdout(holdout_depths, training_depths, tol=1e-9):
    """Raise :class:`ProtocolError` if a holdout depth was used for training."""
    train = np.asarray(sorted(training_depths), dtype=np.float64)
    for d in holdout_depths:
        if train.size and np.min(np.abs(train - d)) <= tol:
            raise ProtocolError(f"holdout depth {d} m appears in the training set")


def eval_psf_grid(source, oracle, holdout, training_depths=(), config=None, provenance=None):
    """Per-sample PSF MAE of ``source`` against ``oracle`` on ``holdout``.

    ``source`` and ``oracle`` expose ``kernel_at(ih, theta, depth)``; kernels
    are compared at the sample's true orientation, so polar, Cartesian and
    invariant fits are judged on the same footing.
    """
    check_holdout(holdout.depths, training_depths)
    lo, hi = getattr(source, "depth_range", (-np.inf, np.inf))
    for d in holdout.depths:
        if not lo - 1e-12 <= d <= hi + 1e-12:
            raise ParameterError(f"holdout depth {d} outside the fitted range [{lo}, {hi}]")
    focus = getattr(oracle, "focus_index", None)
    records = []
    for ih, theta, d in holdout.tuples():
        est = source.kernel_at(ih, theta, d)
        gt = oracle.kernel_at(ih, theta, d)
        records.append({"ih": ih, "theta": theta, "depth": d, "focus_index": focus, "mae": psf_mae(est, gt)})
    cfg = {"holdout": asdict(holdout)}
    cfg["holdout"]["depths"] = list(holdout.depths)
    cfg.update(config or {})
    return EvalReport(records, cfg, dict(provenance or {}))


def depth_mae(est, gt):
    """Mean absolute depth error over pixels valid in both maps, and the valid fraction."""
    if est.depths.shape != gt.depths.shape:
        raise DimensionError(f"depth maps differ in size: {est.depths.shape} vs {gt.depths.shape}")
    mask = est.valid & gt.valid
    if not mask.any():
        raise DataError("no valid pixels to evaluate")
    return float(np.abs(est.depths - gt.depths)[mask].mean()), float(mask.mean())


def radial_centroid(kernel, theta=0.0):
    """Centroid offset along the radial direction of polar angle ``theta``.

    Kernel rows point down while ``theta`` is measured with y up.
    """
    dx, dy = kernel_centroid(kernel)
    return dx * math.cos(theta) - dy * math.sin(theta)


def centroid_drift(grids, ih_values, depth, theta=0.0):
    """Radial centroid offsets (pixels), one row per grid and one column per image height.

    Each offset is measured on the kernel as applied at polar angle ``theta``.
    In a square frame, image heights above ``1/sqrt(2)`` occur only near the
    diagonals, where kernel corners rotate out of the frame. Bins fitted there
    never see their corner pixels, so pass ``theta=pi/4`` to measure them where
    they are used.
    """
    return np.array([[radial_centroid(g.kernel_at(ih, theta, depth), theta) for ih in ih_values] for g in grids])


def render_psf_mosaic(source, ih_values, depths, theta=0.0, separator=0.5):
    """Kernels tiled with ``ih`` along columns and ``depth`` along rows.

    Each tile is scaled to a maximum of 1; tiles are separated by 1-px lines
    of value ``separator``.
    """
    ih_values, depths = list(ih_values), list(depths)
    if not ih_values or not depths:
        raise ParameterError("mosaic needs at least one image height and one depth")
    side = 2 * source.radius + 1
    step = side + 1
    out = np.full((len(depths) * step - 1, len(ih_values) * step - 1), float(separator))
    for r, d in enumerate(depths):
        for c, ih in enumerate(ih_values):
            k = source.kernel_at(ih, theta, d)
            out[r * step : r * step + side, c * step : c * step + side] = k / k.max()
    return out
