"""Spatially variant, rotationally symmetric PSF estimation and depth from defocus."""

from .core import (
    CameraConfig,
    DataError,
    DepthMap,
    DimensionError,
    DivergenceError,
    FormatError,
    ParameterError,
    PolarPos,
    ProtocolError,
    SvpsfError,
    convolve_valid,
    from_polar,
    to_polar,
)
from .dfd import DepthFromDefocus, FocalStack, estimate_depth, pair_cost
from .estimator import GaussianPsfBaseline, PsfGridEstimator
from .evalkit import EvalReport, HoldoutSpec, centroid_drift, depth_mae, eval_psf_grid, psf_mae, render_psf_mosaic
from .losses import LossWeights, radial_loss, recon_loss, smooth_loss, total_loss
from .optics import AberrationModel, Manifest, OracleSource, oracle_psf
from .psf_model import CartesianPsfGrid, PsfGrid, rotate_kernel, rotation_backprop

__version__ = "0.1.0"
