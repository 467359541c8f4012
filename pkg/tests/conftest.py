import numpy as np
import pytest

from svpsf.core import CameraConfig
from svpsf.optics import AberrationModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_camera():
    """A 96x96 aberrated three-focus camera; blur stays well inside K=12."""
    return CameraConfig(
        focal_length=0.012,
        f1=22.0,
        f2=2.8,
        focus_distances=(0.5, 0.72, 1.415),
        pixel_pitch=8e-6,
        image_width=96,
        image_height=96,
        depth_range=(0.5, 1.415),
    )


@pytest.fixture(scope="session")
def aberration():
    return AberrationModel()


def random_kernel(rng, radius=12):
    k = rng.random((2 * radius + 1, 2 * radius + 1))
    return k / k.sum()
