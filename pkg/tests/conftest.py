import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from patroldiff.core import RasterImage


def make_texture(height: int, width: int, seed: int, channels: int = 3,
                 smooth: float = 3.0) -> RasterImage:
    """Smooth random texture with plenty of corners for matching tests."""
    rng = np.random.default_rng(seed)
    shape = (height, width, channels) if channels == 3 else (height, width)
    sigma = (smooth, smooth, 0)[: len(shape)]
    raw = gaussian_filter(rng.uniform(0.0, 255.0, shape), sigma)
    lo, hi = raw.min(), raw.max()
    return RasterImage((255.0 * (raw - lo) / (hi - lo)).astype(np.uint8))


@pytest.fixture
def texture():
    return make_texture
