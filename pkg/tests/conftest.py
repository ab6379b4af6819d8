import numpy as np
import pytest

from flickerlab.video import VideoClip


def textured_frame(h=32, w=32, seed=0):
    """Smooth random texture in [0.1, 0.9] so block matching has a unique answer."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    out = np.zeros((h, w, 3))
    for c in range(3):
        for _ in range(4):
            fy, fx = rng.uniform(0.2, 0.9, size=2)
            out[..., c] += np.sin(fy * yy + fx * xx + rng.uniform(0, 6.3))
    out -= out.min()
    return 0.1 + 0.8 * out / out.max()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_clip():
    frames = np.stack([textured_frame(32, 32, seed=t % 3) for t in range(12)])
    return VideoClip(frames)
