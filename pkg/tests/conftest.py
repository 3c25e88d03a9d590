import numpy as np
import pytest

from facepuppet.synthetic import DRIVER_IDENTITY, PUPPET_IDENTITY, FaceModel


@pytest.fixture(scope="session")
def driver_model():
    return FaceModel(64, 80, DRIVER_IDENTITY)


@pytest.fixture(scope="session")
def puppet_model():
    return FaceModel(64, 80, PUPPET_IDENTITY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pink_noise(h, w, rng, exponent=1.0, channels=None):
    """Random texture with a 1/f^exponent amplitude spectrum, scaled to [0.1, 0.9]."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = 1.0
    shape = (h, w) if channels is None else (h, w, channels)
    spectrum = np.fft.fft2(rng.normal(size=shape), axes=(0, 1))
    amp = f ** -exponent
    amp[0, 0] = 0.0
    if channels is not None:
        amp = amp[..., None]
    img = np.real(np.fft.ifft2(spectrum * amp, axes=(0, 1)))
    img = (img - img.min()) / (img.max() - img.min())
    return 0.1 + 0.8 * img
