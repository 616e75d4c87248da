import numpy as np
import pytest

from noisecine import (
    ImageField,
    LatentField,
    MockBackend,
    MockConfig,
    SeededNoiseSpec,
    sample_noise,
)


def random_latent(seed: int, shape=(4, 8, 8)) -> LatentField:
    return sample_noise(SeededNoiseSpec(seed, shape))


def random_image(seed: int, hw=(64, 64)) -> ImageField:
    rng = np.random.Generator(np.random.PCG64(seed))
    return ImageField(rng.uniform(0, 255, size=(*hw, 3)).astype(np.float32))


def block_image(seed: int, latent_hw=(8, 8), scale: int = 8, lo: int = 40, hi: int = 215) -> ImageField:
    """Random image that is constant on each scale x scale block (integer
    values), so mock encode/decode round trips are exact."""
    rng = np.random.Generator(np.random.PCG64(seed))
    coarse = rng.integers(lo, hi, size=(*latent_hw, 3)).astype(np.float32)
    return ImageField(np.repeat(np.repeat(coarse, scale, axis=0), scale, axis=1))


def make_mock(latent_hw=(8, 8), steps: int = 10, mix: float = 0.12) -> MockBackend:
    return MockBackend(MockConfig(latent_shape=(4, *latent_hw), total_steps=steps, mix=mix))


@pytest.fixture
def mock_backend() -> MockBackend:
    return make_mock()
