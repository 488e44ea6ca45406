import numpy as np
import pytest

from tripletforge.images import ImageBuffer, MemoryStore, synthetic_photo


@pytest.fixture(scope="session")
def photo() -> ImageBuffer:
    """The bundled deterministic test image."""
    return synthetic_photo()


@pytest.fixture(scope="session")
def small_photo() -> ImageBuffer:
    return synthetic_photo(96, 72)


@pytest.fixture()
def store() -> MemoryStore:
    return MemoryStore()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
