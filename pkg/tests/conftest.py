import numpy as np
import pytest

from taskforge.core import ImageRaster, SegMap, generate_fixture
from taskforge.rng import RngState
from taskforge.task_ops import sample_palette


@pytest.fixture(scope="session")
def fixture_records():
    """Six 3-class records at side 64; shared read-only across tests."""
    return generate_fixture(6, 3, side=64, rng=RngState(11))


@pytest.fixture(scope="session")
def small_records():
    """Records at side 48 so an identity codec with a 12x12 grid gives q=144."""
    return generate_fixture(8, 3, side=48, rng=RngState(23))


@pytest.fixture(scope="session")
def palette3():
    return sample_palette({1, 2, 3}, RngState(5))


@pytest.fixture
def random_image():
    def make(side=32, seed=0):
        gen = np.random.default_rng(seed)
        return ImageRaster(gen.integers(0, 256, (side, side, 3)).astype(np.uint8))
    return make


@pytest.fixture
def random_mask():
    def make(side=32, n_classes=3, seed=0):
        gen = np.random.default_rng(seed)
        return SegMap(gen.integers(0, n_classes + 1, (side, side)).astype(np.uint8))
    return make


def flood_fill_components(binary):
    """Brute-force 8-connected component labeling used as a test oracle."""
    binary = np.asarray(binary, dtype=bool)
    seen = np.zeros_like(binary)
    components = []
    for r in range(binary.shape[0]):
        for c in range(binary.shape[1]):
            if not binary[r, c] or seen[r, c]:
                continue
            stack = [(r, c)]
            seen[r, c] = True
            pixels = []
            while stack:
                y, x = stack.pop()
                pixels.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if (0 <= ny < binary.shape[0] and 0 <= nx < binary.shape[1]
                                and binary[ny, nx] and not seen[ny, nx]):
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            components.append(pixels)
    return components
