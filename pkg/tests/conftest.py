import numpy as np
import pytest

from metasel import data, nn


def random_net(rng, sizes=None, activation="relu"):
    if sizes is None:
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(2, 7)) for _ in range(depth + 1)]
        sizes[-1] = max(sizes[-1], 2)
    p = nn.init_params(sizes, activation, seed=int(rng.integers(2 ** 31)))
    # nonzero biases so every parameter is exercised
    p.biases = [0.1 * rng.standard_normal(b.shape) for b in p.biases]
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    return data.gen_gaussian_mixture(seed=0)


@pytest.fixture
def idx_fixture(tmp_path):
    """Four 28x28 images with known pixel values."""
    images = np.zeros((4, 28, 28), dtype=np.uint8)
    for k in range(4):
        images[k, k, :] = 255
        images[k, 27 - k, k] = 128
    labels = np.array([3, 1, 4, 1], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    data.write_idx(images, labels, ip, lp)
    return ip, lp, images, labels


# acceptance reporting ------------------------------------------------------------

ACCEPTANCE = {}


def record(number, passed, detail):
    """Store one acceptance line; printed in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
