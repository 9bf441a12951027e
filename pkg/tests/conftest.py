import numpy as np
import pytest

from shgreg.contrastive import TinyEncoder


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def untrained_encoder():
    return TinyEncoder.init(seed=0)


def naive_bilinear(img, x, y):
    """Scalar bilinear lookup with zero outside; img is (H, W)."""
    h, w = img.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    total = 0.0
    for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if 0 <= xx < w and 0 <= yy < h:
                total += wx * wy * img[yy, xx]
    return total


@pytest.fixture(scope="session")
def trained_encoder():
    """Encoder trained for 200 steps on four dense registered synthetic pairs."""
    from shgreg.contrastive import BnceConfig, train_encoder
    from shgreg.synth import SynthConfig, generate_pair, registered_pair

    pairs = [registered_pair(generate_pair(SynthConfig(seed=100 + i, foreground_density=0.3)))
             for i in range(4)]
    return train_encoder(pairs, BnceConfig(steps=200, learning_rate=0.01))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for mod in list(__import__("sys").modules.values()):
        lines.extend(getattr(mod, "ACCEPTANCE_LINES", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
