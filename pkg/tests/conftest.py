import numpy as np
import pytest
from scipy import ndimage


def textured(h, w, seed=0, sigma=4.0, contrast=4.0):
    """Smooth random RGB texture, uint8."""
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((h, w, 3)), (sigma, sigma, 0))
    img = (img - img.mean()) * contrast * 255 + 128
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@pytest.fixture
def texture():
    return textured


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
