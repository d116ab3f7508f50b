import numpy as np
import pytest

from editaware.imagecore import ImageMeta
from editaware.isp import EditISP
from editaware.mlp import MlpWeights


def random_isp(k=4, seed=0, color_hidden=(16, 16), tone_hidden=(8,)):
    """ISP with random (unfitted) MLPs: cheap and good enough for plumbing tests."""
    rng = np.random.default_rng(seed)
    colors = [MlpWeights.init(3, color_hidden, 3, rng) for _ in range(k)]
    return EditISP(colors, MlpWeights.init(1, tone_hidden, 1, rng))


def identity_isp(k=3):
    return EditISP([MlpWeights.identity(3) for _ in range(k)], MlpWeights.identity(1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_isp():
    return random_isp()


@pytest.fixture
def identity_meta():
    return ImageMeta(asn=(1.0, 1.0))


@pytest.fixture
def random_meta(rng):
    return ImageMeta(
        asn=tuple(rng.uniform(0.6, 1.6, 2)),
        cst_a=np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3)),
        cst_b=np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3)),
    )


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
