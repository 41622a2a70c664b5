import numpy as np
import pytest

from anchorsim.policy import LateFusionNet, policy_arch, reference_arch
from anchorsim.synthetic import generate_suite
from anchorsim.tokenizer import expert_segments, fit_kdisk_to_size


@pytest.fixture(scope="session")
def suite():
    return generate_suite(6, 0, n_agents=(3, 5))


@pytest.fixture(scope="session")
def vocab(suite):
    return fit_kdisk_to_size(expert_segments(suite), 24, 0)


@pytest.fixture(scope="session")
def small_policy(vocab):
    return LateFusionNet(policy_arch(vocab.K, embed=16, hidden=24), seed=1)


@pytest.fixture(scope="session")
def small_reference(vocab):
    return LateFusionNet(reference_arch(vocab.K, embed=16, hidden=32), seed=2)


def rigid(x, y, h, tx, ty, rot):
    c, s = np.cos(rot), np.sin(rot)
    return c * x - s * y + tx, s * x + c * y + ty, h + rot


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
