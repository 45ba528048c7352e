import numpy as np
import pytest

from catchup.model import NoiseEncoder, VelocityNet


def small_net(dim=2, n_heads=1, c_skip=0.75, seed=0, zero_heads=False):
    return VelocityNet(dim, width=8, n_blocks=2, temb_dim=6, n_heads=n_heads, c_skip=c_skip,
                       rng=np.random.default_rng(seed), zero_heads=zero_heads)


def perturbed_encoder(dim=2, seed=0, scale=0.3):
    """Encoder with non-zero output layers, so it differs from the prior."""
    rng = np.random.default_rng(seed)
    enc = NoiseEncoder(dim, width=6, rng=rng)
    for p in enc.parameters():
        p.data[...] += scale * rng.standard_normal(p.shape)
    return enc


class ConstantField:
    def __init__(self, v, dim=2, epsilon=1e-5):
        self.v = np.asarray(v, dtype=np.float64)
        self.dim = dim
        self.epsilon = epsilon

    def velocity(self, x, t):
        return np.broadcast_to(self.v, x.shape).copy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report one line each; collected here and echoed at the end
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
