import sys

import numpy as np
import pytest

from kdf import nn
from kdf.tensor import Tensor, check_gradients, kink_probe, mul
from kdf.tensor import sum as tsum

# Inputs closer than this to a ReLU zero or a max-pool tie are redrawn: a
# finite-difference step straddling a kink measures the kink, not the gradient.
KINK_MARGIN = 5e-3
GRAD_RTOL = 1e-4


def gradcheck_block(make, x_shape, seed, train=True, max_redraws=200):
    """Worst relative error of a block's input and parameter gradients at one seed.

    The loss is sum(block(x) * R) with a fixed random R, so every output
    element contributes a distinct weight.
    """
    for k in range(max_redraws):
        rng = np.random.default_rng([seed, k])
        block = make()
        nn.kaiming_init(block, rng)
        block.astype(np.float64)
        block.train(train)
        # non-zero biases and BN shifts so those gradients are actually exercised
        for p in block.parameters():
            if p.data.ndim == 1:
                p.data = p.data + rng.normal(scale=0.1, size=p.shape)
        x = Tensor(rng.normal(size=x_shape), requires_grad=True, dtype=np.float64)
        with kink_probe() as kinks:
            out = block(x)
        if min(kinks, default=1.0) >= KINK_MARGIN:
            break
    else:
        raise AssertionError(f"no kink-free sample in {max_redraws} draws")
    r = Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return check_gradients(lambda: tsum(mul(block(x), r)), [x] + block.parameters())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
