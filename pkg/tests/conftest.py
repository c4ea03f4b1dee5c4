import math
import sys

import numpy as np
import pytest
import torch

from bidistereo.data import SynthSpec, generate_synthetic_pair


def warp_oracle_residual(left, right, disp, mask):
    """Mean |left(x,y) - right(x - d, y)| over mask, via explicit per-pixel linear interpolation."""
    h, w = disp.shape
    total, count = 0.0, 0
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            u = x - float(disp[y, x])
            u0 = int(math.floor(u))
            t = u - u0
            u1 = min(u0 + 1, w - 1)
            for c in range(left.shape[2]):
                rec = (1 - t) * float(right[y, u0, c]) + t * float(right[y, u1, c])
                total += abs(float(left[y, x, c]) - rec)
                count += 1
    return total / max(count, 1)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def synth_sample():
    return generate_synthetic_pair(SynthSpec(seed=7, height=64, width=128, s_max=32, n_blobs=3))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
