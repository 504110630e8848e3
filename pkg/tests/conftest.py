import numpy as np
import pytest

from repdistill.dynamic import DynamicRepConv
from repdistill.nn import BatchNorm2d

# filled by the acceptance tests, echoed at the end of the run
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Nested-loop cross-correlation used as the reference everywhere."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    d, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, d, ho, wo))
    dg = d // groups
    for bi in range(n):
        for o in range(d):
            g = o // dg
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, g * cg:(g + 1) * cg, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, o, i, j] = np.sum(patch * w[o])
            if b is not None:
                out[bi, o] += b[o]
    return out


def randomize_bn(module, rng):
    """Give every batch norm non-trivial affine parameters and running statistics."""
    for _, m in module.named_modules():
        if isinstance(m, BatchNorm2d):
            c = m.channels
            m.weight.data = rng.uniform(0.5, 1.5, c).astype(m.weight.dtype)
            m.bias.data = rng.normal(0, 0.2, c).astype(m.bias.dtype)
            m.running_mean = rng.normal(0, 0.2, c).astype(np.float32)
            m.running_var = rng.uniform(0.5, 1.5, c).astype(np.float32)


def randomize_generators(module, rng, scale=0.3):
    """Move dynamic generators away from their neutral zero initialization."""
    for _, m in module.named_modules():
        if isinstance(m, DynamicRepConv) and m.latent:
            for head in (m.lam_head, m.phi_head):
                head.weight.data = rng.normal(0, scale, head.weight.shape).astype(np.float32)
                head.bias.data = rng.normal(0, scale, head.bias.shape).astype(np.float32)
