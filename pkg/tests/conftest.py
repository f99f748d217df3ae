import numpy as np
import pytest

from nv3d import net
from nv3d import tensor as T


def numeric_grad(f, x: np.ndarray, idx=None, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` at the flat indices ``idx`` of ``x``."""
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return net.NetConfig(stages=2, base_channels=2, side=8)


@pytest.fixture
def tiny_params(tiny_cfg):
    return randomize_fusion(net.init_params(tiny_cfg, 3, np.float64), 3)


def randomize_fusion(params, seed):
    """Give biases and fusion convs non-trivial values so every path carries signal."""
    rng = np.random.default_rng(seed)
    out = {}
    for k, p in params.items():
        data = p.data.copy()
        if k.endswith(".b"):
            data = rng.normal(0, 0.05, size=data.shape)
        out[k] = T.parameter(data, k)
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
