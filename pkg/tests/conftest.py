import numpy as np
import pytest

from etusb.encoder import Batch, ModelConfig, init_params
from etusb.numerics import make_rng


def random_batch(config: ModelConfig, rng: np.random.Generator, n: int, *, min_len: int = 1,
                 labels: bool = True) -> Batch:
    """Random right-padded batch with lengths in ``[min_len, l_max]``."""
    l = config.l_max
    lengths = rng.integers(min_len, l + 1, size=n)
    mask = np.arange(l)[None, :] < lengths[:, None]
    tok = np.where(mask, rng.integers(2, config.vocab_size, size=(n, l)), 0)
    pos = np.where(mask, np.arange(l)[None, :], 0)
    nonseq = rng.normal(size=(n, config.n_features))
    y = rng.integers(0, config.n_classes, size=n) if labels else None
    return Batch(tok, pos, mask, nonseq, y)


# the configuration of the gradient oracle: V=10, d=8, h=2, d_ff=16, l_max=5, L=3
TINY = ModelConfig(vocab_size=10, n_features=4, d=8, heads=2, blocks=1, d_ff=16, l_max=5,
                   n_classes=3, dropout_rate=0.0, tower_dims=(6, 5))


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_params(tiny_config):
    p = init_params(tiny_config, make_rng(11))
    # nonzero biases and gains so their gradients are exercised too
    rng = make_rng(12)
    for k, v in p.items():
        if v.ndim == 1:
            p[k] = v + 0.1 * rng.normal(size=v.shape)
    return p


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
