import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mamba_xai.model import init_weights, model_forward  # noqa: E402
from mamba_xai.tensor_io import ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, scale=0.5, tokens=6, **cfg_kw):
    kw = dict(num_layers=2, channels=4, state_size=2, conv_kernel=4,
              cls_position="last", num_classes=2)
    kw.update(cfg_kw)
    cfg = ModelConfig(**kw)
    w = init_weights(cfg, seed, scale=scale)
    x = np.random.default_rng(seed + 100).normal(size=(tokens, cfg.channels))
    return cfg, w, x, model_forward(x, cfg, w)


@pytest.fixture
def tiny():
    return tiny_model()


# filled by test_acceptance.py, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
