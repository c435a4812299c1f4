import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ctcprompt.layers import LayerConfig  # noqa: E402
from ctcprompt.model import CtcPromptASR, ModelConfig  # noqa: E402
from ctcprompt.decoder import DecoderOnlyModel  # noqa: E402

TINY = dict(feat_dim=6, subsample=2, model_dim=8, heads=2, ff_dim=16, encoder_blocks=1,
            decoder_blocks=1, conv_kernel=3, lm_blocks=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return CtcPromptASR(3, tiny_config)


@pytest.fixture
def tiny_decoder():
    return DecoderOnlyModel(3, LayerConfig(8, 2, 16, 2), np.random.default_rng(5), prompt_dim=8)


# PASS/FAIL lines from the acceptance module, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
