import numpy as np
import pytest

from revkd.data import load_grammar
from revkd.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=7, max_seq_len=6, d_model=4, n_heads=2, n_layers=1, ffn_multiplier=2, seed=3)


@pytest.fixture(scope="session")
def grammar():
    return load_grammar()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
