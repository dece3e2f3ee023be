import sys

import numpy as np
import pytest

from kvprune.harness import RunConfig
from kvprune.model import ModelConfig, build_model


@pytest.fixture(scope="session")
def model():
    """The default 8-layer toy model."""
    return build_model(ModelConfig())


@pytest.fixture(scope="session")
def small_model():
    return build_model(ModelConfig(n_layers=2, n_q_heads=4, n_kv_heads=2, head_dim=16,
                                   vocab_size=64, max_seq=128, rotary_dim=8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def quick_cfg(tmp_path):
    return RunConfig(n_prompts=2, prompt_len=64, decode_steps=4, out_dir=str(tmp_path / "runs"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
