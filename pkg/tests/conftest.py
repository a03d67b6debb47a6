import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from metaface import corpus as C  # noqa: E402
from metaface.model import ModelConfig  # noqa: E402

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE = []


def record(criterion, ok, detail):
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append((criterion, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE, key=lambda x: x[0]):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_corpus():
    return C.build_corpus(C.default_manifest())


@pytest.fixture
def small_config():
    return ModelConfig(feature_dim=4, hidden_dim=6, num_layers=2, vertex_count=5, lip_start=0, lip_stop=2,
                       latent_dim=3, lora_rank=2, encoder_hidden=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
