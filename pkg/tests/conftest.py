import numpy as np
import pytest

from emotrack.config import ModelConfig
from emotrack.gradcheck import TINY
from emotrack.model import Example, make_batch
from emotrack.rng import stream


def tiny_model_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


def random_examples(cfg: ModelConfig, seed=0, n=4, with_prev=True, first_index=1):
    """Ragged sessions; every example after the first has a previous session."""
    rng = stream(seed, "tests/examples")
    out = []
    for i in range(n):
        k = 1 + (i * 2) % cfg.N_max
        prev = None
        if with_prev and i > 0:
            prev = rng.normal(size=(1 + i % 3, cfg.d_e))
        labels = rng.uniform(0, 3, size=cfg.J)
        out.append(Example(f"r{i}", first_index + int(prev is not None), rng.normal(size=cfg.F),
                           rng.normal(size=(k, cfg.d_e)), prev, labels, float(labels.sum()), labels))
    return out


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_examples(tiny_cfg):
    return random_examples(tiny_cfg)


@pytest.fixture
def tiny_batch(tiny_examples):
    return make_batch(tiny_examples)


def assert_bitwise(a, b):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    assert a.tobytes() == b.tobytes()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
