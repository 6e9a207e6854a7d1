import numpy as np
import pytest
from hypothesis import settings

from aqfusion import tensor as T
from aqfusion.model import ModelConfig

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def high():
    with T.precision("high"):
        yield


@pytest.fixture
def tiny_config():
    """Smallest network that still exercises every layer kind."""
    return ModelConfig(image_size=16, base_width=2, embed_dim=4, fusion_dim=3, proj_hidden=5, dropout_rate=0.3)


@pytest.fixture
def nprng():
    return np.random.default_rng(0)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
