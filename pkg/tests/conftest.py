import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from escmisr.config import FusionConfig, ModelConfig

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest sensible model: 8x8 windows, 4 channels, one fusion block."""
    fusion = overrides.pop("fusion", None) or FusionConfig(n_blocks=1, n=4, heads=1)
    base = dict(k=3, size=8, embed_dim=4, channels=4, cmt_heads=1, fusion=fusion)
    base.update(overrides)
    return ModelConfig(**base)


# acceptance criteria report lines, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
