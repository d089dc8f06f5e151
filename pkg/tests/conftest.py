import pytest
import torch

from lynx import ModelConfig


@pytest.fixture(autouse=True)
def _float64_default():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def small_cfg():
    """Dims <= 32 so finite differences stay cheap; head_dim 16 gives bands (8, 4, 4)."""
    return ModelConfig(hidden_dim=32, num_blocks=2, num_heads=2, text_dim=16, mlp_ratio=2,
                       freq_dim=16, face_dim=16, n_id=4, n_reg=4, face_ctx_tokens=2,
                       resampler_depth=2, resampler_heads=2)


@pytest.fixture
def desk_cfg():
    return ModelConfig()


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
