import numpy as np
import pytest
import torch

from diptych_edit.config import ModelConfig
from diptych_edit.core.dit import DiT


def tiny_config(**kw) -> ModelConfig:
    base = dict(dim=16, depth=1, heads=2, mlp_ratio=2, max_text_len=6, image_size=(8, 8), patch_size=4,
                rope_axes=(2, 2, 4), time_freqs=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float64, **kw) -> DiT:
    torch.manual_seed(seed)
    return DiT(tiny_config(**kw)).to(dtype)


def randomize(model, seed=0, scale=0.3):
    """Give every parameter (adapters included) non-trivial random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
