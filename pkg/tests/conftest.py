import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from srmoe.moe import ModelConfig, SrMoeModel  # noqa: E402
from srmoe.nn import ConvSpec, StemConfig  # noqa: E402

TINY_STEM = StemConfig(in_channels=1, height=6, width=6, convs=(ConvSpec(2, 3, 1, 1, 2),),
                       pool_out=(2, 2), embed_dim=6)


def tiny_config(mode="spectral", **kw) -> ModelConfig:
    base = dict(mode=mode, n_layers=2, n_experts=3, hidden=5, num_classes=3, stem=TINY_STEM)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["baseline", "clustering", "spectral"])
def mode(request):
    return request.param


@pytest.fixture
def tiny_model(mode):
    return SrMoeModel.init(tiny_config(mode, seed=7))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
