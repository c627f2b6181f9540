import sys, pathlib
sys.path.insert(0, str(pathlib.Path(__file__).parent))

import numpy as np
import pytest

from syncanim.audiofront import FeatureTapConfig
from syncanim.denoiser import ModelConfig, build_model
from syncanim.windowcond import WindowSpec


def tiny_config(**changes) -> ModelConfig:
    base = dict(n_blocks=1, d_model=16, n_heads=2, audio_heads=2, audio_width=8,
                taps=(FeatureTapConfig("semantic", (11,)),), window=WindowSpec(1.5))
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    model, _ = build_model(tiny_config(), seed=3)
    return model


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def accept():
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""
    def record(number: int, title: str, ok: bool, detail: str, elapsed: float, limit: float):
        ok = bool(ok) and elapsed < limit
        line = (f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} "
                f"[{elapsed:.1f} s, limit {limit:.0f} s]")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
