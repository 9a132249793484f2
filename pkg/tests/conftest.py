from __future__ import annotations

import numpy as np
import pytest

from cinelora.data import build_manifest, generate_corpus
from cinelora.model import ModelConfig, VideoDiT

TINY = dict(d_model=16, n_heads=2, encoder_blocks=2, decoder_blocks=2, mlp_ratio=2,
            lora_encoder_range=(0, 1), lora_decoder_range=(0, 1))


def tiny_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


@pytest.fixture
def tiny_model() -> VideoDiT:
    return VideoDiT(tiny_config())


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Eight short styled clips (7 train / 1 validation)."""
    root = tmp_path_factory.mktemp("small_corpus")
    generate_corpus(root / "clips", n_clips=8, seed=3, min_frames=34, max_frames=40)
    return build_manifest(root / "clips", 0.1, seed=3, out_path=root / "manifest.json")


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f at x (float64)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
