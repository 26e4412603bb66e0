from __future__ import annotations

import numpy as np
import pytest

from dualcomp.grid import FeatureGrid

ACCEPTANCE_LINES: list[str] = []


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def palette_grid(rng: np.random.Generator, h: int, w: int, d: int = 8, colors: int = 3,
                 noise: float = 0.05, attn: bool = True) -> FeatureGrid:
    """Blocky grid: cells copy one of a few base vectors plus noise, so clusters actually merge."""
    base = rng.standard_normal((colors, d))
    # coarse label field so equal colours form patches
    coarse = rng.integers(0, colors, size=((h + 1) // 2, (w + 1) // 2))
    labels = np.kron(coarse, np.ones((2, 2), dtype=int))[:h, :w]
    feats = base[labels] + noise * rng.standard_normal((h, w, d))
    cls = softmax(rng.standard_normal(h * w)).reshape(h, w) if attn else None
    return FeatureGrid(feats, cls_attn=cls)


def random_grid(rng: np.random.Generator, h: int, w: int, d: int = 8) -> FeatureGrid:
    feats = rng.standard_normal((h, w, d))
    return FeatureGrid(feats, cls_attn=softmax(rng.standard_normal(h * w)).reshape(h, w))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def record_acceptance(number: int, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
