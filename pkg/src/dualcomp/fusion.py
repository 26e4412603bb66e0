"""Lambda-weighted stream fusion and the final sequence ordering."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from dualcomp.grid import InvalidInputError
from dualcomp.igsr import TracedPaths
from dualcomp.scsa import SemanticToken

SEMANTIC, GEOMETRIC, FULL = "semantic", "geometric", "full"
UNROLL_MODES = ("topological", "index_reorder")


@dataclass(frozen=True)
class FusedToken:
    vector: np.ndarray
    stream: str
    weight: float
    cell: tuple[int, int] | None = None  # None for cluster summaries
    cluster: int | None = None
    importance: float = 0.0


@dataclass
class CompressedSequence:
    tokens: list[FusedToken]
    lam: float
    rho: float
    n_max: int
    width: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tokens)

    def stream(self, name: str) -> list[FusedToken]:
        return [t for t in self.tokens if t.stream == name]

    def cells(self, *streams: str) -> list[tuple[int, int]]:
        want = streams or (SEMANTIC, GEOMETRIC, FULL)
        return [t.cell for t in self.tokens if t.cell is not None and t.stream in want]

    def matrix(self) -> np.ndarray:
        if not self.tokens:
            return np.zeros((0, 0))
        return np.stack([t.vector for t in self.tokens])


def fuse(
    sem: list[SemanticToken],
    geo: TracedPaths,
    lam: float,
    width: int,
    rho: float = 1.0,
    n_max: int = 0,
    scale: bool = True,
) -> CompressedSequence:
    """Semantic block then geometric block, scaled by (1 - lam) and lam.

    A cell kept verbatim by both streams survives only as a geometric token.
    """
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    w_sem, w_geo = 1.0 - lam, lam
    if w_geo == 0.0 and geo.tokens:
        raise InvalidInputError("geometric tokens would be emitted with weight 0 at lambda = 0")
    if w_sem == 0.0 and sem:
        raise InvalidInputError("semantic tokens would be emitted with weight 0 at lambda = 1")
    geo_cells = {t.cell for t in geo.tokens}
    out = []
    for t in sem:
        cell = None if t.cell is None else divmod(t.cell, width)
        if cell is not None and cell in geo_cells:
            continue
        vec = w_sem * t.vector if scale else t.vector
        out.append(FusedToken(vec, SEMANTIC, w_sem, cell, t.cluster, t.importance))
    for t in geo.tokens:
        vec = w_geo * t.vector if scale else t.vector
        out.append(FusedToken(vec, GEOMETRIC, w_geo, t.cell))
    return CompressedSequence(out, lam, rho, n_max, width, {"scaled": scale})


def unroll(seq: CompressedSequence, mode: str = "topological") -> CompressedSequence:
    """Order the geometric block by trace order or by raster index; semantic block untouched."""
    if mode not in UNROLL_MODES:
        raise InvalidInputError(f"unknown unroll mode {mode!r}; expected one of {UNROLL_MODES}")
    if mode == "topological":
        return seq
    geo = sorted(seq.stream(GEOMETRIC), key=lambda t: t.cell[0] * seq.width + t.cell[1])
    rest = [t for t in seq.tokens if t.stream != GEOMETRIC]
    return replace(seq, tokens=rest + geo, meta={**seq.meta, "unroll": mode})
