"""Geometric stream: structural cost field, anchors and greedy topology completion."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from dualcomp.grid import FeatureGrid, InvalidInputError, cosine_rows

Coord = tuple[int, int]


@dataclass(frozen=True)
class IgsrConfig:
    beta: float = 1.0
    radius: int = 1
    min_anchors: int = 2

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidInputError(f"beta must be >= 0, got {self.beta}")
        if self.radius < 1:
            raise InvalidInputError(f"neighbourhood radius must be >= 1, got {self.radius}")
        if self.min_anchors < 1:
            raise InvalidInputError(f"min_anchors must be >= 1, got {self.min_anchors}")


@dataclass(frozen=True)
class StructField:
    s_geo: np.ndarray
    s_text: np.ndarray | None
    s_struct: np.ndarray
    beta: float


@dataclass(frozen=True)
class AnchorSet:
    anchors: list[Coord]
    subregions: tuple[int, int]


@dataclass(frozen=True)
class GeoToken:
    vector: np.ndarray
    cell: Coord
    is_anchor: bool


@dataclass
class TracedPaths:
    paths: list[list[Coord]]
    tokens: list[GeoToken]


def chebyshev(a: Coord, b: Coord) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def _box3(x: np.ndarray) -> np.ndarray:
    """Sum over the in-bounds 3 x 3 window along the first two axes (separable)."""
    rows = x.copy()
    rows[1:] += x[:-1]
    rows[:-1] += x[1:]
    out = rows.copy()
    out[:, 1:] += rows[:, :-1]
    out[:, :-1] += rows[:, 1:]
    return out


def local_difference_saliency(grid: FeatureGrid) -> np.ndarray:
    """Squared distance of each feature from the mean of its in-bounds 3x3 window."""
    f = grid.features64
    h, w, _ = f.shape
    count = _box3(np.ones((h, w)))
    diff = f - _box3(f) / count[:, :, None]
    return np.einsum("ijd,ijd->ij", diff, diff)


def text_relevance(grid: FeatureGrid, text_embedding: np.ndarray) -> np.ndarray:
    t = np.asarray(text_embedding, dtype=np.float64)
    if t.shape != (grid.dim,):
        raise InvalidInputError(f"text embedding has shape {t.shape}, grid dim is {grid.dim}")
    flat = grid.flat_features()
    return cosine_rows(flat, np.broadcast_to(t, flat.shape)).reshape(grid.height, grid.width)


def minmax(x: np.ndarray) -> np.ndarray:
    """Min-max scaling to [0, 1]; a constant field maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def build_struct_field(s_geo: np.ndarray, s_text: np.ndarray | None = None, beta: float = 1.0) -> StructField:
    if beta < 0:
        raise InvalidInputError(f"beta must be >= 0, got {beta}")
    geo_n = minmax(s_geo)
    if s_text is None:
        return StructField(np.asarray(s_geo), None, geo_n, beta)
    if np.shape(s_text) != np.shape(s_geo):
        raise InvalidInputError("s_text and s_geo shapes differ")
    struct = geo_n * (1.0 + beta * minmax(s_text))
    return StructField(np.asarray(s_geo), np.asarray(s_text), struct, beta)


def anchor_count(n_geo: int, cfg: IgsrConfig = IgsrConfig()) -> int:
    if n_geo <= 0:
        return 0
    return min(max(cfg.min_anchors, int(math.floor(math.sqrt(n_geo) + 0.5))), n_geo)


def partition_dims(k: int, h: int, w: int) -> tuple[int, int]:
    """Near-square (rows, cols) subregion grid with rows * cols >= k, fitting inside h x w."""
    g_r = min(h, math.ceil(math.sqrt(k)))
    g_c = math.ceil(k / g_r)
    if g_c > w:
        g_c = w
        g_r = math.ceil(k / w)
    return g_r, g_c


def _rank_by_score(cells: list[Coord], field: np.ndarray) -> list[Coord]:
    """Descending score, ties in raster order."""
    return sorted(cells, key=lambda c: (-field[c], c))


def extract_anchors(field: StructField, k_target: int) -> AnchorSet:
    s = field.s_struct
    h, w = s.shape
    if k_target == 0:
        return AnchorSet([], (0, 0))
    if not 1 <= k_target <= h * w:
        raise InvalidInputError(f"k_target must lie in [0, {h * w}], got {k_target}")
    g_r, g_c = partition_dims(k_target, h, w)
    r_edges = [(i * h) // g_r for i in range(g_r + 1)]
    c_edges = [(j * w) // g_c for j in range(g_c + 1)]
    cands = []
    for i in range(g_r):
        for j in range(g_c):
            block = s[r_edges[i] : r_edges[i + 1], c_edges[j] : c_edges[j + 1]]
            br, bc = np.unravel_index(int(np.argmax(block)), block.shape)
            cands.append((r_edges[i] + int(br), c_edges[j] + int(bc)))
    if len(cands) > k_target:
        cands = _rank_by_score(cands, s)[:k_target]
    return AnchorSet(traversal_order(cands), (g_r, g_c))


def traversal_order(anchors: list[Coord]) -> list[Coord]:
    """Greedy nearest-neighbour chain (Chebyshev) from the raster-first anchor."""
    if not anchors:
        return []
    left = sorted(set(anchors))
    if len(left) != len(anchors):
        raise InvalidInputError("anchors must be distinct")
    chain = [left.pop(0)]
    while left:
        cur = chain[-1]
        nxt = min(left, key=lambda a: (chebyshev(cur, a), a))
        left.remove(nxt)
        chain.append(nxt)
    return chain


def trace_path(s_struct: np.ndarray, start: Coord, goal: Coord, radius: int = 1) -> list[Coord]:
    """Greedy ascent on the cost field under a strictly shrinking Chebyshev distance to ``goal``."""
    h, w = s_struct.shape
    for p in (start, goal):
        if not (0 <= p[0] < h and 0 <= p[1] < w):
            raise InvalidInputError(f"{p} lies outside the {h}x{w} grid")
    if start == goal:
        raise InvalidInputError("path endpoints must differ")
    path = [start]
    cur = start
    d_cur = chebyshev(cur, goal)
    while cur != goal:
        best = None
        best_key = None
        for r in range(max(0, cur[0] - radius), min(h, cur[0] + radius + 1)):
            for c in range(max(0, cur[1] - radius), min(w, cur[1] + radius + 1)):
                d = max(abs(r - goal[0]), abs(c - goal[1]))
                if d >= d_cur:
                    continue
                key = (-s_struct[r, c], d, r, c)
                if best_key is None or key < best_key:
                    best, best_key = (r, c), key
        # a step toward the goal on both axes always qualifies, so best is never None
        cur, d_cur = best, best_key[1]
        path.append(cur)
    return path


def _worker_count(workers: int | None) -> int:
    import os

    cap = os.environ.get("DUALCOMP_THREADS")
    n = workers if workers is not None else 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def complete_topology(
    grid: FeatureGrid,
    field: StructField,
    anchors: AnchorSet,
    n_geo: int,
    radius: int = 1,
    workers: int | None = None,
) -> TracedPaths:
    """Connect consecutive anchors and emit at most ``n_geo`` trace-ordered tokens."""
    s = field.s_struct
    w = grid.width
    feats = grid.features
    chain = anchors.anchors
    if n_geo <= 0 or not chain:
        return TracedPaths([], [])

    def token(c: Coord, is_anchor: bool) -> GeoToken:
        return GeoToken(feats[c].astype(np.float64), c, is_anchor)

    if n_geo < len(chain):
        keep = set(_rank_by_score(list(chain), s)[:n_geo])
        return TracedPaths([], [token(c, True) for c in chain if c in keep])

    pairs = list(zip(chain[:-1], chain[1:]))
    n_workers = _worker_count(workers)
    if n_workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            paths = list(pool.map(lambda p: trace_path(s, p[0], p[1], radius), pairs))
    else:
        paths = [trace_path(s, a, b, radius) for a, b in pairs]

    anchor_set = set(chain)
    order: list[Coord] = [chain[0]]
    for p in paths:
        order.extend(p[1:])
    if not paths:
        order = list(chain)
    seen = set()
    seq = []
    for c in order:
        if c not in seen:
            seen.add(c)
            seq.append(c)

    excess = len(seq) - n_geo
    if excess > 0:
        fillers = [c for c in seq if c not in anchor_set]
        drop = set(sorted(fillers, key=lambda c: (s[c], c[0] * w + c[1]))[:excess])
        seq = [c for c in seq if c not in drop]
    return TracedPaths(paths, [token(c, c in anchor_set) for c in seq])


def top_k_structure(grid: FeatureGrid, field: StructField, n_geo: int) -> TracedPaths:
    """Highest-cost cells with no path connection, in descending score."""
    if n_geo <= 0:
        return TracedPaths([], [])
    s = field.s_struct
    flat = s.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))[:n_geo]
    cells = [divmod(int(i), grid.width) for i in order]
    return TracedPaths([], [GeoToken(grid.features[c].astype(np.float64), c, False) for c in cells])
