"""Semantic stream: contiguous clustering, [CLS]-attention scoring and size-aware representatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualcomp.grid import FeatureGrid, InvalidInputError

# previously visited 8-neighbours of (r, c), listed in ascending raster order
_PAST_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1))


@dataclass(frozen=True)
class ScsaConfig:
    tau_min: float = 0.65
    tau_max: float = 0.95
    theta_min: int = 2
    theta_max: int = 8

    def __post_init__(self):
        if not (0.0 < self.tau_min < self.tau_max <= 1.0):
            raise InvalidInputError(f"need 0 < tau_min < tau_max <= 1, got ({self.tau_min}, {self.tau_max})")
        if not (0 <= self.theta_min <= self.theta_max):
            raise InvalidInputError(f"need 0 <= theta_min <= theta_max, got ({self.theta_min}, {self.theta_max})")


@dataclass
class ClusterSet:
    """Forest over raster cell indices plus its cluster decomposition.

    ``labels[i]`` is the cluster id of cell ``i``; ids follow the raster order
    of cluster roots, and a root is always the smallest index in its cluster.
    """

    parent: np.ndarray
    labels: np.ndarray
    roots: np.ndarray
    sizes: np.ndarray
    tau_used: float
    shape: tuple[int, int]
    importance: np.ndarray | None = None

    @property
    def n_clusters(self) -> int:
        return len(self.roots)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def member_lists(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(self.sizes)[:-1]
        return np.split(order, bounds)


@dataclass(frozen=True)
class SemanticToken:
    vector: np.ndarray
    cluster: int
    cell: int | None  # raster index for kept originals, None for summaries
    importance: float

    @property
    def kind(self) -> str:
        return "kept-original" if self.cell is not None else "summary"


def tau_of_lambda(lam: float, cfg: ScsaConfig = ScsaConfig()) -> float:
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    return cfg.tau_min + (cfg.tau_max - cfg.tau_min) * lam


def theta_of_lambda(lam: float, cfg: ScsaConfig = ScsaConfig()) -> int:
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    return int(np.floor(cfg.theta_min + (cfg.theta_max - cfg.theta_min) * lam + 0.5))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("...d,...d->...", x, x))[..., None]
    out = np.zeros_like(x)
    np.divide(x, norms, out=out, where=norms > 0)
    return out


def neighbor_parents(grid: FeatureGrid, tau: float) -> np.ndarray:
    """The merge target of every cell under the local parent rule (no root resolution)."""
    h, w = grid.height, grid.width
    u = _unit_rows(grid.features64)
    best = np.full((h, w), -np.inf)
    target = np.arange(h * w).reshape(h, w)
    for dr, dc in _PAST_OFFSETS:
        # cells (r, c) whose neighbour (r+dr, c+dc) is inside the grid
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        if r0 >= r1 or c0 >= c1:
            continue
        here = u[r0:r1, c0:c1]
        there = u[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        cos = np.einsum("ijd,ijd->ij", here, there)
        sub_best = best[r0:r1, c0:c1]
        # strict ">" keeps the earliest (raster-smallest) neighbour on ties
        better = cos > sub_best
        sub_best[better] = cos[better]
        idx = (np.arange(r0 + dr, r1 + dr)[:, None] * w + np.arange(c0 + dc, c1 + dc)[None, :])
        target[r0:r1, c0:c1][better] = idx[better]
    parent = np.arange(h * w).reshape(h, w)
    merge = best > tau
    parent[merge] = target[merge]
    return parent.ravel()


def cluster_grid(grid: FeatureGrid, tau: float) -> ClusterSet:
    """Spatially contiguous clusters from one raster pass of the neighbour parent rule."""
    if not 0.0 < tau <= 1.0:
        raise InvalidInputError(f"tau must lie in (0, 1], got {tau}")
    parent = neighbor_parents(grid, tau)
    # parent[i] <= i, so pointer jumping converges to the cluster root
    root = parent.copy()
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    roots, labels = np.unique(root, return_inverse=True)
    sizes = np.bincount(labels, minlength=len(roots))
    return ClusterSet(
        parent=parent, labels=labels.astype(np.int64), roots=roots, sizes=sizes,
        tau_used=float(tau), shape=(grid.height, grid.width),
    )


def cls_attention(q_cls: np.ndarray, keys: np.ndarray, d: int) -> np.ndarray:
    """Softmax of scaled [CLS]-query / patch-key logits over all cells."""
    if d < 1:
        raise InvalidInputError(f"scale dimension must be >= 1, got {d}")
    q = np.asarray(q_cls, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if k.ndim != 2 or q.shape != (k.shape[1],):
        raise InvalidInputError(f"q_cls {q.shape} and keys {k.shape} do not agree")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k))):
        raise InvalidInputError("non-finite attention inputs")
    logits = k @ q / np.sqrt(d)
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def score_clusters(clusters: ClusterSet, cls_attn: np.ndarray) -> ClusterSet:
    a = np.asarray(cls_attn, dtype=np.float64).ravel()
    if a.size != clusters.labels.size:
        raise InvalidInputError("attention map does not match the clustered grid")
    clusters.importance = np.bincount(clusters.labels, weights=a, minlength=clusters.n_clusters)
    return clusters


def select_clusters(scored: ClusterSet, n_sem: int) -> np.ndarray:
    """Ids of the n_sem most important clusters; ties go to the lower id."""
    if scored.importance is None:
        raise InvalidInputError("clusters must be scored before selection")
    order = np.argsort(-scored.importance, kind="stable")
    return order[: max(n_sem, 0)]


def represent_clusters(
    grid: FeatureGrid, scored: ClusterSet, n_sem: int, theta_size: int, cls_attn: np.ndarray | None = None
) -> list[SemanticToken]:
    """One token per selected cluster, in descending importance.

    Clusters no larger than ``theta_size`` keep their highest-attention cell
    verbatim; larger ones emit the attention-weighted mean of their members.
    """
    chosen = select_clusters(scored, n_sem)
    if len(chosen) == 0:
        return []
    attn = (grid.attention() if cls_attn is None else np.asarray(cls_attn, dtype=np.float64)).ravel()
    feats = grid.flat_features()
    members = scored.member_lists()
    tokens = []
    for k in chosen:
        cells = members[k]
        imp = float(scored.importance[k])
        if len(cells) <= theta_size:
            # argmax returns the first maximum, i.e. the raster-earliest cell
            best = int(cells[np.argmax(attn[cells])])
            tokens.append(SemanticToken(feats[best].copy(), int(k), best, imp))
            continue
        wts = attn[cells]
        mass = wts.sum()
        if mass > 0:
            vec = (wts / mass) @ feats[cells]
        else:
            vec = feats[cells].mean(axis=0)
        tokens.append(SemanticToken(vec, int(k), None, imp))
    return tokens
