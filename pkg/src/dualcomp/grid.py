"""Dense patch-token grids, the unit every compression stage operates on."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class InvalidInputError(ValueError):
    """Raised when a grid or parameter violates a documented precondition."""


@dataclass(frozen=True)
class FeatureGrid:
    """An H x W grid of D-dimensional patch features.

    ``cls_attn`` and the pair ``(q_cls, keys)`` are alternative sources of the
    [CLS]-to-patch attention; at most one may be present.
    """

    features: np.ndarray
    cls_attn: np.ndarray | None = None
    text_sim: np.ndarray | None = None
    q_cls: np.ndarray | None = None
    keys: np.ndarray | None = None

    def __post_init__(self):
        f = self.features
        if f.ndim != 3 or f.size == 0 or f.shape[2] == 0:
            raise InvalidInputError(f"features must be a non-empty H x W x D array, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise InvalidInputError("features contain non-finite values")
        hw = f.shape[:2]
        if self.cls_attn is not None:
            a = self.cls_attn
            if a.shape != hw:
                raise InvalidInputError(f"cls_attn shape {a.shape} != grid shape {hw}")
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise InvalidInputError("cls_attn must be finite and nonnegative")
            total = float(np.sum(a, dtype=np.float64))
            if abs(total - 1.0) >= 1e-5:
                raise InvalidInputError(f"cls_attn sums to {total}, expected 1")
        if self.text_sim is not None:
            if self.text_sim.shape != hw:
                raise InvalidInputError(f"text_sim shape {self.text_sim.shape} != grid shape {hw}")
            if not np.all(np.isfinite(self.text_sim)):
                raise InvalidInputError("text_sim contains non-finite values")
        if (self.q_cls is None) != (self.keys is None):
            raise InvalidInputError("q_cls and keys must be given together")
        if self.q_cls is not None:
            if self.cls_attn is not None:
                raise InvalidInputError("cls_attn and (q_cls, keys) are mutually exclusive")
            if self.q_cls.shape != (self.dim,) or self.keys.shape != f.shape:
                raise InvalidInputError("q_cls must be (D,) and keys must be H x W x D")
            if not (np.all(np.isfinite(self.q_cls)) and np.all(np.isfinite(self.keys))):
                raise InvalidInputError("q_cls/keys contain non-finite values")

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    @cached_property
    def features64(self) -> np.ndarray:
        """H x W x D float64 copy of the features, computed once per grid."""
        return self.features.astype(np.float64, copy=False)

    def flat_features(self) -> np.ndarray:
        """(H*W, D) float64 view of the features in raster order."""
        return self.features64.reshape(self.n_cells, self.dim)

    def has_attention(self) -> bool:
        return self.cls_attn is not None or self.q_cls is not None

    def attention(self) -> np.ndarray:
        """The H x W [CLS] attention map, computing it from (q_cls, keys) when needed."""
        if self.cls_attn is not None:
            return self.cls_attn.astype(np.float64, copy=False)
        if self.q_cls is None:
            raise InvalidInputError("grid carries no CLS-attention source")
        from dualcomp.scsa import cls_attention

        keys = self.keys.reshape(self.n_cells, self.dim)
        return cls_attention(self.q_cls, keys, self.dim).reshape(self.height, self.width)


def coord(index: int, width: int) -> tuple[int, int]:
    return divmod(int(index), width)


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; a zero vector on either side gives 0."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dots = np.einsum("...d,...d->...", a, b)
    denom = na * nb
    out = np.zeros_like(dots)
    np.divide(dots, denom, out=out, where=denom > 0)
    return out
