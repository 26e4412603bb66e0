"""Instruction-conditioned routing: labels, the two-head MLP router, and budget allocation."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w_lam", "b_lam", "w_rho", "b_rho")


class RouterConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class InstructionRepr:
    embedding: np.ndarray
    raw_text: str | None = None

    def __post_init__(self):
        if self.embedding.ndim != 1 or not np.all(np.isfinite(self.embedding)):
            raise RouterConfigError("instruction embedding must be a finite 1-D vector")


@dataclass(frozen=True)
class TaskPolicy:
    lam: float
    rho: float
    rho_min: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.rho_min <= 1.0:
            raise RouterConfigError(f"rho_min must lie in (0, 1], got {self.rho_min}")
        if not 0.0 <= self.lam <= 1.0:
            raise RouterConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.rho_min <= self.rho <= 1.0:
            raise RouterConfigError(f"rho must lie in [{self.rho_min}, 1], got {self.rho}")


@dataclass(frozen=True)
class TokenBudget:
    n_max: int
    n_keep: int
    n_sem: int
    n_geo: int


@dataclass(frozen=True)
class LabelRecord:
    text: str
    lambda_rule: float
    lambda_llm: float | None
    alpha: float
    rho_gt: float

    @property
    def lambda_gt(self) -> float:
        return fuse_labels(self.lambda_llm, self.lambda_rule, self.alpha)


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9]+")


def load_lexicon(path: str | Path | None = None) -> dict[str, dict[str, float]]:
    """Load the keyword tables; the shipped default is used when ``path`` is None."""
    if path is None:
        text = resources.files("dualcomp.data").joinpath("lexicon.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    lex = json.loads(text)
    for cls in ("geometric", "semantic"):
        if not lex.get(cls):
            raise RouterConfigError(f"lexicon class {cls!r} is empty")
    return lex


def _class_weight(words: Counter, table: dict[str, float]) -> float:
    total = 0.0
    for phrase, weight in table.items():
        parts = _WORD.findall(phrase.lower())
        # multi-word keywords match as a bag of words, which keeps the label order-invariant
        hits = min(words[p] for p in parts) if parts else 0
        total += hits * float(weight)
    return total


def rule_label(text: str, lexicon: dict[str, dict[str, float]] | None = None) -> float:
    """Geometric share of matched keyword weight; 0.5 when nothing matches."""
    lexicon = lexicon or load_lexicon()
    words = Counter(_WORD.findall(text.lower()))
    w_g = _class_weight(words, lexicon["geometric"])
    w_s = _class_weight(words, lexicon["semantic"])
    if w_g + w_s == 0:
        return 0.5
    return w_g / (w_g + w_s)


def fuse_labels(lambda_llm: float | None, lambda_rule: float, alpha: float) -> float:
    for name, v in (("lambda_rule", lambda_rule), ("alpha", alpha), ("lambda_llm", lambda_llm)):
        if v is not None and not 0.0 <= v <= 1.0:
            raise RouterConfigError(f"{name}={v} outside [0, 1]; label file is corrupted")
    if lambda_llm is None:
        return lambda_rule
    return alpha * lambda_llm + (1.0 - alpha) * lambda_rule


# ---------------------------------------------------------------------------
# Router MLP
# ---------------------------------------------------------------------------


@dataclass
class RouterModel:
    """Shared tanh trunk (D_t -> H1 -> H2) feeding two sigmoid heads."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_lam: np.ndarray
    b_lam: np.ndarray
    w_rho: np.ndarray
    b_rho: np.ndarray
    rho_min: float = 0.01

    @classmethod
    def init(cls, d_text: int = 768, h1: int = 1024, h2: int = 256, rho_min: float = 0.01, seed: int = 0):
        rng = np.random.default_rng(seed)

        def dense(n_in, n_out):
            return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

        return cls(
            w1=dense(d_text, h1), b1=np.zeros(h1),
            w2=dense(h1, h2), b2=np.zeros(h2),
            w_lam=dense(h2, 1), b_lam=np.zeros(1),
            w_rho=dense(h2, 1), b_rho=np.zeros(1),
            rho_min=rho_min,
        )

    @classmethod
    def zeros(cls, d_text: int, h1: int, h2: int, rho_min: float = 0.01):
        return cls(
            w1=np.zeros((d_text, h1)), b1=np.zeros(h1),
            w2=np.zeros((h1, h2)), b2=np.zeros(h2),
            w_lam=np.zeros((h2, 1)), b_lam=np.zeros(1),
            w_rho=np.zeros((h2, 1)), b_rho=np.zeros(1),
            rho_min=rho_min,
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    @property
    def param_count(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_NAMES)

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "RouterModel":
        return RouterModel(**{n: getattr(self, n).copy() for n in PARAM_NAMES}, rho_min=self.rho_min)

    def validate(self):
        d, h1, h2 = self.dims
        shapes = {
            "w1": (d, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,),
            "w_lam": (h2, 1), "b_lam": (1,), "w_rho": (h2, 1), "b_rho": (1,),
        }
        for n, shape in shapes.items():
            p = getattr(self, n)
            if p.shape != shape:
                raise RouterConfigError(f"{n} has shape {p.shape}, expected {shape}")
            if not np.all(np.isfinite(p)):
                raise RouterConfigError(f"{n} contains non-finite weights")
        if not 0.0 < self.rho_min <= 1.0:
            raise RouterConfigError(f"rho_min must lie in (0, 1], got {self.rho_min}")


@dataclass
class _Cache:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    s_lam: np.ndarray
    s_rho: np.ndarray


def _forward(model: RouterModel, x: np.ndarray) -> _Cache:
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.dims[0]:
        raise RouterConfigError(f"instruction dim {x.shape[1]} != router input dim {model.dims[0]}")
    with np.errstate(over="ignore"):
        h1 = np.tanh(x @ model.w1 + model.b1)
        h2 = np.tanh(h1 @ model.w2 + model.b2)
        s_lam = expit(h2 @ model.w_lam + model.b_lam)[:, 0]
        s_rho = expit(h2 @ model.w_rho + model.b_rho)[:, 0]
    return _Cache(x, h1, h2, s_lam, s_rho)


def predict(model: RouterModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched (lambda, rho) for rows of ``x``."""
    c = _forward(model, x)
    return c.s_lam, model.rho_min + (1.0 - model.rho_min) * c.s_rho


def router_forward(model: RouterModel, instr: InstructionRepr) -> TaskPolicy:
    lam, rho = predict(model, instr.embedding)
    # clip guards the last-ulp overshoot of rho_min + (1 - rho_min) * s
    rho_v = min(max(float(rho[0]), model.rho_min), 1.0)
    return TaskPolicy(lam=float(lam[0]), rho=rho_v, rho_min=model.rho_min)


def router_backward(model: RouterModel, x: np.ndarray, lambda_gt, rho_gt) -> tuple[float, dict[str, np.ndarray]]:
    """Summed squared-error loss over the batch and its gradient for every parameter."""
    c = _forward(model, x)
    lam_gt = np.broadcast_to(np.asarray(lambda_gt, dtype=np.float64), c.s_lam.shape)
    rho_t = np.broadcast_to(np.asarray(rho_gt, dtype=np.float64), c.s_rho.shape)
    span = 1.0 - model.rho_min
    rho = model.rho_min + span * c.s_rho
    e_lam = c.s_lam - lam_gt
    e_rho = rho - rho_t
    loss = float(np.sum(e_lam**2) + np.sum(e_rho**2))

    dz_lam = (2.0 * e_lam * c.s_lam * (1.0 - c.s_lam))[:, None]
    dz_rho = (2.0 * e_rho * span * c.s_rho * (1.0 - c.s_rho))[:, None]
    grads = {
        "w_lam": c.h2.T @ dz_lam,
        "b_lam": dz_lam.sum(axis=0),
        "w_rho": c.h2.T @ dz_rho,
        "b_rho": dz_rho.sum(axis=0),
    }
    da2 = (dz_lam @ model.w_lam.T + dz_rho @ model.w_rho.T) * (1.0 - c.h2**2)
    grads["w2"] = c.h1.T @ da2
    grads["b2"] = da2.sum(axis=0)
    da1 = (da2 @ model.w2.T) * (1.0 - c.h1**2)
    grads["w1"] = c.x.T @ da1
    grads["b1"] = da1.sum(axis=0)
    return loss, grads


@dataclass
class TrainLog:
    """Per-step minibatch losses plus whole-corpus losses before and after training."""

    losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def corpus_loss(model: RouterModel, x, lambda_gt, rho_gt) -> float:
    loss, _ = router_backward(model, x, lambda_gt, rho_gt)
    return loss / np.asarray(x).shape[0]


def train_router(
    model: RouterModel,
    embeddings: np.ndarray,
    lambda_gt: np.ndarray,
    rho_gt: np.ndarray,
    steps: int = 2000,
    learning_rate: float = 1.0,
    seed: int = 0,
    batch_size: int | None = 32,
    log: TrainLog | None = None,
) -> RouterModel:
    """Plain minibatch SGD on the mean squared error; returns a trained copy of ``model``.

    ``batch_size=None`` uses the full corpus every step.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    lam_t = np.asarray(lambda_gt, dtype=np.float64)
    rho_t = np.asarray(rho_gt, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise RouterConfigError("training corpus is empty")
    log = log if log is not None else TrainLog()
    log.initial_loss = corpus_loss(model, x, lam_t, rho_t)
    if steps == 0:
        log.final_loss = log.initial_loss
        return model
    model = model.copy()
    rng = np.random.default_rng(seed)
    bs = n if batch_size is None else min(batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    for step in range(steps):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        loss, grads = router_backward(model, x[idx], lam_t[idx], rho_t[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (learning_rate={learning_rate}); lower the rate"
            )
        log.losses.append(loss / bs)
        scale = learning_rate / bs
        for name, g in grads.items():
            getattr(model, name)[...] -= scale * g
    log.final_loss = corpus_loss(model, x, lam_t, rho_t)
    if not np.isfinite(log.final_loss):
        raise TrainingDivergedError(f"non-finite corpus loss after training (learning_rate={learning_rate})")
    logger.info("router training: loss %.5f -> %.5f over %d steps", log.initial_loss, log.final_loss, steps)
    return model


# ---------------------------------------------------------------------------
# Budget
# ---------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def allocate_budget(policy: TaskPolicy, n_max: int) -> TokenBudget:
    if n_max < 1:
        raise RouterConfigError(f"n_max must be >= 1, got {n_max}")
    n_keep = min(max(_round_half_up(n_max * policy.rho), 1), n_max)
    n_sem = _round_half_up(n_keep * (1.0 - policy.lam))
    return TokenBudget(n_max=n_max, n_keep=n_keep, n_sem=n_sem, n_geo=n_keep - n_sem)
