"""End-to-end compression of one grid, including the ablation variants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dualcomp.fusion import FULL, UNROLL_MODES, CompressedSequence, FusedToken, fuse, unroll
from dualcomp.grid import FeatureGrid, InvalidInputError
from dualcomp.igsr import (
    AnchorSet,
    IgsrConfig,
    StructField,
    TracedPaths,
    anchor_count,
    build_struct_field,
    complete_topology,
    extract_anchors,
    local_difference_saliency,
    text_relevance,
    top_k_structure,
)
from dualcomp.router import TaskPolicy, TokenBudget, allocate_budget
from dualcomp.scsa import (
    ClusterSet,
    ScsaConfig,
    cluster_grid,
    represent_clusters,
    score_clusters,
    tau_of_lambda,
    theta_of_lambda,
)

VARIANTS = ("full", "scsa_only", "igsr_only", "top_k", "tasm_off", "index_reorder")


@dataclass(frozen=True)
class RouterSettings:
    rho_min: float = 0.01
    d_text: int = 768
    hidden1: int = 1024
    hidden2: int = 256
    alpha: float = 0.5
    learning_rate: float = 1.0
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho_min <= 1.0:
            raise InvalidInputError(f"router.rho_min must lie in (0, 1], got {self.rho_min}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError(f"router.alpha must lie in [0, 1], got {self.alpha}")
        if min(self.d_text, self.hidden1, self.hidden2, self.batch_size) < 1:
            raise InvalidInputError("router dimensions and batch size must be positive")
        if self.learning_rate <= 0 or self.steps < 0:
            raise InvalidInputError("router learning_rate must be > 0 and steps >= 0")


@dataclass(frozen=True)
class FusionConfig:
    scale: bool = True
    unroll: str = "topological"

    def __post_init__(self):
        if self.unroll not in UNROLL_MODES:
            raise InvalidInputError(f"fusion.unroll must be one of {UNROLL_MODES}, got {self.unroll!r}")


@dataclass(frozen=True)
class FlopsModel:
    """Linear-plus-quadratic LLM cost in TFLOPs for a visual prefix of ``t`` tokens.

    Defaults approximate an 8B decoder: 2 * params FLOPs per token, plus
    4 * layers * d_model per token pair for attention scores and mixing.
    """

    linear: float = 2 * 8.0e9 / 1e12
    quadratic: float = 4 * 32 * 4096 / 1e12

    def __call__(self, tokens: float) -> float:
        return flops_proxy(tokens, self)


def flops_proxy(tokens: float, model: FlopsModel = FlopsModel()) -> float:
    if model.linear < 0 or model.quadratic < 0:
        raise InvalidInputError("flops constants must be nonnegative")
    return model.linear * tokens + model.quadratic * tokens * tokens


@dataclass(frozen=True)
class RunConfig:
    scsa: ScsaConfig = field(default_factory=ScsaConfig)
    igsr: IgsrConfig = field(default_factory=IgsrConfig)
    router: RouterSettings = field(default_factory=RouterSettings)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    flops: FlopsModel = field(default_factory=FlopsModel)
    identity_at_full: bool = True
    workers: int = 1
    model_path: str = ""
    lexicon_path: str = ""

    def __post_init__(self):
        if self.workers < 1:
            raise InvalidInputError(f"workers must be >= 1, got {self.workers}")


@dataclass
class PipelineResult:
    sequence: CompressedSequence
    budget: TokenBudget
    variant: str
    clusters: ClusterSet | None = None
    struct_field: StructField | None = None
    anchors: AnchorSet | None = None
    paths: TracedPaths | None = None
    router_invoked: bool = False

    @property
    def tokens_kept(self) -> int:
        return len(self.sequence)

    @property
    def compression_ratio(self) -> float:
        return self.budget.n_max / max(self.tokens_kept, 1)

    def selected_clusters(self) -> set[int]:
        return {t.cluster for t in self.sequence.tokens if t.cluster is not None}


def _passthrough(grid: FeatureGrid, policy: TaskPolicy, budget: TokenBudget) -> CompressedSequence:
    feats = grid.flat_features()
    w = grid.width
    tokens = [FusedToken(feats[i].copy(), FULL, 1.0, divmod(i, w)) for i in range(grid.n_cells)]
    return CompressedSequence(tokens, policy.lam, policy.rho, budget.n_max, w, {"passthrough": True})


def stream_budgets(budget: TokenBudget, variant: str) -> tuple[int, int]:
    """(n_sem, n_geo) for a variant; single-stream variants take the whole budget."""
    if variant == "scsa_only":
        return budget.n_keep, 0
    if variant == "igsr_only":
        return 0, budget.n_keep
    return budget.n_sem, budget.n_geo


def compress(
    grid: FeatureGrid,
    policy: TaskPolicy,
    cfg: RunConfig = RunConfig(),
    variant: str = "full",
    text_embedding: np.ndarray | None = None,
) -> PipelineResult:
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    budget = allocate_budget(policy, grid.n_cells)
    if cfg.identity_at_full and budget.n_keep == budget.n_max:
        return PipelineResult(_passthrough(grid, policy, budget), budget, variant)

    n_sem, n_geo = stream_budgets(budget, variant)
    lam = policy.lam

    clusters = None
    sem = []
    if n_sem > 0:
        if not grid.has_attention():
            raise InvalidInputError("semantic budget is nonzero but the grid has no CLS-attention source")
        attn = grid.attention()
        clusters = score_clusters(cluster_grid(grid, tau_of_lambda(lam, cfg.scsa)), attn)
        sem = represent_clusters(grid, clusters, n_sem, theta_of_lambda(lam, cfg.scsa), attn)

    struct = anchors = None
    geo = TracedPaths([], [])
    if n_geo > 0:
        s_text = None
        if variant != "tasm_off":
            if grid.text_sim is not None:
                s_text = grid.text_sim
            elif text_embedding is not None:
                s_text = text_relevance(grid, text_embedding)
        struct = build_struct_field(local_difference_saliency(grid), s_text, cfg.igsr.beta)
        if variant == "top_k":
            geo = top_k_structure(grid, struct, n_geo)
        else:
            anchors = extract_anchors(struct, anchor_count(n_geo, cfg.igsr))
            geo = complete_topology(grid, struct, anchors, n_geo, cfg.igsr.radius, cfg.workers)

    seq = fuse(sem, geo, lam, grid.width, policy.rho, budget.n_max, cfg.fusion.scale)
    mode = "index_reorder" if variant == "index_reorder" else cfg.fusion.unroll
    seq = unroll(seq, mode)
    return PipelineResult(seq, budget, variant, clusters, struct, anchors, geo)
