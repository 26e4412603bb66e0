"""Synthetic instruction embeddings and the lexicon-labelled router training corpus.

Real deployments ingest mean-pooled text embeddings from the host model; here
each word maps to a fixed pseudo-random vector so training and tests need no
tokenizer.
"""

from __future__ import annotations

import hashlib
import itertools
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from dualcomp.router import InstructionRepr, LabelRecord, load_lexicon, rule_label

_WORD = re.compile(r"[a-z0-9]+")

# retention targets per task class; callers can pass their own table
DEFAULT_RHO_BY_CLASS = {"semantic": 0.04, "balanced": 0.1, "geometric": 0.25}


@lru_cache(maxsize=8192)
def _word_vector(word: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}:{word}".encode(), digest_size=8).digest()
    v = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)
    v.setflags(write=False)
    return v


def embed_text(text: str, dim: int = 768, seed: int = 0) -> InstructionRepr:
    """Mean-pool per-word vectors; the empty instruction maps to the zero vector."""
    words = _WORD.findall(text.lower())
    if not words:
        return InstructionRepr(np.zeros(dim), raw_text=text)
    emb = np.mean([_word_vector(w, dim, seed) for w in words], axis=0)
    return InstructionRepr(emb, raw_text=text)


def task_class(lambda_value: float) -> str:
    if lambda_value < 0.35:
        return "semantic"
    if lambda_value > 0.65:
        return "geometric"
    return "balanced"


GEOMETRIC_TEMPLATES = [
    "plan a route from the {a} to the {b}",
    "which path should a vehicle take to connect the {a} and the {b}",
    "describe the boundary of the zone around the {a}",
    "classify the land use of the region near the {a}",
    "in which direction is the {a} from the {b}",
    "what is the layout of the {a} region",
    "trace the path that connects the {a} with the {b}",
    "plan the shortest route through this region",
    "outline the region boundary shown in the photo",
]
SEMANTIC_TEMPLATES = [
    "how many {o}s are parked near the {a}",
    "count the {o}s in the image",
    "count every {o} visible in this scene",
    "how many {o}s can be seen in the photo",
    "what color is the {o} next to the {a}",
    "is a {o} present near the {a}",
    "what category of object is the {o}",
    "which class does the {o} belong to",
    "is the {o} moving or parked",
    "what is the state of the {o} near the {a}",
]
BALANCED_TEMPLATES = [
    "count the {o}s along the route to the {a}",
    "what color is the {o} in the region near the {b}",
    "is a {o} present on the path to the {a}",
]

TRAIN_PLACES = [
    "harbor", "stadium", "airport", "school", "river", "bridge", "park", "factory",
    "station", "farm", "forest", "village", "port", "highway",
]
TRAIN_OBJECTS = ["car", "ship", "plane", "truck", "tank", "bus", "crane", "tractor", "jet", "barge"]

HELDOUT_GEOMETRIC = [
    "plan a route between the hospital and the market",
    "describe the boundary of the zone beside the lake",
    "classify the land use of the region around the campus",
    "what is the direction from the hospital to the lake",
]
HELDOUT_SEMANTIC = [
    "how many boats are docked near the market",
    "what color is the van beside the hospital",
    "count the trailers in the picture",
    "is a helicopter present near the lake",
]


@dataclass
class Corpus:
    texts: list[str]
    labels: list[LabelRecord]
    embeddings: np.ndarray

    @property
    def lambda_gt(self) -> np.ndarray:
        return np.array([r.lambda_gt for r in self.labels])

    @property
    def rho_gt(self) -> np.ndarray:
        return np.array([r.rho_gt for r in self.labels])


def label_text(
    text: str,
    lexicon=None,
    lambda_llm: float | None = None,
    alpha: float = 0.5,
    rho_by_class: dict[str, float] | None = None,
) -> LabelRecord:
    rho_by_class = rho_by_class or DEFAULT_RHO_BY_CLASS
    lam_rule = rule_label(text, lexicon)
    rec = LabelRecord(text=text, lambda_rule=lam_rule, lambda_llm=lambda_llm, alpha=alpha, rho_gt=0.0)
    return LabelRecord(
        text=text, lambda_rule=lam_rule, lambda_llm=lambda_llm, alpha=alpha,
        rho_gt=rho_by_class[task_class(rec.lambda_gt)],
    )


def _fill(templates, places, objects):
    out = {}
    for t in templates:
        for a, b in itertools.permutations(places, 2):
            for o in objects:
                out.setdefault(t.format(a=a, b=b, o=o), None)
    return list(out)


def synthetic_corpus(dim: int = 768, seed: int = 0, per_class: int = 200, alpha: float = 0.5) -> Corpus:
    """Template instructions labelled by the default lexicon, sampled deterministically."""
    rng = np.random.default_rng(seed)
    lexicon = load_lexicon()
    texts = []
    for templates in (GEOMETRIC_TEMPLATES, SEMANTIC_TEMPLATES, BALANCED_TEMPLATES):
        pool = _fill(templates, TRAIN_PLACES, TRAIN_OBJECTS)
        k = min(per_class, len(pool))
        texts.extend(pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False)))
    labels = [label_text(t, lexicon, alpha=alpha) for t in texts]
    emb = np.stack([embed_text(t, dim, seed=0).embedding for t in texts])
    return Corpus(texts, labels, emb)
