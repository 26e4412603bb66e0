"""One-off calibration of the duality-regime checks on the default scene family.

Runs both regimes over seeds 0..99 and writes the observed margins to
calibration/duality.json so the pinned thresholds in the acceptance suite
can be compared against what the generator actually produces.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from dualcomp.pipeline import RunConfig, compress
from dualcomp.router import TaskPolicy
from dualcomp.scene import SceneSpec, evaluate, generate_scene

SEMANTIC_RHOS = (1.0, 0.5, 0.1, 0.04)


def semantic_regime(seeds, lam=0.1):
    cfg = RunConfig()
    drops, ratios, monotone = [], [], 0
    for seed in seeds:
        grid, truth = generate_scene(SceneSpec(seed=seed, task_kind="semantic"))
        reps = [evaluate(compress(grid, TaskPolicy(lam, r), cfg), truth) for r in SEMANTIC_RHOS]
        pres = [r.object_preservation for r in reps]
        drops.append(pres[0] - pres[-1])
        ratios.append(reps[0].tokens_kept / reps[-1].tokens_kept)
        monotone += all(a >= b for a, b in zip(pres, pres[1:]))
    return {
        "lambda": lam,
        "rhos": list(SEMANTIC_RHOS),
        "max_preservation_drop": float(max(drops)),
        "mean_preservation_drop": float(np.mean(drops)),
        "min_token_reduction": float(min(ratios)),
        "monotone_seeds": monotone,
    }


def geometric_regime(seeds, lam=0.9, rho=0.05):
    cfg = RunConfig()
    pol = TaskPolicy(lam, rho)
    wins, losing = 0, []
    full_r, topk_r, full_c, topk_c = [], [], [], []
    for seed in seeds:
        grid, truth = generate_scene(SceneSpec(seed=seed, task_kind="geometric"))
        f = evaluate(compress(grid, pol, cfg, "full"), truth)
        k = evaluate(compress(grid, pol, cfg, "top_k"), truth)
        full_r.append(f.path_recall)
        topk_r.append(k.path_recall)
        full_c.append(f.path_connected_frac)
        topk_c.append(k.path_connected_frac)
        if f.path_recall > k.path_recall:
            wins += 1
        else:
            losing.append(seed)
    return {
        "lambda": lam,
        "rho": rho,
        "wins": wins,
        "losing_seeds": losing,
        "mean_recall_full": float(np.mean(full_r)),
        "mean_recall_top_k": float(np.mean(topk_r)),
        "mean_connected_full": float(np.mean(full_c)),
        "mean_connected_top_k": float(np.mean(topk_c)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "calibration" / "duality.json"))
    args = ap.parse_args()
    seeds = range(args.seeds)
    spec = SceneSpec()
    result = {
        "scene_defaults": {k: getattr(spec, k) for k in spec.__dataclass_fields__ if k not in ("seed", "task_kind")},
        "seeds": args.seeds,
        "semantic": semantic_regime(seeds),
        "geometric": geometric_regime(seeds),
        "pinned": {"max_preservation_drop": 0.05, "min_token_reduction": 24.0, "min_wins": 95},
    }
    Path(args.out).write_text(json.dumps(result, indent=2, default=list) + "\n")
    print(json.dumps(result, indent=2, default=list))


if __name__ == "__main__":
    main()
