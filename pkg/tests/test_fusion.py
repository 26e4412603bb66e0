from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcomp.fusion import FULL, GEOMETRIC, SEMANTIC, fuse, unroll
from dualcomp.grid import InvalidInputError
from dualcomp.igsr import GeoToken, TracedPaths
from dualcomp.pipeline import RunConfig, compress
from dualcomp.router import TaskPolicy
from dualcomp.scene import SceneSpec, generate_scene
from dualcomp.scsa import SemanticToken


def sem_tokens(vectors, cells=None):
    cells = cells or [None] * len(vectors)
    return [SemanticToken(np.asarray(v, float), k, c, 1.0 - 0.1 * k) for k, (v, c) in enumerate(zip(vectors, cells))]


def geo_tokens(cells, d=2):
    return TracedPaths([list(cells)], [GeoToken(np.full(d, float(i + 1)), c, False) for i, c in enumerate(cells)])


def test_lambda_zero_keeps_semantic_unchanged():
    sem = sem_tokens([[1.0, 2.0], [3.0, 4.0]])
    seq = fuse(sem, TracedPaths([], []), 0.0, width=4)
    assert [t.stream for t in seq.tokens] == [SEMANTIC, SEMANTIC]
    for t, s in zip(seq.tokens, sem):
        np.testing.assert_array_equal(t.vector, s.vector)


def test_lambda_one_keeps_geometric_unchanged():
    geo = geo_tokens([(0, 0), (1, 1)])
    seq = fuse([], geo, 1.0, width=4)
    assert [t.stream for t in seq.tokens] == [GEOMETRIC, GEOMETRIC]
    for t, g in zip(seq.tokens, geo.tokens):
        np.testing.assert_array_equal(t.vector, g.vector)


def test_half_lambda_scales_both_blocks():
    sem = sem_tokens([[2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    geo = geo_tokens([(3, 3), (3, 2)])
    seq = fuse(sem, geo, 0.5, width=4)
    assert [t.stream for t in seq.tokens] == [SEMANTIC] * 3 + [GEOMETRIC] * 2
    for t, src in zip(seq.tokens, [s.vector for s in sem] + [g.vector for g in geo.tokens]):
        np.testing.assert_array_equal(t.vector, 0.5 * src)
        assert t.weight == 0.5


def test_scaling_toggle():
    sem = sem_tokens([[2.0, 0.0]])
    seq = fuse(sem, geo_tokens([(1, 1)]), 0.25, width=4, scale=False)
    np.testing.assert_array_equal(seq.tokens[0].vector, sem[0].vector)
    assert seq.tokens[0].weight == 0.75


def test_shared_cell_survives_only_as_geometric():
    sem = sem_tokens([[1.0, 0.0], [0.0, 1.0]], cells=[5, None])
    geo = geo_tokens([(1, 1), (1, 2)])  # raster 5 on width 4
    seq = fuse(sem, geo, 0.5, width=4)
    assert [t.stream for t in seq.tokens] == [SEMANTIC, GEOMETRIC, GEOMETRIC]
    assert seq.tokens[0].cell is None


def test_zero_weight_stream_is_rejected():
    with pytest.raises(InvalidInputError):
        fuse([], geo_tokens([(0, 0)]), 0.0, width=2)
    with pytest.raises(InvalidInputError):
        fuse(sem_tokens([[1.0, 0.0]]), TracedPaths([], []), 1.0, width=2)
    with pytest.raises(InvalidInputError):
        fuse([], TracedPaths([], []), 1.5, width=2)


def test_index_reorder_sorts_geometric_block():
    seq = fuse(sem_tokens([[1.0, 1.0]]), geo_tokens([(2, 2), (1, 1), (0, 0)]), 0.5, width=3)
    out = unroll(seq, "index_reorder")
    assert [t.cell for t in out.stream(GEOMETRIC)] == [(0, 0), (1, 1), (2, 2)]
    assert out.tokens[0].stream == SEMANTIC


def test_topological_unroll_is_identity():
    seq = fuse([], geo_tokens([(2, 2), (1, 1), (0, 0)]), 0.5, width=3)
    out = unroll(seq, "topological")
    assert [t.cell for t in out.tokens] == [(2, 2), (1, 1), (0, 0)]
    for a, b in zip(out.tokens, seq.tokens):
        np.testing.assert_array_equal(a.vector, b.vector)


def test_unknown_unroll_mode():
    with pytest.raises(InvalidInputError):
        unroll(fuse([], TracedPaths([], []), 0.5, width=2), "spiral")


def _key(t):
    return (t.stream, repr(t.cell), repr(t.cluster), t.vector.tobytes())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(0.02, 0.6), st.sampled_from(["semantic", "balanced", "geometric"]))
def test_fusion_invariants_on_scenes(seed, lam, rho, kind):
    grid, _ = generate_scene(SceneSpec(height=16, width=16, dim=16, seed=seed, task_kind=kind))
    res = compress(grid, TaskPolicy(lam, rho), RunConfig())
    seq = res.sequence
    assert len(seq) <= res.budget.n_keep
    if any(t.stream == FULL for t in seq.tokens):
        return
    streams = [t.stream for t in seq.tokens]
    # semantic block strictly before the geometric block
    assert streams == sorted(streams, key=lambda s: s != SEMANTIC)
    cells = seq.cells()
    assert len(cells) == len(set(cells))
    for t in seq.tokens:
        assert t.weight == (1.0 - lam if t.stream == SEMANTIC else lam)
    # no geometric token is lost to deduplication
    assert [t.cell for t in seq.stream(GEOMETRIC)] == [t.cell for t in res.paths.tokens]
    # dividing out the weight restores the source vectors
    for t, g in zip(seq.stream(GEOMETRIC), res.paths.tokens):
        np.testing.assert_allclose(t.vector / t.weight, g.vector, rtol=1e-12)
    flat = grid.flat_features()
    w = grid.width
    for t in seq.stream(SEMANTIC):
        if t.cell is not None:
            np.testing.assert_allclose(t.vector / t.weight, flat[t.cell[0] * w + t.cell[1]], rtol=1e-12)
    # unroll only permutes
    other = unroll(seq, "index_reorder")
    assert sorted(map(_key, other.tokens)) == sorted(map(_key, seq.tokens))


def test_token_count_never_exceeds_budget_500_cases():
    rng = np.random.default_rng(77)
    grids = [generate_scene(SceneSpec(height=12, width=12, dim=8, seed=s))[0] for s in range(25)]
    for _ in range(500):
        grid = grids[rng.integers(len(grids))]
        policy = TaskPolicy(float(rng.uniform(0, 1)), float(rng.uniform(0.01, 1)))
        res = compress(grid, policy, RunConfig())
        assert len(res.sequence) <= res.budget.n_keep
