import itertools
import math

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from structsparse.pruning import (
    Channel,
    Column,
    Connectivity,
    Filter,
    Pattern,
    PatternLibrary,
    PruningError,
    keep_count,
    project,
    select_pattern_library,
    sparsity_report,
    structure_from_dict,
    structure_to_dict,
    support,
)

finite = st.floats(-100, 100, allow_nan=False, width=32)


def brute_force_kept(scores, k):
    """Best k-subset by score sum; ties go to the lexicographically smallest index set."""
    best, best_set = -1.0, None
    for combo in itertools.combinations(range(len(scores)), k):
        total = math.fsum(scores[i] for i in combo)  # order-independent, so ties stay ties
        if total > best:
            best, best_set = total, combo
    return list(best_set)


def test_full_keep_is_identity(rng):
    W = rng.standard_normal((5, 7)).astype(np.float32)
    for s in (Column(1.0), Filter(1.0), Channel(1.0)):
        assert np.array_equal(project(W, s), W)
    W4 = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    assert np.array_equal(project(W4, Connectivity(1.0)), W4)
    assert np.array_equal(project(W4, Pattern(3, 3, 9, 1)), W4)


def test_column_worked_example():
    W = np.array([[3, 1, 0, 2], [3, 1, 0, 2]], np.float32)
    sup = support(W, Column(0.5))
    assert sup.kept.tolist() == [0, 3]
    assert project(W, Column(0.5)).tolist() == [[3, 0, 0, 2], [3, 0, 0, 2]]


def test_all_zero_ties_to_lowest_index():
    W = np.zeros((2, 4), np.float32)
    sup = support(W, Column(0.25))
    assert sup.kept.tolist() == [0]
    assert not project(W, Column(0.25)).any()


def test_keep_count_rounds_half_up_and_clamps():
    assert keep_count(0.5, 4) == 2
    assert keep_count(0.25, 6) == 2  # 1.5 -> 2
    assert keep_count(0.01, 10) == 1
    assert keep_count(1.0, 3) == 3
    with pytest.raises(PruningError):
        keep_count(0.5, 0)


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5, float("nan")])
def test_invalid_ratio_rejected(ratio):
    with pytest.raises(PruningError):
        Column(ratio)


def test_incompatible_shape():
    with pytest.raises(PruningError):
        project(np.ones((4, 4), np.float32), Connectivity(0.5))
    with pytest.raises(PruningError):
        project(np.ones((2, 2, 3, 3), np.float32), Pattern(5, 5, 4, 1))
    with pytest.raises(PruningError):
        project(np.ones(4, np.float32), Column(0.5))


def test_group_definitions_on_conv_weights(rng):
    W = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    col = project(W, Column(0.5)).reshape(4, -1)
    assert np.count_nonzero(col.any(axis=0)) == keep_count(0.5, 27)
    filt = project(W, Filter(0.5)).reshape(4, -1)
    assert np.count_nonzero(filt.any(axis=1)) == 2
    ch = project(W, Channel(0.34))
    assert np.count_nonzero(ch.any(axis=(0, 2, 3))) == 1
    conn = project(W, Connectivity(0.5))
    assert np.count_nonzero(conn.any(axis=(2, 3))) == 6


def test_pattern_projection_uses_best_mask():
    lib = PatternLibrary.from_positions([[0, 1], [7, 8]], 3, 3)
    W = np.zeros((1, 2, 3, 3), np.float32)
    W[0, 0] = np.arange(9).reshape(3, 3)        # energy favors positions 7, 8
    W[0, 1] = np.arange(9)[::-1].reshape(3, 3)  # favors 0, 1
    sup = support(W, Pattern(3, 3, 2, 2, library=lib))
    assert sup.pattern_ids.tolist() == [[1, 0]]
    P = project(W, Pattern(3, 3, 2, 2, library=lib))
    assert P[0, 0].ravel().tolist() == [0, 0, 0, 0, 0, 0, 0, 7, 8]
    assert P[0, 1].ravel().tolist() == [8, 7, 0, 0, 0, 0, 0, 0, 0]


def test_pattern_with_connectivity(rng):
    W = rng.standard_normal((4, 4, 3, 3)).astype(np.float32)
    s = Pattern(3, 3, 4, 8, keep_ratio=0.5)
    P = project(W, s)
    alive = P.reshape(16, 9).any(axis=1)
    assert alive.sum() == 8
    assert (np.count_nonzero(P.reshape(16, 9), axis=1)[alive] == 4).all()


def test_pattern_library_validation():
    with pytest.raises(PruningError):
        PatternLibrary.from_positions([[0, 1], [0, 1]], 3, 3)
    with pytest.raises(PruningError):
        PatternLibrary.from_positions([[0, 1], [0, 1, 2]], 3, 3)
    with pytest.raises(PruningError):
        Pattern(3, 3, 10, 1)
    with pytest.raises(PruningError):
        Pattern(3, 3, 4, 0)


def test_library_identical_kernels(rng):
    k = rng.standard_normal((3, 3))
    W = np.broadcast_to(k, (5, 4, 3, 3))
    lib = select_pattern_library(W, 3, 3, 4, 1)
    top = sorted(np.argsort(-np.abs(k).ravel(), kind="stable")[:4].tolist())
    assert lib.positions() == [top]


def test_library_full_mask():
    W = np.random.default_rng(0).standard_normal((2, 2, 3, 3))
    lib = select_pattern_library(W, 3, 3, 9, 1)
    assert lib.masks.all() and len(lib) == 1


def test_library_two_populations_in_frequency_order(rng):
    a, b = [0, 2, 6, 8], [1, 3, 5, 7]
    kernels = []
    for i in range(10):
        mask = a if i < 7 else b
        k = 0.01 * rng.random(9)
        k[mask] += 1 + rng.random(4)
        kernels.append(k)
    W = np.array(kernels).reshape(5, 2, 3, 3)
    lib = select_pattern_library(W, 3, 3, 4, 2)
    # exhaustive frequency count oracle
    counts = {}
    for k in kernels:
        m = tuple(sorted(np.argsort(-np.abs(k))[:4].tolist()))
        counts[m] = counts.get(m, 0) + 1
    expected = [list(m) for m, _ in sorted(counts.items(), key=lambda kv: -kv[1])][:2]
    assert lib.positions() == expected == [a, b]


def test_library_pads_and_rejects_impossible():
    W = np.ones((1, 1, 2, 2))
    lib = select_pattern_library(W, 2, 2, 2, 6)
    assert len(lib) == 6 == math.comb(4, 2)
    with pytest.raises(PruningError):
        select_pattern_library(W, 2, 2, 2, 7)


def test_library_deterministic(rng):
    W = rng.standard_normal((6, 6, 3, 3))
    assert select_pattern_library(W, 3, 3, 4, 5) == select_pattern_library(W.copy(), 3, 3, 4, 5)


@pytest.mark.parametrize("s", [
    Column(0.5), Filter(0.3), Channel(0.5), Connectivity(0.4),
    Pattern(3, 3, 4, 6), Pattern(3, 3, 2, 3, keep_ratio=0.5),
])
def test_structure_dict_round_trip(s, rng):
    d = structure_to_dict(s)
    back = structure_from_dict(d)
    assert back == s
    if isinstance(s, Pattern):
        s2 = Pattern(3, 3, s.retained_per_kernel, s.library_size, s.keep_ratio,
                     select_pattern_library(rng.standard_normal((2, 2, 3, 3)), 3, 3,
                                            s.retained_per_kernel, s.library_size))
        assert structure_from_dict(structure_to_dict(s2)).library == s2.library


def test_sparsity_report_examples(rng):
    W = rng.standard_normal((4, 4)).astype(np.float32)
    assert sparsity_report({0: W}, {0: Column(0.5)})[0]["satisfies"] is False
    P = project(W, Column(0.5))
    r = sparsity_report({0: P}, {0: Column(0.5)})[0]
    assert r == {"retained_fraction": 0.5, "satisfies": True}


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite),
       st.floats(0.05, 1.0))
@example(np.array([[1.1, 1.1, 32.0, 1.1, 1.1]], np.float32), 0.5)  # four-way tie
def test_column_projection_optimal_and_idempotent(W, ratio):
    s = Column(ratio)
    P = project(W, s)
    assert np.array_equal(project(P, s), P)
    scores = (W.astype(np.float64) ** 2).sum(axis=0)
    k = keep_count(ratio, W.shape[1])
    kept = support(W, s).kept.tolist()
    assert math.fsum(scores[kept]) == math.fsum(scores[brute_force_kept(scores, k)])
    # no feasible V with the same support size is closer
    for combo in itertools.combinations(range(W.shape[1]), k):
        V = np.zeros_like(W)
        V[:, combo] = W[:, combo]
        assert np.linalg.norm(W - P) <= np.linalg.norm(W - V)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (3, 4, 3, 3), elements=finite), st.integers(-6, 6),
       st.sampled_from(["column", "filter", "channel", "connectivity", "pattern"]))
def test_selection_invariant_under_positive_scaling(W, e, kind):
    s = {"column": Column(0.5), "filter": Filter(0.5), "channel": Channel(0.5),
         "connectivity": Connectivity(0.5), "pattern": Pattern(3, 3, 4, 4, keep_ratio=0.5)}[kind]
    c = np.float32(2.0 ** e)
    a, b = support(W, s), support(c * W, s)
    assert np.array_equal(a.kept, b.kept)
    assert np.array_equal(a.mask, b.mask)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (4, 3, 3, 3), elements=finite), st.floats(0.05, 1.0))
def test_conv_projections_idempotent(W, ratio):
    for s in (Column(ratio), Filter(ratio), Channel(ratio), Connectivity(ratio),
              Pattern(3, 3, 4, 3, keep_ratio=ratio)):
        P = project(W, s)
        if isinstance(s, Pattern):
            s = Pattern(3, 3, 4, 3, ratio, select_pattern_library(W, 3, 3, 4, 3))
            P = project(W, s)
        assert np.array_equal(project(P, s), P)
