import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structsparse.formats import (
    SENTINEL,
    CompactColumnMatrix,
    FormatError,
    decode_column,
    decode_csr,
    decode_pattern,
    decode_rows,
    encode_column,
    encode_csr,
    encode_pattern,
    encode_rows,
    encoding_tag,
    from_bytes,
    storage_bytes,
    to_bytes,
)
from structsparse.pruning import Pattern, PatternLibrary, project, select_pattern_library


def bits(a):
    return np.ascontiguousarray(a, np.float32).view(np.uint32)


def test_full_keep_values_bit_exact(rng):
    W = rng.standard_normal((3, 5)).astype(np.float32)
    c = encode_column(W, range(5))
    assert c.kept_cols.tolist() == list(range(5))
    assert np.array_equal(bits(c.values), bits(W))
    assert np.array_equal(bits(decode_column(c)), bits(W))


def test_column_gather_example():
    W = np.array([[3, 0, 0, 2], [3, 0, 0, 2]], np.float32)
    c = encode_column(W, [0, 3])
    assert c.values.tolist() == [[3, 2], [3, 2]]
    assert np.array_equal(decode_column(c), W)


def test_stray_value_names_position():
    W = np.array([[3, 0, 0, 2], [3, 0, 1e-9, 2]], np.float32)
    with pytest.raises(FormatError, match=r"\(1, 2\)"):
        encode_column(W, [0, 3])


def test_empty_kept_set_decodes_to_zeros():
    c = encode_column(np.zeros((4, 6), np.float32), [])
    assert c.k == 0 and storage_bytes(c) == 12
    assert not decode_column(c).any() and decode_column(c).shape == (4, 6)


def test_kept_cols_validation():
    W = np.zeros((2, 4), np.float32)
    for bad in ([1, 1], [3, 2], [4], [-1]):
        with pytest.raises(FormatError):
            encode_column(W, bad)
    with pytest.raises(FormatError):
        CompactColumnMatrix(2, 4, np.array([0, 1]), np.zeros((2, 3), np.float32))


def test_storage_worked_example(rng):
    W = np.zeros((64, 64), np.float32)
    kept = np.sort(rng.choice(64, 16, replace=False))
    W[:, kept] = rng.standard_normal((64, 16)) + 5  # no accidental zeros
    c, csr = encode_column(W, kept), encode_csr(W)
    assert storage_bytes(c) == 4096 + 64 + 12 == 4172
    assert storage_bytes(csr) == 4096 + 4096 + 260 + 8 == 8460
    assert storage_bytes(csr) / storage_bytes(c) == pytest.approx(2.03, abs=0.005)


def test_full_keep_costs_index_overhead(rng):
    W = rng.standard_normal((8, 8)).astype(np.float32)
    c = encode_column(W, range(8))
    assert storage_bytes(c) == 4 * W.size + 4 * 8 + 12


def test_rows_are_transposed_columns(rng):
    W = np.zeros((6, 5), np.float32)
    W[[1, 4]] = rng.standard_normal((2, 5))
    r = encode_rows(W, [1, 4])
    assert r.shape == (6, 5) and encoding_tag(r) == 3
    assert np.array_equal(decode_rows(r), W)
    with pytest.raises(FormatError):
        encode_rows(W, [1])


def _lib():
    return PatternLibrary.from_positions([[0, 1, 3, 4], [4, 5, 7, 8]], 3, 3)


def test_pattern_all_zero_is_all_sentinel():
    p = encode_pattern(np.zeros((2, 2, 3, 3), np.float32), _lib())
    assert (p.pattern_ids == SENTINEL).all() and p.values.size == 0
    assert not decode_pattern(p).any()


def test_pattern_values_length_and_round_trip(rng):
    lib = _lib()
    W = np.zeros((2, 2, 3, 3), np.float32)
    for o in range(2):
        for i in range(2):
            m = lib.masks[(o + i) % 2]
            W[o, i][m] = rng.standard_normal(4) + 3
    p = encode_pattern(W, lib)
    assert p.values.size == 16 and p.surviving == 4
    assert np.array_equal(bits(decode_pattern(p)), bits(W))
    assert p.pattern_ids.tolist() == [[0, 1], [1, 0]]


def test_pattern_rejects_uncovered_kernel():
    W = np.zeros((1, 1, 3, 3), np.float32)
    W[0, 0].flat[[0, 1, 3, 4, 8]] = 1.0
    with pytest.raises(FormatError, match=r"\(0, 0\)"):
        encode_pattern(W, _lib())


def test_pattern_explicit_ids(rng):
    lib = _lib()
    W = np.zeros((1, 2, 3, 3), np.float32)
    W[0, 0].flat[[0, 1, 3, 4]] = [1, 2, 3, 4]
    p = encode_pattern(W, lib, pattern_ids=[[0, 1]])
    assert p.pattern_ids.tolist() == [[0, 1]]  # structural id survives an all-zero kernel
    assert p.values.tolist() == [1, 2, 3, 4, 0, 0, 0, 0]
    with pytest.raises(FormatError):
        encode_pattern(W, lib, pattern_ids=[[1, -1]])
    with pytest.raises(FormatError):
        encode_pattern(W, lib, pattern_ids=[[2, 0]])


def test_csr_invariants(rng):
    W = rng.standard_normal((5, 7)).astype(np.float32)
    W[W < 0.3] = 0
    c = encode_csr(W)
    assert c.row_ptr[0] == 0 and c.row_ptr[-1] == c.nnz
    assert np.all(np.diff(c.row_ptr.astype(int)) >= 0)
    for r in range(5):
        cols = c.col_idx[c.row_ptr[r]:c.row_ptr[r + 1]]
        assert np.all(np.diff(cols.astype(int)) > 0)
    assert np.array_equal(decode_csr(c), W)
    assert len(to_bytes(c)) == storage_bytes(c)


def test_storage_bytes_matches_serialization(rng):
    W = project(rng.standard_normal((3, 4, 3, 3)).astype(np.float32), Pattern(3, 3, 4, 3))
    lib = select_pattern_library(rng.standard_normal((3, 4, 3, 3)), 3, 3, 4, 3)
    Wp = project(W, Pattern(3, 3, 4, 3, library=lib))
    objs = [encode_column(np.zeros((3, 5), np.float32), []), encode_pattern(Wp, lib),
            np.ones((2, 3, 4), np.float32), encode_rows(np.eye(3, dtype=np.float32), [0, 1, 2])]
    for obj in objs:
        buf = to_bytes(obj)
        assert len(buf) == storage_bytes(obj)
        back = from_bytes(encoding_tag(obj), buf)
        assert type(back) is type(obj)


def test_from_bytes_rejects_bad_payloads():
    buf = to_bytes(encode_column(np.eye(2, dtype=np.float32), [0, 1]))
    with pytest.raises(FormatError):
        from_bytes(1, buf[:-1])
    with pytest.raises(FormatError):
        from_bytes(1, buf + b"\0")
    with pytest.raises(FormatError):
        from_bytes(9, buf)


@st.composite
def column_pruned(draw):
    m = draw(st.integers(1, 12))
    n = draw(st.integers(1, 12))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    k = draw(st.integers(0, n))
    kept = np.sort(rng.choice(n, k, replace=False))
    W = np.zeros((m, n), np.float32)
    W[:, kept] = rng.standard_normal((m, k)).astype(np.float32)
    return W, kept


@settings(max_examples=100, deadline=None)
@given(column_pruned())
def test_column_round_trip_bytes(case):
    W, kept = case
    c = encode_column(W, kept)
    back = from_bytes(1, to_bytes(c))
    assert np.array_equal(bits(decode_column(back)), bits(W))


@settings(max_examples=100, deadline=None)
@given(column_pruned(), st.integers(0, 10_000))
def test_perturbed_matrix_rejected(case, where):
    W, kept = case
    pruned = np.setdiff1d(np.arange(W.shape[1]), kept)
    if pruned.size == 0:
        return
    W = W.copy()
    W[where % W.shape[0], pruned[where % pruned.size]] = 1e-30
    with pytest.raises(FormatError):
        encode_column(W, kept)


@settings(max_examples=200, deadline=None)
@given(st.integers(8, 256), st.integers(2, 256), st.data())
def test_compact_dominates_csr(m, n, data):
    k = data.draw(st.integers(0, n // 2))
    # CSR counts only nonzeros; a dense kept block is its worst case for the comparison
    compact = 4 * m * k + 4 * k + 12
    csr = 8 * m * k + 4 * (m + 1) + 8
    assert compact < csr
    W = np.zeros((m, n), np.float32)
    W[:, :k] = 1.0
    assert storage_bytes(encode_column(W, range(k))) == compact
    assert storage_bytes(encode_csr(W)) == csr
