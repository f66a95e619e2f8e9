"""Compact storage for column- and pattern-pruned weights, against CSR."""
import numpy as np

from structsparse import Pattern, project, select_pattern_library
from structsparse.formats import (decode_column, decode_pattern, encode_column, encode_csr,
                                  encode_pattern, storage_bytes)

rng = np.random.default_rng(1)

W = rng.standard_normal((64, 64)).astype(np.float32)
kept = np.sort(rng.choice(64, 16, replace=False))
W[:, np.setdiff1d(np.arange(64), kept)] = 0
col, csr = encode_column(W, kept), encode_csr(W)
assert np.array_equal(decode_column(col), W)
print(f"column compact {storage_bytes(col)} B, CSR {storage_bytes(csr)} B,"
      f" ratio {storage_bytes(csr) / storage_bytes(col):.2f}")

K = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
lib = select_pattern_library(K, 3, 3, 4, 8)
P = project(K, Pattern(3, 3, 4, 8, keep_ratio=0.5, library=lib))
packed = encode_pattern(P, lib)
assert np.array_equal(decode_pattern(packed), P)
print(f"pattern library: {len(lib)} masks, e.g. positions {lib.positions()[0]}")
print(f"pattern packed {storage_bytes(packed)} B, CSR {storage_bytes(encode_csr(P.reshape(16, -1)))} B,"
      f" dense {P.nbytes} B")
