"""Row reordering for a pattern-pruned layer and its effect on worker balance."""
import numpy as np

from structsparse import Pattern, project, select_pattern_library
from structsparse.formats import encode_pattern
from structsparse.kernels import conv2d_pattern_reordered, dense_conv2d, max_rel_error, pattern_layout
from structsparse.reorder import contiguous_split_stats, load_balance_stats

rng = np.random.default_rng(3)
K = rng.standard_normal((32, 2, 3, 3)).astype(np.float32)
lib = select_pattern_library(K, 3, 3, 4, 2)
P = project(K, Pattern(3, 3, 4, 2, keep_ratio=0.6, library=lib))
packed = encode_pattern(P, lib)

layout = pattern_layout(packed)
print(f"{len(layout.groups)} row groups, sizes {[g.rows for g in layout.groups][:8]} ...")
nnz = np.count_nonzero(P.reshape(32, -1), axis=1)
for workers in (2, 4, 8):
    lb = load_balance_stats(layout, workers)
    cs = contiguous_split_stats(nnz, workers)
    print(f"{workers} workers: reordered imbalance {lb.imbalance:.3f}, contiguous {cs.imbalance:.3f}")

x = rng.standard_normal((1, 2, 12, 12)).astype(np.float32)
y = conv2d_pattern_reordered(x, packed, layout, pad=1, workers=4)
ref = dense_conv2d(x, P, pad=1)
print(f"max relative error vs dense {max_rel_error(y, ref):.2e}")
