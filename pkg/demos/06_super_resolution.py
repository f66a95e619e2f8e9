"""Upscale a synthetic image with a pattern-pruned sr-mini and save both as PPM."""
import tempfile
from pathlib import Path

import numpy as np

from structsparse import PruneConfig, compile_graph, prune_graph, run_graph
from structsparse.imageio import write_ppm
from structsparse.zoo import generate

g = generate("sr-mini", seed=42, size=32)
cfg = PruneConfig.from_dict({"default": {"type": "pattern", "retained_per_kernel": 4,
                                         "library_size": 8, "keep_ratio": 0.5}})
pruned, report = prune_graph(g, cfg)
compiled, plan = compile_graph(pruned)

yy, xx = np.mgrid[0:32, 0:32] / 31.0
img = np.stack([xx, yy, 0.5 + 0.5 * np.sin(6 * xx * yy)])[None].astype(np.float32)
out, flops = run_graph(compiled, plan, img)
big = out[compiled.output_ids[0]]
print("input", img.shape, "-> output", big.shape, f"({flops.total:,} MACs)")

d = Path(tempfile.mkdtemp())
write_ppm(d / "in.ppm", img[0])
write_ppm(d / "out.ppm", big[0])
print("wrote", d / "in.ppm", "and", d / "out.ppm")
