"""ADMM column pruning of a small least-squares layer.

Compare against simply projecting the starting weights and finetuning the
survivors for the same number of gradient steps.
"""
import numpy as np

from structsparse import AdmmConfig, Column, PruneTask, admm_prune, project
from structsparse.objectives import least_squares

rng = np.random.default_rng(7)
X = rng.standard_normal((16, 4))
Y = X @ rng.standard_normal((4, 4)) + 0.1 * rng.standard_normal((16, 4))
W0 = 0.1 * rng.standard_normal((4, 4))
f = least_squares(X, Y)

# rho on the order of the loss curvature keeps the kept set from flip-flopping
cfg = AdmmConfig(rho=float(np.linalg.eigvalsh(2 * X.T @ X)[-1]))
res = admm_prune(PruneTask({0: W0}, {0: Column(0.5)}, f), cfg)
print("residual ||W - Z|| per iteration:")
print(np.round(res.residuals[0], 4))
print("pruned weights:\n", np.round(res.weights[0], 3))

W = project(W0, Column(0.5))
mask = W != 0
for _ in range(cfg.admm_iters * cfg.primal_steps + cfg.finetune_steps):
    W = W - cfg.step_size * f({0: W})[1][0] * mask
print(f"ADMM loss {res.final_loss:.4f}   one-shot + finetune {f({0: W})[0]:.4f}")
