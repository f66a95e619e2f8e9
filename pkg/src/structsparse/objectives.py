"""Differentiable objectives for `admm_prune`.

Each factory returns a callback ``f(weights) -> (loss, grads)`` over a dict of
layer id to weight array.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .lowering import im2col

__all__ = ["least_squares", "LayerReconstruction", "ToyCNN", "toy_classification_data"]


def least_squares(X, Y, layer: int = 0):
    """``f(W) = ||X W - Y||_F^2`` for a single layer."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)

    def f(weights: Mapping[int, np.ndarray]):
        R = X @ weights[layer] - Y
        return float(np.sum(R * R)), {layer: 2.0 * X.T @ R}

    return f


class LayerReconstruction:
    """Sum over layers of ``||W_i X_i - W0_i X_i||^2 / lambda_max(X_i X_i^T)``.

    ``X_i`` is the lowered input of layer ``i`` (im2col columns for conv,
    feature columns for dense) on calibration data; ``W0_i`` the original
    weights. Only the Gram matrices are kept, so evaluation cost does not
    depend on the calibration size. The normalization makes the Hessian's
    largest eigenvalue 2 for every layer.
    """

    def __init__(self, original: Mapping[int, np.ndarray], lowered: Mapping[int, np.ndarray]):
        self.shapes = {i: np.shape(w) for i, w in original.items()}
        self.gram, self.cross, self.const, self.scale = {}, {}, {}, {}
        for i, w0 in original.items():
            W0 = np.asarray(w0, np.float64).reshape(self.shapes[i][0], -1)
            X = np.asarray(lowered[i], np.float64)
            G = X @ X.T
            lam = float(np.linalg.eigvalsh(G)[-1]) if G.size else 0.0
            self.scale[i] = 1.0 / lam if lam > 0 else 1.0
            self.gram[i] = G
            self.cross[i] = W0 @ G
            self.const[i] = float(np.sum((W0 @ G) * W0))

    def __call__(self, weights: Mapping[int, np.ndarray]):
        total = 0.0
        grads = {}
        for i, G in self.gram.items():
            W = np.asarray(weights[i], np.float64).reshape(self.shapes[i][0], -1)
            WG = W @ G
            total += self.scale[i] * (np.sum(WG * W) - 2 * np.sum(W * self.cross[i]) + self.const[i])
            g = 2.0 * self.scale[i] * (WG - self.cross[i])
            grads[i] = g.reshape(self.shapes[i]).astype(np.result_type(weights[i], np.float32))
        return float(max(total, 0.0)), grads

    @staticmethod
    def lower(node_kind: str, x: np.ndarray, kernel=(1, 1), stride=1, pad=0) -> np.ndarray:
        """Lowered layer input: im2col columns (conv) or feature columns (dense)."""
        if node_kind == "Dense":
            return x.reshape(x.shape[0], -1).T
        return np.concatenate([im2col(xb, kernel[0], kernel[1], stride, pad) for xb in x], axis=1)


def toy_classification_data(n: int = 64, classes: int = 3, size: int = 8, noise: float = 0.5,
                            seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Single-channel images drawn around one random template per class."""
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((classes, 1, size, size))
    labels = np.arange(n) % classes
    x = templates[labels] + noise * rng.standard_normal((n, 1, size, size))
    return x, labels


class ToyCNN:
    """Two-layer classifier: 3x3 conv (pad 1) + ReLU + global average pool + dense.

    Loss is mean softmax cross-entropy. Weights are ``{conv_id: (C, 1, 3, 3),
    dense_id: (classes, C)}``.
    """

    def __init__(self, x, labels, classes: int, conv_id: int = 0, dense_id: int = 1):
        x = np.asarray(x, np.float64)
        self.n = x.shape[0]
        # float64 lowering; the engine's im2col is float32 only
        self.cols = np.stack([self._im2col64(xb) for xb in x])
        self.onehot = np.eye(classes)[np.asarray(labels)]
        self.conv_id, self.dense_id = conv_id, dense_id

    @staticmethod
    def _im2col64(x):
        c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        cols = np.empty((c, 3, 3, h * w))
        for i in range(3):
            for j in range(3):
                cols[:, i, j] = xp[:, i:i + h, j:j + w].reshape(c, -1)
        return cols.reshape(c * 9, h * w)

    def init_weights(self, channels: int, seed: int = 0) -> dict[int, np.ndarray]:
        rng = np.random.default_rng(seed)
        k = self.onehot.shape[1]
        return {
            self.conv_id: rng.standard_normal((channels, 1, 3, 3)) * np.sqrt(2.0 / 9),
            self.dense_id: rng.standard_normal((k, channels)) * np.sqrt(1.0 / channels),
        }

    def forward(self, weights):
        W1 = np.asarray(weights[self.conv_id], np.float64)
        W2 = np.asarray(weights[self.dense_id], np.float64)
        Z = np.einsum("ck,nkp->ncp", W1.reshape(W1.shape[0], -1), self.cols)
        A = np.maximum(Z, 0.0)
        g = A.mean(axis=2)
        logits = g @ W2.T
        return Z, g, logits

    def accuracy(self, weights) -> float:
        return float(np.mean(self.forward(weights)[2].argmax(axis=1) == self.onehot.argmax(axis=1)))

    def __call__(self, weights):
        W1 = np.asarray(weights[self.conv_id], np.float64)
        W2 = np.asarray(weights[self.dense_id], np.float64)
        Z, g, logits = self.forward(weights)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -float(np.sum(self.onehot * logp)) / self.n
        dlogits = (np.exp(logp) - self.onehot) / self.n
        dW2 = dlogits.T @ g
        dg = dlogits @ W2
        dZ = (dg[:, :, None] / Z.shape[2]) * (Z > 0)
        dW1 = np.einsum("ncp,nkp->ck", dZ, self.cols).reshape(W1.shape)
        return loss, {self.conv_id: dW1, self.dense_id: dW2}
