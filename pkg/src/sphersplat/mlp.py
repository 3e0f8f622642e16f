"""Dense tiny MLP with analytic gradients.

Parameters are stored float32 (the serialized form); all math runs in
float64 so gradient checks against central finite differences hold to
~1e-6 relative. Hidden layers use a rectifier, the output layer is linear.
"""

from __future__ import annotations

import numpy as np

from . import rng
from .errors import DimensionMismatchError


class TinyMLP:
    """Fully-connected net defined by `sizes = [in, h1, ..., out]`.

    weights[i] has shape (sizes[i+1], sizes[i]) row-major, biases[i] has
    shape (sizes[i+1],).
    """

    def __init__(self, sizes, weights, biases):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise DimensionMismatchError("need at least input and output sizes")
        if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
            raise DimensionMismatchError("one weight/bias pair per layer required")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise DimensionMismatchError(
                    f"layer {i}: expected {(sizes[i + 1], sizes[i])}, got {w.shape}"
                )
        if not all(np.all(np.isfinite(w)) for w in weights):
            raise ValueError("non-finite weights")
        self.sizes = sizes
        self.weights = [np.asarray(w, dtype=np.float32) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float32) for b in biases]

    # -- construction -------------------------------------------------------

    @classmethod
    def seeded(cls, sizes, seed: int, scale: float = 0.01, out_bias=None) -> "TinyMLP":
        """Deterministic init: symmetric uniform weights scaled by 1/sqrt(fan_in).

        `out_bias` optionally fixes the output-layer bias vector (used to
        anchor decoder heads at sensible operating points).
        """
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            fan_in = sizes[i]
            w = rng.symmetric(
                rng.derive_seed(seed, f"w{i}"), (sizes[i + 1], sizes[i]), scale / np.sqrt(fan_in)
            )
            weights.append(w.astype(np.float32))
            biases.append(np.zeros(sizes[i + 1], dtype=np.float32))
        if out_bias is not None:
            biases[-1] = np.asarray(out_bias, dtype=np.float32).copy()
            if biases[-1].shape != (sizes[-1],):
                raise DimensionMismatchError("out_bias shape mismatch")
        return cls(sizes, weights, biases)

    @classmethod
    def zeros(cls, sizes) -> "TinyMLP":
        weights = [np.zeros((sizes[i + 1], sizes[i]), np.float32) for i in range(len(sizes) - 1)]
        biases = [np.zeros(sizes[i + 1], np.float32) for i in range(len(sizes) - 1)]
        return cls(sizes, weights, biases)

    @classmethod
    def identity_prefix(cls, in_dim: int, out_dim: int) -> "TinyMLP":
        """Single linear layer copying the first `out_dim` input components."""
        w = np.zeros((out_dim, in_dim), np.float32)
        w[: min(in_dim, out_dim), : min(in_dim, out_dim)] = np.eye(min(in_dim, out_dim))
        return cls([in_dim, out_dim], [w], [np.zeros(out_dim, np.float32)])

    # -- inference ----------------------------------------------------------

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def _check_input(self, x: np.ndarray):
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatchError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")

    def forward(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._check_input(x)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T.astype(np.float64) + b.astype(np.float64)
            if i != last:
                h = np.maximum(h, 0.0)
        return h

    def forward_cached(self, x):
        """Forward pass retaining pre-activations for the backward pass."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._check_input(x)
        acts = [x]  # post-activation inputs to each layer
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T.astype(np.float64) + b.astype(np.float64)
            pre.append(z)
            h = np.maximum(z, 0.0) if i != last else z
            acts.append(h)
        return h, (acts, pre)

    def grad(self, x, upstream, cache=None):
        """Reverse-mode gradients.

        Returns ((dW list, db list), dX) for upstream = dL/d(output) of
        shape (N, out_dim). Summation runs over the batch axis in index
        order, so results are deterministic.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if upstream.shape != (x.shape[0], self.out_dim):
            raise DimensionMismatchError("upstream shape mismatch")
        if cache is None:
            _, cache = self.forward_cached(x)
        acts, pre = cache

        d_w = [None] * len(self.weights)
        d_b = [None] * len(self.weights)
        delta = upstream
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                delta = delta * (pre[i] > 0)
            d_w[i] = delta.T @ acts[i]
            d_b[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].astype(np.float64)
        return (d_w, d_b), delta

    # -- parameter plumbing --------------------------------------------------

    def flat_parameters(self) -> np.ndarray:
        """Concatenated float32 view [W0, b0, W1, b1, ...] used for storage."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b)
        return np.concatenate(parts).astype(np.float32)

    @classmethod
    def from_flat(cls, sizes, flat) -> "TinyMLP":
        flat = np.asarray(flat, dtype=np.float32)
        weights, biases, off = [], [], 0
        for i in range(len(sizes) - 1):
            n_w = sizes[i + 1] * sizes[i]
            weights.append(flat[off : off + n_w].reshape(sizes[i + 1], sizes[i]).copy())
            off += n_w
            biases.append(flat[off : off + sizes[i + 1]].copy())
            off += sizes[i + 1]
        if off != flat.size:
            raise DimensionMismatchError(f"flat parameter size {flat.size}, expected {off}")
        return cls(sizes, weights, biases)

    def copy(self) -> "TinyMLP":
        return TinyMLP(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])
