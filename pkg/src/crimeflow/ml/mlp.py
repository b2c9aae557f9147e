"""Feed-forward ReLU network trained with ADADELTA on squared loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass
class MlpFit:
    layer_sizes: list
    weights: list
    biases: list
    epochs_run: int
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    losses: list = field(default_factory=list)

    def forward(self, z: np.ndarray) -> np.ndarray:
        """Network output on already-standardised inputs."""
        return forward(self.weights, self.biases, z)[-1].ravel()

    def predict(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.x_mean) / self.x_scale
        return self.y_mean + self.y_scale * self.forward(z)

    def linear_coefficients(self) -> tuple[np.ndarray, float]:
        """Slope and intercept on the original scale of a network without hidden layers."""
        if len(self.weights) != 1:
            raise ValueError("only defined for networks without hidden layers")
        w = self.weights[0].ravel() * self.y_scale / self.x_scale
        b = self.y_mean + self.y_scale * self.biases[0][0] - float(w @ self.x_mean)
        return w, b


def forward(weights, biases, z):
    acts = [z]
    h = z
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def loss_and_grad(weights, biases, z, t):
    """Half mean squared error and its gradients by backpropagation."""
    acts = forward(weights, biases, z)
    out = acts[-1].ravel()
    diff = out - t
    n = len(t)
    loss = 0.5 * float(diff @ diff) / n
    delta = (diff / n)[:, None]
    gw, gb = [None] * len(weights), [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ weights[i].T) * (acts[i] > 0)
    return loss, gw, gb


def init_params(sizes: Sequence[int], rng) -> tuple[list, list]:
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def fit_mlp(x, y, hidden: Sequence[int] = (64,), epochs: int = 10, lr_decay: float = 0.95,
            rng=None, batch_size: Optional[int] = 32, epsilon: float = 1e-6,
            scale_target: bool = True) -> MlpFit:
    """Train on z-scored inputs (training statistics) with per-parameter ADADELTA steps.

    ``lr_decay`` is the ADADELTA decay of the squared-gradient and
    squared-update averages; ``batch_size=None`` trains full-batch.
    """
    if not 0 < lr_decay < 1:
        raise ValueError("lr_decay must lie in (0, 1)")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    rng = np.random.default_rng(rng)
    x_mean = x.mean(axis=0)
    x_scale = x.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    z = (x - x_mean) / x_scale
    y_mean, y_scale = (float(y.mean()), float(y.std()) or 1.0) if scale_target else (0.0, 1.0)
    t = (y - y_mean) / y_scale
    sizes = [x.shape[1], *hidden, 1]
    weights, biases = init_params(sizes, rng)
    params = weights + biases
    eg = [np.zeros_like(p) for p in params]
    edx = [np.zeros_like(p) for p in params]
    n = len(y)
    bs = n if batch_size is None else min(batch_size, n)
    losses = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, gw, gb = loss_and_grad(weights, biases, z[idx], t[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"MLP loss became {loss} in epoch {epoch}")
            for p, g, a, d in zip(params, gw + gb, eg, edx):
                a *= lr_decay
                a += (1 - lr_decay) * g * g
                step = -np.sqrt(d + epsilon) / np.sqrt(a + epsilon) * g
                d *= lr_decay
                d += (1 - lr_decay) * step * step
                p += step
        losses.append(loss_and_grad(weights, biases, z, t)[0])
    return MlpFit(sizes, weights, biases, epochs, x_mean, x_scale, y_mean, y_scale, losses)
