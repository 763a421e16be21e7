"""A small fully connected quantile regression network with manual backprop."""
from __future__ import annotations

from typing import Sequence

import numpy as np


class TrainingDivergedError(FloatingPointError):
    pass


def pinball_loss(pred, target, levels) -> float:
    """Mean over samples and levels of q*(y - yhat)^+ + (1 - q)*(yhat - y)^+."""
    pred = np.asarray(pred, dtype=float)
    q = np.asarray(levels, dtype=float)
    y = np.asarray(target, dtype=float)
    if pred.ndim == 1:
        pred = pred[None, :]
        y = np.atleast_1d(y)
    diff = y[:, None] - pred
    return float(np.mean(np.maximum(q * diff, (q - 1.0) * diff)))


def pinball_grad(pred, target, levels) -> np.ndarray:
    """Gradient of :func:`pinball_loss` with respect to ``pred`` (N, Q)."""
    q = np.asarray(levels, dtype=float)
    diff = np.asarray(target, dtype=float)[:, None] - pred
    return np.where(diff > 0, -q, 1.0 - q) / pred.size


_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(float)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
}


class QuantileNet:
    """Feed-forward network with one output per quantile level.

    Parameters are stored as ``[W1, b1, W2, b2, ...]`` with ``W`` of shape
    (fan_in, fan_out). Adam moment estimates live on the instance.
    """

    def __init__(self, sizes: Sequence[int], levels=(0.1, 0.5, 0.9), seed: int = 0,
                 activation: str = "relu"):
        levels = tuple(float(q) for q in levels)
        if any(not 0.0 < q < 1.0 for q in levels) or len(set(levels)) != len(levels):
            raise ValueError("quantile levels must be distinct and in (0, 1)")
        if sizes[-1] != len(levels):
            raise ValueError("output layer needs one unit per quantile level")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.levels = np.array(levels)
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.step_count = 0

    def copy_params(self):
        return [p.copy() for p in self.params]

    def _forward(self, x):
        act, _ = _ACTIVATIONS[self.activation]
        a = np.asarray(x, dtype=float)
        cache = [(None, a)]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = a @ self.params[2 * i] + self.params[2 * i + 1]
            a = act(z) if i < n_layers - 1 else z
            cache.append((z, a))
        return a, cache

    def forward(self, x) -> np.ndarray:
        return self._forward(x)[0]

    def predict_quantiles(self, x) -> np.ndarray:
        """Forward pass with heads sorted so quantiles never cross."""
        return np.sort(self.forward(x), axis=1)

    def loss(self, x, y) -> float:
        return pinball_loss(self.forward(x), y, self.levels)

    def backward(self, x, y):
        """Return ``(loss, grads)`` for the mean pinball loss on (x, y)."""
        _, dact = _ACTIVATIONS[self.activation]
        out, cache = self._forward(x)
        loss = pinball_loss(out, y, self.levels)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss {loss} after {self.step_count} steps; "
                f"max |param| = {max(float(np.abs(p).max()) for p in self.params):.3g}")
        delta = pinball_grad(out, y, self.levels)
        grads = [None] * len(self.params)
        n_layers = len(self.params) // 2
        for i in reversed(range(n_layers)):
            a_prev = cache[i][1]
            grads[2 * i] = a_prev.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                z_prev, a_prev_act = cache[i]
                delta = (delta @ self.params[2 * i].T) * dact(z_prev, a_prev_act)
        return loss, grads

    def adam_step(self, grads, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8):
        self.step_count += 1
        t = self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        return self


def train(net: QuantileNet, x, y, x_val=None, y_val=None, lr: float = 1e-3,
          epochs: int = 300, batch_size: int = 64, patience: int = 20, seed: int = 0):
    """Minibatch Adam with early stopping on validation pinball loss.

    Restores the best-validation parameters. Returns the per-epoch history
    of (train_loss, val_loss).
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    has_val = x_val is not None and len(x_val) > 0
    best, best_params, wait = np.inf, net.copy_params(), 0
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            _, grads = net.backward(x[idx], y[idx])
            net.adam_step(grads, lr)
        tr = net.loss(x, y)
        va = net.loss(x_val, y_val) if has_val else tr
        if not np.isfinite(tr):
            raise TrainingDivergedError(f"non-finite training loss after {net.step_count} steps")
        history.append((tr, va))
        if va < best - 1e-12:
            best, best_params, wait = va, net.copy_params(), 0
        else:
            wait += 1
            if wait >= patience:
                break
    net.params = best_params
    return history
