"""Gradient-trained families: one-vs-rest logistic regression and a ReLU MLP.

Parameters are lists of arrays so one Adam loop serves both. The
``*_loss_grad`` functions return the exact mini-batch objective and its
gradient; the L2 penalty is scaled by the full training-set size so that
mini-batch gradients are unbiased estimates of the full-batch one.
"""

from __future__ import annotations

import numpy as np


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_scores(params, X):
    W, b = params
    return X @ W.T + b


def logistic_loss_grad(params, X, Y, C, n_total=None):
    """Sum over classes of binary cross-entropy, averaged over rows, plus ``|W|^2 / (2 C n)``."""
    W, b = params
    n = X.shape[0]
    n_total = n_total or n
    Z = X @ W.T + b
    loss = float(np.sum(np.logaddexp(0.0, Z) - Y * Z) / n + np.sum(W * W) / (2.0 * C * n_total))
    dZ = (_sigmoid(Z) - Y) / n
    gW = dZ.T @ X + W / (C * n_total)
    gb = dZ.sum(axis=0)
    return loss, [gW, gb]


def init_logistic(n_classes, n_features):
    return [np.zeros((n_classes, n_features)), np.zeros(n_classes)]


def init_mlp(rng, n_in, hidden, n_out):
    sizes = [n_in, *hidden, n_out]
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        params.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(b, a)))
        params.append(np.zeros(b))
    return params


def mlp_scores(params, X):
    h = X
    n_layers = len(params) // 2
    for layer in range(n_layers):
        W, b = params[2 * layer], params[2 * layer + 1]
        h = h @ W.T + b
        if layer < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def mlp_loss_grad(params, X, y, alpha, n_total=None):
    """Softmax cross-entropy (mean over rows) plus ``alpha / (2 n) * sum |W|^2``."""
    n = X.shape[0]
    n_total = n_total or n
    n_layers = len(params) // 2
    acts = [X]
    pre = []
    h = X
    for layer in range(n_layers):
        W, b = params[2 * layer], params[2 * layer + 1]
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if layer < n_layers - 1 else z
        acts.append(h)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - shifted[np.arange(n), y]))
    loss += alpha / (2.0 * n_total) * sum(float(np.sum(params[2 * l] ** 2)) for l in range(n_layers))
    prob = np.exp(shifted - logsum[:, None])
    prob[np.arange(n), y] -= 1.0
    delta = prob / n
    grads = [None] * len(params)
    for layer in reversed(range(n_layers)):
        W = params[2 * layer]
        grads[2 * layer] = delta.T @ acts[layer] + alpha / n_total * W
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ W) * (pre[layer - 1] > 0)
    return loss, grads


def adam_minibatch(params, loss_grad, n, rng, lr, epochs, batch_size):
    """Seeded mini-batch Adam. ``loss_grad(params, rows)`` returns ``(loss, grads)``."""
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            _, grads = loss_grad(params, rows)
            t += 1
            c1 = 1.0 - b1 ** t
            c2 = 1.0 - b2 ** t
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    return params
