"""Support vector machine solvers.

``smo_solve`` is the C-SVC dual solved by sequential minimal optimization
with maximal-violating-pair working-set selection. ``dcd_solve`` is dual
coordinate descent for the hinge-loss linear SVM with an augmented bias
feature. Both inner loops are numba-compiled and release the GIL.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

SMO_TOL = 1e-3
TAU = 1e-12


def rbf_kernel(A, B, gamma):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


@njit(cache=True, nogil=True)
def _smo(K, y, C, tol, max_iter):
    n = y.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    converged = False
    while it < max_iter:
        gmax = -np.inf
        gmin = np.inf
        i = -1
        j = -1
        for t in range(n):
            v = -y[t] * G[t]
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                if v > gmax:
                    gmax = v
                    i = t
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C):
                if v < gmin:
                    gmin = v
                    j = t
        if i < 0 or j < 0 or gmax - gmin < tol:
            converged = True
            break
        it += 1
        ai = alpha[i]
        aj = alpha[j]
        kij = K[i, j]
        if y[i] != y[j]:
            quad = K[i, i] + K[j, j] - 2.0 * kij
            if quad <= 0:
                quad = TAU
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            alpha[i] = ai + delta
            alpha[j] = aj + delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            quad = K[i, i] + K[j, j] - 2.0 * kij
            if quad <= 0:
                quad = TAU
            delta = (G[i] - G[j]) / quad
            total = ai + aj
            alpha[i] = ai - delta
            alpha[j] = aj + delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = total
        dai = alpha[i] - ai
        daj = alpha[j] - aj
        for t in range(n):
            G[t] += y[t] * (y[i] * K[i, t] * dai + y[j] * K[j, t] * daj)

    # bias from free vectors, else the midpoint of the feasible interval
    ub = np.inf
    lb = -np.inf
    s = 0.0
    nfree = 0
    for t in range(n):
        yg = y[t] * G[t]
        if alpha[t] >= C:
            if y[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif alpha[t] <= 0:
            if y[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            nfree += 1
            s += yg
    rho = s / nfree if nfree > 0 else 0.5 * (ub + lb)
    return alpha, -rho, it, converged


@dataclass
class SmoResult:
    alpha: np.ndarray
    bias: float
    iterations: int
    converged: bool


def smo_solve(K, y, C, tol=SMO_TOL, max_iter=None) -> SmoResult:
    """Solve ``min 1/2 a'Qa - sum(a)`` s.t. ``y'a = 0, 0 <= a <= C`` with ``Q = yy' * K``.

    ``max_iter`` defaults to ``max(100000, 100 n)`` which bounds the run time.
    """
    K = np.ascontiguousarray(K, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n = y.size
    if max_iter is None:
        max_iter = max(100_000, 100 * n)
    alpha, b, it, conv = _smo(K, y, float(C), float(tol), int(max_iter))
    return SmoResult(alpha, float(b), int(it), bool(conv))


def kkt_violation(alpha, y, decision, C) -> float:
    """Largest KKT violation over training points given decision values ``f(x_t)``."""
    m = y * decision
    at_zero = alpha <= 0
    at_c = alpha >= C
    free = ~(at_zero | at_c)
    viol = np.zeros_like(m)
    viol[at_zero] = np.maximum(0.0, 1.0 - m[at_zero])
    viol[at_c] = np.maximum(0.0, m[at_c] - 1.0)
    viol[free] = np.abs(m[free] - 1.0)
    return float(viol.max()) if viol.size else 0.0


@njit(cache=True, nogil=True)
def _dcd(X, y, C, tol, max_epochs, seed):
    n, d = X.shape
    w = np.zeros(d)
    alpha = np.zeros(n)
    qd = np.zeros(n)
    for i in range(n):
        qd[i] = np.dot(X[i], X[i])
    np.random.seed(seed)
    idx = np.arange(n)
    epochs = 0
    for epochs in range(1, max_epochs + 1):
        np.random.shuffle(idx)
        pgmax = -np.inf
        pgmin = np.inf
        for s in range(n):
            i = idx[s]
            g = y[i] * np.dot(w, X[i]) - 1.0
            if alpha[i] <= 0:
                pg = min(g, 0.0)
            elif alpha[i] >= C:
                pg = max(g, 0.0)
            else:
                pg = g
            pgmax = max(pgmax, pg)
            pgmin = min(pgmin, pg)
            if pg != 0.0 and qd[i] > 0:
                old = alpha[i]
                alpha[i] = min(max(old - g / qd[i], 0.0), C)
                w += (alpha[i] - old) * y[i] * X[i]
        if pgmax - pgmin < tol:
            break
    return w, alpha, epochs


def dcd_solve(X, y, C, tol=1e-3, max_epochs=1000, seed=0):
    """Hinge-loss linear SVM; returns ``(w, bias, alpha)`` with the bias as an extra feature."""
    Xa = np.hstack([np.asarray(X, dtype=float), np.ones((len(X), 1))])
    w, alpha, _ = _dcd(np.ascontiguousarray(Xa), np.ascontiguousarray(y, dtype=float),
                       float(C), float(tol), int(max_epochs), int(seed) % (2**32))
    return w[:-1].copy(), float(w[-1]), alpha
