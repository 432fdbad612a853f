"""Non-negative matrix factorization by Lee-Seung multiplicative updates.

``V ~ W @ H`` with ``V`` of shape (n_samples, n_channels), ``W`` the per-sample
codes and ``H`` the ``k`` basis spectra.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .dataset import read_json, write_json
from .errors import CompatibilityError, DataFormatError, DimensionError, DomainError, ParameterError

DELTA = 1e-12
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class NmfModel:
    H: np.ndarray
    k: int
    fit_error: float
    iterations_run: int
    seed: int
    dead_rows: tuple = ()
    history: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        H.setflags(write=False)
        object.__setattr__(self, "H", H)
        gram = H @ H.T
        gram.setflags(write=False)
        object.__setattr__(self, "_gram", gram)

    @property
    def n_channels(self) -> int:
        return self.H.shape[1]

    @property
    def gram(self) -> np.ndarray:
        return self._gram


def _check_matrix(V):
    V = np.asarray(V, dtype=float)
    if V.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {V.shape}")
    if not np.all(np.isfinite(V)):
        raise DomainError("matrix contains non-finite values")
    if np.any(V < 0):
        raise DomainError("NMF input must be nonnegative")
    return V


def _objective(V, W, H):
    R = V - W @ H
    return float(np.einsum("ij,ij->", R, R))


def _fast_objective(vv, W, VHt, HHt):
    """||V - WH||^2 expanded as ||V||^2 - 2<W, VH^T> + <W^T W, HH^T>."""
    return vv - 2.0 * float(np.einsum("ij,ij->", W, VHt)) + float(np.einsum("ij,ij->", W.T @ W, HHt))


def nmf_fit(V, k: int, max_iter: int = 500, tol: float = 1e-5, seed: int = 0):
    """Factorize ``V`` into nonnegative ``W`` (n x k) and ``H`` (k x C).

    Stops when the relative decrease of ``||V - WH||_F^2`` drops below ``tol``
    or after ``max_iter`` sweeps. Returns ``(W, model)``; ``model.history``
    holds the objective after initialization and after every sweep.
    """
    V = _check_matrix(V)
    n, c = V.shape
    if not (1 <= k <= min(n, c)) or int(k) != k:
        raise ParameterError(f"k must be an integer in [1, {min(n, c)}], got {k}")
    if max_iter < 0:
        raise ParameterError("max_iter must be >= 0")
    rng = np.random.default_rng(seed)
    scale = np.sqrt(V.mean() / k) if V.mean() > 0 else 1.0
    W = rng.uniform(0.1, 1.1, size=(n, k)) * scale
    H = rng.uniform(0.1, 1.1, size=(k, c)) * scale

    repaired = set()
    dead = set()
    vv = float(np.einsum("ij,ij->", V, V))
    history = [_objective(V, W, H)]
    it = 0
    for it in range(1, max_iter + 1):
        H *= (W.T @ V) / ((W.T @ W) @ H + DELTA)
        for r in np.flatnonzero(~H.any(axis=1)):
            if r in repaired:
                dead.add(int(r))
            else:
                repaired.add(int(r))
                H[r] = rng.uniform(0.1, 1.1, size=c) * scale
        VHt = V @ H.T
        HHt = H @ H.T
        W *= VHt / (W @ HHt + DELTA)
        obj = _fast_objective(vv, W, VHt, HHt)
        if obj < 1e-6 * vv:
            # the expanded form loses all precision near an exact fit
            obj = _objective(V, W, H)
        prev = history[-1]
        history.append(obj)
        if obj == 0.0 or (prev - obj) < tol * prev:
            break
    else:
        it = max_iter

    model = NmfModel(H=H, k=int(k), fit_error=float(np.sqrt(_objective(V, W, H))), iterations_run=it,
                     seed=int(seed), dead_rows=tuple(sorted(dead)), history=tuple(history))
    return W, model


def nmf_transform(v, model: NmfModel, max_iter: int = 500, tol: float = 1e-5) -> np.ndarray:
    """Nonnegative code for one curve against the fixed basis ``model.H``."""
    v = np.asarray(getattr(v, "values", v), dtype=float)
    if v.ndim != 1:
        raise DimensionError("nmf_transform takes a single curve; use nmf_transform_batch")
    return nmf_transform_batch(v[None, :], model, max_iter, tol)[0]


def nmf_transform_batch(V, model: NmfModel, max_iter: int = 500, tol: float = 1e-5) -> np.ndarray:
    """Row-wise multiplicative updates on ``W`` with ``H`` held fixed.

    Each row starts at ``1/k`` and freezes once its own relative objective
    decrease falls below ``tol``, so a row's result does not depend on which
    other rows share the batch.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[1] != model.n_channels:
        raise DimensionError(f"expected curves of length {model.n_channels}, got shape {V.shape}")
    if np.any(V < 0) or not np.all(np.isfinite(V)):
        raise DomainError("curves must be finite and nonnegative")
    return _transform_rows(np.ascontiguousarray(V), np.ascontiguousarray(model.H),
                           np.ascontiguousarray(model.gram), int(max_iter), float(tol))


@njit(cache=True, nogil=True)
def _transform_rows(V, H, G, max_iter, tol):
    n, c = V.shape
    k = H.shape[0]
    W = np.empty((n, k))
    HV = np.empty((n, k))
    vv = np.empty(n)
    w = np.empty(k)
    Gw = np.empty(k)
    for r in range(n):
        # per-row sums in a fixed order keep each row's result independent of the batch
        s = 0.0
        for j in range(c):
            s += V[r, j] * V[r, j]
        vv[r] = s
        for a in range(k):
            s = 0.0
            for j in range(c):
                s += H[a, j] * V[r, j]
            HV[r, a] = s
        for a in range(k):
            w[a] = 1.0 / k
        # objective ||v - w H||^2 expanded as vv - 2 w.Hv + w.Gw
        prev = vv[r]
        for a in range(k):
            s = 0.0
            for b in range(k):
                s += G[a, b] * w[b]
            prev += w[a] * (s - 2.0 * HV[r, a])
        for _ in range(max_iter):
            for a in range(k):
                s = 0.0
                for b in range(k):
                    s += G[a, b] * w[b]
                Gw[a] = s
            for a in range(k):
                w[a] *= HV[r, a] / (Gw[a] + DELTA)
            obj = vv[r]
            for a in range(k):
                s = 0.0
                for b in range(k):
                    s += G[a, b] * w[b]
                obj += w[a] * (s - 2.0 * HV[r, a])
            done = (prev - obj) < tol * max(prev, 1e-300)
            prev = obj
            if done:
                break
        for a in range(k):
            W[r, a] = w[a]
    return W


def reconstruction_error(V, W, model: NmfModel) -> float:
    V = np.asarray(V, dtype=float)
    W = np.asarray(W, dtype=float)
    if V.ndim != 2 or W.ndim != 2 or W.shape != (V.shape[0], model.k) or V.shape[1] != model.n_channels:
        raise DimensionError(f"shapes V{V.shape}, W{W.shape}, H{model.H.shape} are not conformable")
    return float(np.linalg.norm(V - W @ model.H))


def compression_ratio(k: int, n_channels: int) -> float:
    return 1.0 - k / n_channels


def model_to_dict(model: NmfModel, grid_hash: str, extra: Optional[dict] = None) -> dict:
    d = {
        "schema_version": SCHEMA_VERSION,
        "k": model.k,
        "seed": model.seed,
        "fit_error": model.fit_error,
        "iterations_run": model.iterations_run,
        "dead_rows": list(model.dead_rows),
        "grid_hash": grid_hash,
        "H": model.H.tolist(),
    }
    if extra:
        d.update(extra)
    return d


def model_from_dict(d: dict, expected_grid_hash: Optional[str] = None) -> NmfModel:
    try:
        if d["schema_version"] != SCHEMA_VERSION:
            raise DataFormatError(f"unsupported NMF schema_version {d['schema_version']}")
        if expected_grid_hash is not None and d["grid_hash"] != expected_grid_hash:
            raise CompatibilityError(
                f"NMF model grid hash {d['grid_hash']} does not match dataset grid {expected_grid_hash}")
        H = np.asarray(d["H"], dtype=float)
        if H.ndim != 2 or H.shape[0] != d["k"]:
            raise DataFormatError("NMF basis shape does not match k")
        return NmfModel(H=H, k=int(d["k"]), fit_error=float(d["fit_error"]),
                        iterations_run=int(d["iterations_run"]), seed=int(d["seed"]),
                        dead_rows=tuple(d.get("dead_rows", ())))
    except KeyError as exc:
        raise DataFormatError(f"NMF model missing field {exc}") from exc


def save_model(path, model: NmfModel, grid_hash: str, extra: Optional[dict] = None):
    write_json(path, model_to_dict(model, grid_hash, extra))


def load_model(path, expected_grid_hash: Optional[str] = None) -> NmfModel:
    return model_from_dict(read_json(path), expected_grid_hash)
