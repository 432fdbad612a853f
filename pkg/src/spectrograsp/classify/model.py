"""Classifier model type, training dispatch and probability output."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize_scalar

from ..errors import DataFormatError, DimensionError, DomainError, ParameterError, TrainingError
from ..parallel import pmap
from . import nets
from .svm import SMO_TOL, dcd_solve, rbf_kernel, smo_solve

FAMILIES = ("logistic", "linear-svm", "rbf-svm", "mlp")
SCHEMA_VERSION = 1
# "shape-scale" turns nonnegative codes w into [w / sum(w), log(sum(w))]: spectral shape
# separated from overall brightness, which otherwise swamps small shape differences
FEATURE_MAPS = ("identity", "shape-scale")
_SCALE_FLOOR = 1e-12

DEFAULT_HYPERPARAMS = {
    "logistic": {"C": 10.0, "lr": 0.02, "epochs": 40, "batch_size": 64},
    "linear-svm": {"C": 1.0, "tol": 1e-3, "max_epochs": 200},
    "rbf-svm": {"C": 10.0, "gamma": 0.3, "tol": SMO_TOL},
    "mlp": {"hidden": [64], "lr": 0.005, "epochs": 40, "batch_size": 64, "alpha": 1e-4},
}


@dataclass
class LabeledVectors:
    X: np.ndarray
    y: np.ndarray
    episode_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=object)
        if self.episode_ids is None:
            self.episode_ids = np.arange(len(self.y))
        self.episode_ids = np.asarray(self.episode_ids)
        if not (self.X.shape[0] == len(self.y) == len(self.episode_ids)):
            raise DimensionError("X, y and episode_ids must have the same number of rows")

    def __len__(self):
        return len(self.y)

    @property
    def classes(self) -> list:
        return sorted(set(self.y.tolist()))

    def subset(self, rows) -> "LabeledVectors":
        return LabeledVectors(self.X[rows], self.y[rows], self.episode_ids[rows])

    def select_columns(self, cols) -> "LabeledVectors":
        return LabeledVectors(self.X[:, cols], self.y, self.episode_ids)


@dataclass
class ClassifierModel:
    family: str
    classes: list
    k_in: int
    params: dict
    tau: float = 1.0
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._cache = {}

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def _check_hyperparams(family, hp):
    if family not in FAMILIES:
        raise ParameterError(f"unknown family {family!r}; expected one of {FAMILIES}")
    merged = dict(DEFAULT_HYPERPARAMS[family])
    unknown = set(hp) - set(merged)
    if unknown:
        raise ParameterError(f"unknown hyperparameters for {family}: {sorted(unknown)}")
    merged.update(hp)
    if "C" in merged and not merged["C"] > 0:
        raise ParameterError("C must be > 0")
    if family == "rbf-svm" and not merged["gamma"] > 0:
        raise ParameterError("gamma must be > 0")
    if family == "mlp":
        hidden = list(merged["hidden"]) if not isinstance(merged["hidden"], int) else [merged["hidden"]]
        if not 1 <= len(hidden) <= 2 or any(not 8 <= int(h) <= 256 for h in hidden):
            raise ParameterError("mlp needs 1-2 hidden layers of 8-256 units")
        merged["hidden"] = [int(h) for h in hidden]
        if not merged["alpha"] >= 0:
            raise ParameterError("alpha must be >= 0")
    for key in ("lr",):
        if key in merged and not merged[key] > 0:
            raise ParameterError(f"{key} must be > 0")
    for key in ("epochs", "batch_size", "max_epochs"):
        if key in merged and (int(merged[key]) != merged[key] or merged[key] < 1):
            raise ParameterError(f"{key} must be a positive integer")
    return merged


def map_features(feature_map: str, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if feature_map == "identity":
        return X
    if feature_map == "shape-scale":
        total = np.maximum(X.sum(axis=1, keepdims=True), _SCALE_FLOOR)
        return np.hstack([X / total, np.log(total)])
    raise ParameterError(f"unknown feature map {feature_map!r}; expected one of {FEATURE_MAPS}")


def _fit_scaler(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def _fit_rbf(Z, yi, n_classes, hp):
    C, gamma, tol = float(hp["C"]), float(hp["gamma"]), float(hp["tol"])
    pairs = list(combinations(range(n_classes), 2))

    def solve(pair):
        a, b = pair
        rows = np.flatnonzero((yi == a) | (yi == b))
        y = np.where(yi[rows] == a, 1.0, -1.0)
        K = rbf_kernel(Z[rows], Z[rows], gamma)
        res = smo_solve(K, y, C, tol)
        f = K @ (res.alpha * y) + res.bias
        viol = _kkt(res.alpha, y, f, C)
        sv = res.alpha > 0
        return rows[sv], (res.alpha * y)[sv], res.alpha[sv], res.bias, res.iterations, res.converged, viol

    results = pmap(solve, pairs)
    sv_rows = np.unique(np.concatenate([r[0] for r in results])) if results else np.array([], int)
    ptr = [0]
    idx, coef, alpha, bias = [], [], [], []
    for rows, c, a, b, *_ in results:
        idx.append(np.searchsorted(sv_rows, rows))
        coef.append(c)
        alpha.append(a)
        bias.append(b)
        ptr.append(ptr[-1] + len(rows))
    params = {
        "sv": Z[sv_rows],
        "pairs": np.array(pairs, dtype=np.int64).reshape(-1, 2),
        "pair_ptr": np.array(ptr, dtype=np.int64),
        "pair_sv": np.concatenate(idx).astype(np.int64) if idx else np.array([], np.int64),
        "pair_coef": np.concatenate(coef) if coef else np.array([]),
        "pair_alpha": np.concatenate(alpha) if alpha else np.array([]),
        "pair_bias": np.array(bias, dtype=float),
        "gamma": np.full(len(pairs), gamma),
        "C": C,
    }
    meta = {
        "smo_iterations": int(sum(r[4] for r in results)),
        "smo_all_converged": bool(all(r[5] for r in results)),
        "max_kkt_violation": float(max((r[6] for r in results), default=0.0)),
    }
    return params, meta


def _kkt(alpha, y, f, C):
    from .svm import kkt_violation
    return kkt_violation(alpha, y, f, C)


def _fit_linear_svm(Z, yi, n_classes, hp, seed):
    def solve(c):
        y = np.where(yi == c, 1.0, -1.0)
        return dcd_solve(Z, y, float(hp["C"]), tol=float(hp["tol"]), max_epochs=int(hp["max_epochs"]),
                         seed=seed + c)
    res = pmap(solve, range(n_classes))
    return {"W": np.array([r[0] for r in res]), "b": np.array([r[1] for r in res])}, {}


def _fit_logistic(Z, yi, n_classes, hp, rng):
    Y = np.zeros((len(yi), n_classes))
    Y[np.arange(len(yi)), yi] = 1.0
    params = nets.init_logistic(n_classes, Z.shape[1])
    n = len(yi)
    C = float(hp["C"])
    nets.adam_minibatch(params, lambda p, r: nets.logistic_loss_grad(p, Z[r], Y[r], C, n), n, rng,
                        float(hp["lr"]), int(hp["epochs"]), int(hp["batch_size"]))
    return {"W": params[0], "b": params[1]}, {}


def _fit_mlp(Z, yi, n_classes, hp, rng):
    params = nets.init_mlp(rng, Z.shape[1], hp["hidden"], n_classes)
    n = len(yi)
    alpha = float(hp["alpha"])
    nets.adam_minibatch(params, lambda p, r: nets.mlp_loss_grad(p, Z[r], yi[r], alpha, n), n, rng,
                        float(hp["lr"]), int(hp["epochs"]), int(hp["batch_size"]))
    return {"layers": params, "activation": "relu"}, {}


def _fit(family, X, yi, n_classes, hp, seed):
    mean, scale = _fit_scaler(X)
    Z = (X - mean) / scale
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), FAMILIES.index(family)]))
    if family == "rbf-svm":
        params, meta = _fit_rbf(Z, yi, n_classes, hp)
    elif family == "linear-svm":
        params, meta = _fit_linear_svm(Z, yi, n_classes, hp, int(seed))
    elif family == "logistic":
        params, meta = _fit_logistic(Z, yi, n_classes, hp, rng)
    else:
        params, meta = _fit_mlp(Z, yi, n_classes, hp, rng)
    params["x_mean"] = mean
    params["x_scale"] = scale
    return params, meta


def calibration_split(episode_ids, y, fraction, seed):
    """Pick ~``fraction`` of episodes for temperature fitting, cycling through classes.

    Returns a boolean row mask, or None when no class can spare an episode.
    """
    eps = {}
    for e, lab in zip(episode_ids.tolist(), y.tolist()):
        eps.setdefault(lab, [])
        if e not in eps[lab]:
            eps[lab].append(e)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCA1]))
    n_eps = sum(len(v) for v in eps.values())
    want = int(math.ceil(fraction * n_eps))
    queues = {}
    for lab in sorted(eps):
        order = sorted(eps[lab])
        rng.shuffle(order)
        queues[lab] = order[:-1]  # keep at least one episode of every class for fitting
    chosen = []
    labs = sorted(queues)
    rng.shuffle(labs)
    while len(chosen) < want and any(queues.values()):
        for lab in labs:
            if queues[lab] and len(chosen) < want:
                chosen.append(queues[lab].pop(0))
    if not chosen:
        return None
    return np.isin(episode_ids, chosen)


def fit_temperature(scores, yi) -> float:
    """Temperature minimising the negative log-likelihood of ``softmax(scores / tau)``."""
    scores = np.asarray(scores, dtype=float)

    def nll(log_tau):
        z = scores / math.exp(log_tau)
        z = z - z.max(axis=1, keepdims=True)
        return float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(yi)), yi]))

    res = minimize_scalar(nll, bounds=(math.log(1e-3), math.log(1e3)), method="bounded",
                          options={"xatol": 1e-6})
    return float(math.exp(res.x))


def train(family: str, data: LabeledVectors, hyperparams: Optional[dict] = None, seed: int = 0,
          calibrate: bool = True, calibration_fraction: float = 0.1,
          feature_map: str = "identity") -> ClassifierModel:
    """Train one model family.

    With ``calibrate`` the temperature is fitted on a held-out slice of
    episodes using a model trained on the rest, then the final model is
    refitted on all of ``data`` and given that temperature. ``feature_map``
    is applied to every input before standardization.
    """
    hp = _check_hyperparams(family, dict(hyperparams or {}))
    if len(data) == 0:
        raise TrainingError("no training data")
    if not np.all(np.isfinite(data.X)):
        raise DomainError("training inputs contain non-finite values")
    if feature_map != "identity" and np.any(data.X < 0):
        raise DomainError(f"feature map {feature_map!r} needs nonnegative inputs")
    F = map_features(feature_map, data.X)
    classes = data.classes
    if len(classes) < 2:
        raise TrainingError("training data must contain at least two classes")
    index = {c: i for i, c in enumerate(classes)}
    yi = np.array([index[c] for c in data.y.tolist()], dtype=np.int64)

    tau = 1.0
    meta = {"seed": int(seed), "grid_point": _jsonable(hp), "calibrated": False}
    if calibrate:
        mask = calibration_split(data.episode_ids, data.y, calibration_fraction, seed)
        if mask is not None and np.unique(yi[~mask]).size == len(classes):
            params, _ = _fit(family, F[~mask], yi[~mask], len(classes), hp, seed)
            params["feature_map"] = feature_map
            probe = ClassifierModel(family, classes, data.X.shape[1], params)
            tau = fit_temperature(scores(probe, data.X[mask]), yi[mask])
            meta.update(calibrated=True, calibration_rows=int(mask.sum()))
    params, fit_meta = _fit(family, F, yi, len(classes), hp, seed)
    params["feature_map"] = feature_map
    meta.update(fit_meta)
    return ClassifierModel(family, classes, data.X.shape[1], params, tau, meta)


def _rbf_operator(model):
    if "rbf_op" not in model._cache:
        p = model.params
        n_pairs = len(p["pair_bias"])
        counts = np.diff(p["pair_ptr"])
        D = sp.csr_matrix((p["pair_coef"], (np.repeat(np.arange(n_pairs), counts), p["pair_sv"])),
                          shape=(n_pairs, len(p["sv"])))
        M = np.zeros((n_pairs, model.n_classes))
        M[np.arange(n_pairs), p["pairs"][:, 0]] = 1.0
        M[np.arange(n_pairs), p["pairs"][:, 1]] = -1.0
        gammas = np.unique(p["gamma"])
        if gammas.size > 1:
            raise DataFormatError("per-pair kernel widths must agree")
        sv_sq = (p["sv"] ** 2).sum(1)
        model._cache["rbf_op"] = (D, M, float(gammas[0]) if gammas.size else 1.0, sv_sq)
    return model._cache["rbf_op"]


def pair_decisions(model: ClassifierModel, X) -> np.ndarray:
    """One-vs-one decision values, shape (n, n_pairs); positive favours the first class of the pair."""
    Z = _standardize(model, _check_input(model, X))
    D, _, gamma, sv_sq = _rbf_operator(model)
    sq = (Z * Z).sum(1)[:, None] + sv_sq[None, :] - 2.0 * (Z @ model.params["sv"].T)
    np.maximum(sq, 0.0, out=sq)
    K = np.exp(-gamma * sq)
    return (D @ K.T).T + model.params["pair_bias"]


def _check_input(model, X):
    X = np.asarray(getattr(X, "X", X), dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.k_in:
        raise DimensionError(f"model expects {model.k_in} features, got shape {X.shape}")
    return X


def _standardize(model, X):
    p = model.params
    return (map_features(p.get("feature_map", "identity"), X) - p["x_mean"]) / p["x_scale"]


def scores(model: ClassifierModel, X) -> np.ndarray:
    """Native per-class scores before temperature scaling, shape (n, n_classes).

    For rbf-svm a class score is the sum over its pairs of the signed pairwise
    margin, each clipped to [-1, 1].
    """
    X = _check_input(model, X)
    p = model.params
    if model.family == "rbf-svm":
        _, M, _, _ = _rbf_operator(model)
        # margins saturate at the margin band edge, so a confident pair counts as one full vote
        return np.clip(pair_decisions(model, X), -1.0, 1.0) @ M
    Z = _standardize(model, X)
    if model.family in ("logistic", "linear-svm"):
        return Z @ p["W"].T + p["b"]
    return nets.mlp_scores(p["layers"], Z)


def softmax(z, tau=1.0):
    z = np.asarray(z, dtype=float) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    # keep every class strictly positive so downstream Bayes products never hit an absorbing zero
    tiny = np.finfo(float).tiny
    if np.any(out < tiny):
        out = np.maximum(out, tiny)
        out /= out.sum(axis=-1, keepdims=True)
    return out


def predict_proba(model: ClassifierModel, x) -> np.ndarray:
    """Class probabilities; 1-D input gives a 1-D result."""
    single = np.ndim(getattr(x, "X", x)) == 1
    out = softmax(scores(model, x), model.tau)
    return out[0] if single else out


def predict(model: ClassifierModel, x):
    """Label(s) with the highest probability; ties go to the lowest class index."""
    single = np.ndim(getattr(x, "X", x)) == 1
    idx = np.argmax(np.atleast_2d(predict_proba(model, x)), axis=1)
    labels = np.array(model.classes, dtype=object)[idx]
    return labels[0] if single else labels


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def model_to_dict(model: ClassifierModel) -> dict:
    params = dict(model.params)
    if model.family == "mlp":
        params["layers"] = [l.tolist() for l in params["layers"]]
    return {
        "schema_version": SCHEMA_VERSION,
        "family": model.family,
        "classes": list(model.classes),
        "k_in": model.k_in,
        "tau": model.tau,
        "params": _jsonable(params),
        "train_meta": _jsonable(model.train_meta),
    }


_INT_ARRAYS = {"pairs", "pair_ptr", "pair_sv"}


def model_from_dict(d: dict) -> ClassifierModel:
    try:
        if d["schema_version"] != SCHEMA_VERSION:
            raise DataFormatError(f"unsupported classifier schema_version {d['schema_version']}")
        family = d["family"]
        if family not in FAMILIES:
            raise DataFormatError(f"unknown family {family!r}")
        params = {}
        for key, val in d["params"].items():
            if key == "layers":
                params[key] = [np.asarray(l, dtype=float) for l in val]
            elif isinstance(val, list):
                params[key] = np.asarray(val, dtype=np.int64 if key in _INT_ARRAYS else float)
            else:
                params[key] = val
        if family == "rbf-svm":
            params["pairs"] = params["pairs"].reshape(-1, 2)
            params["sv"] = params["sv"].reshape(-1, len(params["x_mean"]))
        return ClassifierModel(family, list(d["classes"]), int(d["k_in"]), params, float(d["tau"]),
                               dict(d.get("train_meta", {})))
    except KeyError as exc:
        raise DataFormatError(f"classifier model missing field {exc}") from exc
