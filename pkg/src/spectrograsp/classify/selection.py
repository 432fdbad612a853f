"""Episode-grouped splitting, stratified folds and grid-search cross-validation."""

from __future__ import annotations

import itertools
import math

import numpy as np

from ..errors import ParameterError, StratificationError
from ..parallel import pmap
from .model import LabeledVectors, _check_hyperparams, predict, train

# which direction of each hyperparameter means "more regularization"
_STRONGER = {"C": -1, "alpha": +1, "gamma": -1}


def _episodes_by_class(episode_ids, labels) -> dict:
    out = {}
    seen = set()
    for e, lab in zip(np.asarray(episode_ids).tolist(), np.asarray(labels, dtype=object).tolist()):
        if e in seen:
            continue
        seen.add(e)
        out.setdefault(lab, []).append(e)
    for lab in out:
        out[lab].sort()
    return out


def _check_episode_labels(episode_ids, labels):
    owner = {}
    for e, lab in zip(np.asarray(episode_ids).tolist(), np.asarray(labels, dtype=object).tolist()):
        if owner.setdefault(e, lab) != lab:
            raise ParameterError(f"episode {e} carries more than one label")


def split_train_test(episode_ids, labels, train_fraction: float = 0.8, seed: int = 0):
    """Boolean row mask selecting the training side of an episode-level split.

    Each class contributes ``round(train_fraction * n_episodes)`` episodes to
    the training side (at least one on each side when the class has two or
    more episodes), so per-class balance is exact up to rounding.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError("train fraction must be in (0, 1)")
    _check_episode_labels(episode_ids, labels)
    by_class = _episodes_by_class(episode_ids, labels)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917]))
    train_eps = []
    for lab in sorted(by_class):
        eps = np.array(by_class[lab])
        if eps.size < 2:
            raise StratificationError(f"class {lab!r} has fewer than 2 episodes; cannot split")
        rng.shuffle(eps)
        n_train = int(math.floor(train_fraction * eps.size + 0.5))
        n_train = min(max(n_train, 1), eps.size - 1)
        train_eps.extend(eps[:n_train].tolist())
    return np.isin(np.asarray(episode_ids), train_eps)


def stratified_group_folds(episode_ids, labels, folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per row; all rows of an episode share a fold.

    Episodes of each class are shuffled and dealt round-robin, with the
    starting fold rotating across classes so that fold sizes stay even. A
    class with fewer episodes than folds is simply absent from some
    validation folds.
    """
    if folds < 2:
        raise ParameterError("folds must be >= 2")
    _check_episode_labels(episode_ids, labels)
    by_class = _episodes_by_class(episode_ids, labels)
    labs, counts = np.unique(np.asarray(labels, dtype=object).astype(str), return_counts=True)
    short = {lab: int(c) for lab, c in zip(labs, counts) if c < folds}
    if short:
        raise StratificationError(f"classes with fewer samples than folds ({folds}): {short}")
    n_eps = sum(len(v) for v in by_class.values())
    if n_eps < folds:
        raise StratificationError(f"{n_eps} episodes cannot fill {folds} folds")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF01D]))
    fold_of = {}
    offset = 0
    for lab in sorted(by_class):
        eps = np.array(by_class[lab])
        rng.shuffle(eps)
        for i, e in enumerate(eps.tolist()):
            fold_of[e] = (offset + i) % folds
        offset = (offset + len(eps)) % folds
    return np.array([fold_of[e] for e in np.asarray(episode_ids).tolist()], dtype=np.int64)


def expand_grid(grid: dict) -> list:
    """Cartesian product of a ``{name: [values]}`` lattice, keys in sorted order."""
    if not grid:
        return [{}]
    keys = sorted(grid)
    values = []
    for k in keys:
        v = grid[k]
        if isinstance(v, (str, bytes)) or not hasattr(v, "__iter__"):
            v = [v]
        v = list(v)
        if not v:
            raise ParameterError(f"grid axis {k!r} is empty")
        values.append(v)
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def _preference_key(point: dict):
    """Sort key: stronger regularization first, then lexicographic."""
    strength = tuple(_STRONGER[k] * -float(point[k]) for k in sorted(point) if k in _STRONGER)
    return strength, repr(sorted(point.items()))


def grid_search_cv(family: str, data: LabeledVectors, grid: dict, folds: int = 5, seed: int = 0,
                   feature_map: str = "identity"):
    """Pick the lattice point with the best mean validation accuracy.

    Returns ``(best_point, table)`` where ``table`` is a list of dicts with the
    point, per-fold accuracies and their mean, in lattice order.
    """
    points = expand_grid(grid)
    for p in points:
        _check_hyperparams(family, dict(p))
    fold_idx = stratified_group_folds(data.episode_ids, data.y, folds, seed)
    jobs = [(ci, f) for ci in range(len(points)) for f in range(folds)]

    def run(job):
        ci, f = job
        cell_seed = int(np.random.SeedSequence([int(seed), ci, f]).generate_state(1)[0])
        tr = fold_idx != f
        model = train(family, data.subset(tr), points[ci], seed=cell_seed, calibrate=False,
                      feature_map=feature_map)
        va = data.subset(~tr)
        return float(np.mean(predict(model, va.X) == va.y))

    accs = pmap(run, jobs)
    table = []
    for ci, p in enumerate(points):
        fa = accs[ci * folds:(ci + 1) * folds]
        table.append({"point": p, "fold_accuracy": fa, "mean_accuracy": float(np.mean(fa))})
    best_mean = max(row["mean_accuracy"] for row in table)
    winners = [row["point"] for row in table if row["mean_accuracy"] == best_mean]
    best = min(winners, key=_preference_key)
    return best, table
