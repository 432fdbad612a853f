import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectrograsp.classify import (
    FAMILIES,
    LabeledVectors,
    confusion_matrix,
    evaluate,
    expand_grid,
    grid_search_cv,
    macro_f1,
    model_from_dict,
    model_to_dict,
    predict,
    predict_proba,
    scores,
    split_train_test,
    stratified_group_folds,
    train,
    within_pair_accuracy,
)
from spectrograsp.classify.model import map_features, pair_decisions, softmax
from spectrograsp.classify.nets import init_mlp, logistic_loss_grad, mlp_loss_grad
from spectrograsp.classify.svm import kkt_violation, rbf_kernel, smo_solve
from spectrograsp.errors import DimensionError, DomainError, ParameterError, StratificationError, TrainingError

FAST = {
    "logistic": {"epochs": 60},
    "linear-svm": {},
    "rbf-svm": {"C": 10.0, "gamma": 0.5},
    "mlp": {"hidden": [16], "epochs": 80},
}


def blobs(n_classes=4, per_class=30, dim=3, spread=0.3, seed=0, episodes_per_class=5):
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, 3.0, (n_classes, dim))
    X, y, eps = [], [], []
    for c in range(n_classes):
        X.append(centres[c] + rng.normal(0.0, spread, (per_class, dim)))
        y += [f"c{c}"] * per_class
        eps += [c * episodes_per_class + i % episodes_per_class for i in range(per_class)]
    return LabeledVectors(np.vstack(X), np.array(y, dtype=object), np.array(eps))


@pytest.fixture(scope="module")
def data():
    return blobs()


@pytest.fixture(scope="module")
def models(data):
    return {fam: train(fam, data, FAST[fam], seed=3) for fam in FAMILIES}


# ---------------------------------------------------------------- SVM solvers

def test_xor_rbf_matches_dense_dual_search():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    K = rbf_kernel(X, X, 1.0)
    Q = np.outer(y, y) * K
    # oracle: by the square's symmetry the dual optimum has equal multipliers, which already
    # satisfy y'a = 0; scan that line densely (step 1e-3) over the box [0, C]
    grid = np.arange(0.0, 10.0 + 1e-12, 1e-3)
    dual = 4 * grid - 0.5 * grid**2 * Q.sum()
    a_star = grid[np.argmax(dual)]
    res = smo_solve(K, y, 10.0, tol=1e-8)
    assert res.converged
    assert np.allclose(res.alpha, a_star, atol=1e-3)
    f = K @ (res.alpha * y) + res.bias
    assert np.all(np.sign(f) == y)

    model = train("rbf-svm", LabeledVectors(X, np.array(["A", "A", "B", "B"], dtype=object)),
                  {"C": 10.0, "gamma": 1.0}, calibrate=False)
    assert list(predict(model, X)) == ["A", "A", "B", "B"]


@pytest.mark.parametrize("seed", range(5))
def test_smo_kkt_and_box(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 3))
    y = np.where(X[:, 0] * X[:, 1] + 0.3 * rng.normal(size=80) > 0, 1.0, -1.0)
    C = 5.0
    K = rbf_kernel(X, X, 0.7)
    res = smo_solve(K, y, C)
    assert res.converged
    assert np.all(res.alpha >= -1e-8) and np.all(res.alpha <= C + 1e-8)
    assert abs(res.alpha @ y) < 1e-8
    f = K @ (res.alpha * y) + res.bias
    assert kkt_violation(res.alpha, y, f, C) <= 1e-3


def test_kkt_violation_oracle():
    alpha = np.array([0.0, 1.0, 0.5])
    y = np.array([1.0, -1.0, 1.0])
    f = np.array([0.5, -2.0, 1.2])
    # at zero needs y f >= 1 (0.5 short); at C needs y f <= 1 (2 - 1 over); free needs y f == 1
    assert kkt_violation(alpha, y, f, 1.0) == pytest.approx(1.0)


def test_two_point_linear_boundary_at_midpoint():
    data = LabeledVectors(np.array([[0.0], [1.0]]), np.array(["A", "B"], dtype=object))
    model = train("linear-svm", data, {"C": 1.0, "tol": 1e-9, "max_epochs": 100000}, calibrate=False)
    assert list(predict(model, data.X)) == ["A", "B"]
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        s = scores(model, np.array([[mid]]))[0]
        lo, hi = (mid, hi) if s[0] > s[1] else (lo, mid)
    assert abs(0.5 * (lo + hi) - 0.5) <= 1e-6


def test_rbf_pairs_satisfy_kkt(data, models):
    m = models["rbf-svm"]
    assert m.train_meta["smo_all_converged"]
    assert m.train_meta["max_kkt_violation"] <= 1e-3
    p = m.params
    assert np.all(p["pair_alpha"] >= -1e-8) and np.all(p["pair_alpha"] <= p["C"] + 1e-8)
    assert len(p["pairs"]) == 6  # one-vs-one over 4 classes
    # independent re-check: every training point of a pair against the stored decision values
    yi = np.array([m.classes.index(v) for v in data.y])
    D = pair_decisions(m, data.X)
    for q, (a, b) in enumerate(p["pairs"]):
        rows = np.flatnonzero((yi == a) | (yi == b))
        y = np.where(yi[rows] == a, 1.0, -1.0)
        alpha = np.zeros(len(data))
        sv_global = np.flatnonzero(np.isin(np.arange(len(data)), rows))
        lo, hi = p["pair_ptr"][q], p["pair_ptr"][q + 1]
        sv_pts = p["sv"][p["pair_sv"][lo:hi]]
        Z = (data.X[rows] - p["x_mean"]) / p["x_scale"]
        for s_pt, a_val in zip(sv_pts, p["pair_alpha"][lo:hi]):
            hit = np.flatnonzero(np.all(np.isclose(Z, s_pt, atol=1e-12), axis=1))
            alpha[rows[hit]] = a_val
        assert sv_global.size == rows.size
        assert kkt_violation(alpha[rows], y, D[rows, q], p["C"]) <= 1e-3


# ---------------------------------------------------------------- gradients

def _central_diff(f, params, eps=1e-6):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + eps
            fp = f(params)
            p[idx] = old - eps
            fm = f(params)
            p[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def _rel_err(a, b):
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_logistic_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 4))
    Y = np.eye(3)[rng.integers(0, 3, 12)]
    params = [rng.normal(size=(3, 4)), rng.normal(size=3)]
    _, g = logistic_loss_grad(params, X, Y, C=2.0)
    num = _central_diff(lambda p: logistic_loss_grad(p, X, Y, C=2.0)[0], params)
    assert _rel_err(g, num) < 1e-4


@pytest.mark.parametrize("hidden", [[5], [6, 4]])
def test_mlp_gradient_matches_finite_differences(hidden):
    rng = np.random.default_rng(len(hidden))
    X = rng.normal(size=(10, 4))
    y = rng.integers(0, 3, 10)
    params = init_mlp(rng, 4, hidden, 3)
    for p in params[1::2]:
        p += rng.normal(0.0, 0.1, p.shape)  # nonzero biases keep ReLU kinks away from the probes
    _, g = mlp_loss_grad(params, X, y, alpha=0.3)
    num = _central_diff(lambda p: mlp_loss_grad(p, X, y, alpha=0.3)[0], params)
    assert _rel_err(g, num) < 1e-4


# ---------------------------------------------------------------- probabilities

@pytest.mark.parametrize("family", FAMILIES)
def test_probabilities_are_a_distribution(models, family):
    rng = np.random.default_rng(1)
    P = predict_proba(models[family], rng.normal(0.0, 4.0, (200, 3)))
    assert np.all(P > 0)
    assert np.max(np.abs(P.sum(axis=1) - 1.0)) <= 1e-9


@pytest.mark.parametrize("family", FAMILIES)
def test_predict_is_argmax_of_proba(models, family):
    rng = np.random.default_rng(2)
    X = rng.normal(0.0, 4.0, (1000, 3))
    m = models[family]
    P = predict_proba(m, X)
    assert list(predict(m, X)) == [m.classes[i] for i in np.argmax(P, axis=1)]


@pytest.mark.parametrize("family", FAMILIES)
def test_families_fit_separable_blobs(data, models, family):
    assert np.mean(predict(models[family], data.X) == data.y) >= 0.95


def test_symmetric_binary_point_on_boundary_gives_half():
    X = np.array([[-1.0, 0.0], [-1.2, 0.3], [1.0, 0.0], [1.2, -0.3]])
    X = np.vstack([X, X * [1, -1]])
    y = np.array(["A", "A", "B", "B"] * 2, dtype=object)
    for fam in ("rbf-svm", "linear-svm"):
        m = train(fam, LabeledVectors(X, y), {"C": 1.0}, calibrate=False)
        assert np.allclose(predict_proba(m, np.zeros(2)), [0.5, 0.5], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(z=st.lists(st.floats(-20, 20), min_size=2, max_size=6), j=st.integers(0, 5),
       tau=st.floats(0.05, 20.0))
def test_probability_increases_with_own_score(z, j, tau):
    z = np.array(z)
    j = j % z.size
    h = 1e-4
    up = z.copy()
    up[j] += h
    before, after = softmax(z, tau)[j], softmax(up, tau)[j]
    assert after >= before
    if 1e-6 < before < 1 - 1e-6:  # away from saturation the increase is resolvable in floating point
        assert after > before


def test_softmax_keeps_every_entry_positive():
    p = softmax(np.array([0.0, 2000.0, -2000.0]))
    assert np.all(p > 0) and abs(p.sum() - 1.0) <= 1e-12


def test_predict_ties_go_to_lowest_index(models):
    m = models["linear-svm"]
    clone = model_from_dict(model_to_dict(m))
    clone.params["W"] = np.zeros_like(clone.params["W"])
    clone.params["b"] = np.zeros_like(clone.params["b"])
    assert predict(clone, np.ones(3)) == clone.classes[0]


def test_single_feature_threshold():
    X = np.linspace(0, 1, 40)[:, None]
    y = np.where(X[:, 0] < 0.5, "low", "high").astype(object)
    for fam in FAMILIES:
        m = train(fam, LabeledVectors(X, y), FAST[fam] if fam != "rbf-svm" else {"C": 10, "gamma": 1.0},
                  calibrate=False)
        assert predict(m, np.array([0.1])) == "low"
        assert predict(m, np.array([0.9])) == "high"


def test_support_vector_far_inside_region(data, models):
    m = models["rbf-svm"]
    centre = data.X[data.y == "c2"].mean(axis=0)
    assert predict(m, centre) == "c2"


# ---------------------------------------------------------------- training contract

def test_training_is_deterministic(data):
    for fam in FAMILIES:
        a = train(fam, data, FAST[fam], seed=7)
        b = train(fam, data, FAST[fam], seed=7)
        assert model_to_dict(a) == model_to_dict(b)


def test_temperature_is_fitted(data, models):
    for m in models.values():
        assert m.tau > 0 and m.train_meta["calibrated"]


def test_training_errors(data):
    with pytest.raises(TrainingError):
        train("logistic", LabeledVectors(np.ones((4, 2)), np.array(["a"] * 4, dtype=object)))
    bad = LabeledVectors(data.X.copy(), data.y, data.episode_ids)
    bad.X[0, 0] = np.nan
    with pytest.raises(DomainError):
        train("logistic", bad)
    with pytest.raises(ParameterError):
        train("rbf-svm", data, {"gamma": 0.0})
    with pytest.raises(ParameterError):
        train("logistic", data, {"C": -1.0})
    with pytest.raises(ParameterError):
        train("mlp", data, {"hidden": [4]})
    with pytest.raises(ParameterError):
        train("mlp", data, {"hidden": [16, 16, 16]})
    with pytest.raises(ParameterError):
        train("forest", data)
    with pytest.raises(ParameterError):
        train("logistic", data, {"depth": 3})


def test_dimension_mismatch(models):
    for m in models.values():
        with pytest.raises(DimensionError):
            predict(m, np.ones(4))
        with pytest.raises(DimensionError):
            predict_proba(m, np.ones((2, 2)))


@pytest.mark.parametrize("family", FAMILIES)
def test_json_round_trip(models, family, data):
    m = models[family]
    back = model_from_dict(model_to_dict(m))
    assert back.family == family and back.classes == m.classes and back.tau == m.tau
    assert np.array_equal(predict_proba(back, data.X), predict_proba(m, data.X))
    d = model_to_dict(m)
    assert set(d) == {"schema_version", "family", "classes", "k_in", "tau", "params", "train_meta"}


def test_shape_scale_feature_map():
    W = np.array([[1.0, 3.0], [2.0, 6.0], [0.0, 0.0]])
    F = map_features("shape-scale", W)
    assert np.allclose(F[0, :2], [0.25, 0.75]) and np.allclose(F[0], F[1] - [0, 0, math.log(2)])
    assert np.all(np.isfinite(F))
    with pytest.raises(ParameterError):
        map_features("pca", W)


def test_shape_scale_model_accepts_codes(data):
    X = np.abs(data.X)
    m = train("rbf-svm", LabeledVectors(X, data.y, data.episode_ids), {"C": 10, "gamma": 0.5},
              feature_map="shape-scale")
    assert m.params["feature_map"] == "shape-scale"
    back = model_from_dict(model_to_dict(m))
    assert np.array_equal(predict_proba(back, X), predict_proba(m, X))
    with pytest.raises(DomainError):
        train("logistic", data, feature_map="shape-scale")  # blobs have negative coordinates


# ---------------------------------------------------------------- splitting and grid search

def test_split_is_episode_level_and_balanced():
    eps = np.repeat(np.arange(40), 7)
    labels = np.array([f"k{e // 5}" for e in eps], dtype=object)
    mask = split_train_test(eps, labels, 0.8, seed=1)
    for e in range(40):
        assert len(set(mask[eps == e])) == 1
    for c in range(8):
        n_train = len(set(eps[mask & (labels == f"k{c}")]))
        assert abs(n_train - 0.8 * 5) <= 1
    assert np.array_equal(mask, split_train_test(eps, labels, 0.8, seed=1))


def test_split_needs_two_episodes_per_class():
    with pytest.raises(StratificationError):
        split_train_test(np.array([0, 0, 1]), np.array(["a", "a", "b"], dtype=object))


def test_folds_are_grouped_and_stratified():
    eps = np.repeat(np.arange(48), 4)
    labels = np.array([f"k{e % 6}" for e in eps], dtype=object)
    folds = stratified_group_folds(eps, labels, 5, seed=0)
    for e in range(48):
        assert len(set(folds[eps == e])) == 1
    for c in range(6):
        n_class_eps = 8
        for f in range(5):
            n = len(set(eps[(folds == f) & (labels == f"k{c}")]))
            assert abs(n - n_class_eps / 5) < 1


def test_fold_errors():
    eps = np.arange(6)
    labels = np.array(["a"] * 3 + ["b"] * 3, dtype=object)
    with pytest.raises(StratificationError):
        stratified_group_folds(eps, labels, 4)
    with pytest.raises(ParameterError):
        stratified_group_folds(eps, labels, 1)


def test_expand_grid_order():
    pts = expand_grid({"gamma": [1, 2], "C": [10]})
    assert pts == [{"C": 10, "gamma": 1}, {"C": 10, "gamma": 2}]
    assert expand_grid({}) == [{}]


def test_single_point_grid(data):
    best, table = grid_search_cv("rbf-svm", data, {"C": [3.0], "gamma": [0.2]}, folds=3)
    assert best == {"C": 3.0, "gamma": 0.2} and len(table) == 1


def _stripes(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 4.0, 400)
    X = np.c_[x, rng.normal(0.0, 0.01, x.size)]
    y = np.where(np.floor(x) % 2 == 0, "even", "odd").astype(object)
    eps = np.arange(x.size) // 10 * 2 + (y == "odd")
    return LabeledVectors(X, y, eps)


def test_grid_search_finds_separating_kernel_width():
    data = _stripes()
    grid = {"C": [100.0], "gamma": [1e-3, 10.0, 3e4]}
    best, table = grid_search_cv("rbf-svm", data, grid, folds=5, seed=0)
    assert best["gamma"] == 10.0
    accs = {row["point"]["gamma"]: row["mean_accuracy"] for row in table}
    assert accs[10.0] > 0.95 and accs[1e-3] < 0.8 and accs[3e4] < 0.8
    # direct check of the planted band: train on half, score the other half
    tr = np.arange(len(data)) % 2 == 0
    for g, ok in [(10.0, True), (1e-3, False), (3e4, False)]:
        m = train("rbf-svm", data.subset(tr), {"C": 100.0, "gamma": g}, calibrate=False)
        acc = np.mean(predict(m, data.X[~tr]) == data.y[~tr])
        assert (acc > 0.9) == ok


def test_grid_ties_prefer_stronger_regularization(data):
    best, table = grid_search_cv("rbf-svm", data, {"C": [100.0, 1.0, 10.0], "gamma": [0.1, 0.05]}, folds=3)
    assert len({row["mean_accuracy"] for row in table}) == 1
    assert best == {"C": 1.0, "gamma": 0.05}
    best, _ = grid_search_cv("mlp", data, {"hidden": [[32], [16]], "alpha": [1e-4, 1e-2], "epochs": [60]},
                             folds=3)
    assert best["alpha"] == 1e-2 and best["hidden"] == [16]


def test_grid_search_deterministic(data):
    a = grid_search_cv("logistic", data, {"C": [0.1, 1.0]}, folds=3, seed=4)
    b = grid_search_cv("logistic", data, {"C": [0.1, 1.0]}, folds=3, seed=4)
    assert a == b


# ---------------------------------------------------------------- evaluation

def test_memorized_set_scores_perfectly(models, data):
    rep = evaluate(models["rbf-svm"], data, timing_samples=20)
    assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0
    assert rep.mean_inference_s > 0
    assert np.array_equal(rep.confusion.sum(axis=1), [30, 30, 30, 30])
    assert rep.accuracy == np.trace(rep.confusion) / rep.confusion.sum()


def test_deranged_labels_score_zero(models, data):
    m = models["rbf-svm"]
    shift = {c: m.classes[(i + 1) % len(m.classes)] for i, c in enumerate(m.classes)}
    wrong = LabeledVectors(data.X, np.array([shift[v] for v in data.y], dtype=object))
    rep = evaluate(m, wrong, timing_samples=0)
    assert rep.accuracy == 0.0 and rep.macro_f1 == 0.0


def test_macro_f1_hand_fixture():
    truth = ["a", "a", "a", "b", "b", "b", "c", "c", "c"]
    pred = ["a", "a", "b", "b", "b", "b", "a", "c", "c"]
    cm = confusion_matrix(truth, pred, ["a", "b", "c"])
    assert cm.tolist() == [[2, 1, 0], [0, 3, 0], [1, 0, 2]]
    # per-class F1 = 2TP / (2TP + FP + FN): a 4/6, b 6/7, c 4/5
    assert macro_f1(cm) == pytest.approx((4 / 6 + 6 / 7 + 4 / 5) / 3, abs=1e-12)
    assert macro_f1(cm) == pytest.approx(244 / 315, abs=1e-12)


def test_evaluate_errors(models):
    m = models["logistic"]
    with pytest.raises(ParameterError):
        evaluate(m, LabeledVectors(np.zeros((0, 3)), np.array([], dtype=object)))
    with pytest.raises(DimensionError):
        evaluate(m, LabeledVectors(np.zeros((2, 5)), np.array(["c0", "c1"], dtype=object)))


def test_within_pair_accuracy(models, data):
    m = models["rbf-svm"]
    partner = {"c0": "c1", "c1": "c0", "c2": "c3", "c3": "c2"}
    assert within_pair_accuracy(m, data, partner) == 1.0
    swapped = LabeledVectors(data.X, np.array([partner[v] for v in data.y], dtype=object))
    assert within_pair_accuracy(m, swapped, partner) == 0.0
    with pytest.raises(ParameterError):
        within_pair_accuracy(m, data, {"c0": "c1"})
