import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from froda.data import SyntheticSpec, generate_synthetic
from froda.inference import (
    ClassifierSpec,
    KNNClassifier,
    LearntWClassifier,
    OneVsOneLinearSVM,
    assign_known_unknown,
    coefficient_ratio,
    embed_shared,
    encode_targets,
    predict,
    train_open_classifier,
)
from froda.evaluation import score
from froda.model import HyperParams, fit_auto, fit_dfroda, fit_dfroda_u, fit_froda

seeds = st.integers(0, 2**32 - 1)


@pytest.fixture(scope="module")
def fitted():
    sc = generate_synthetic()
    model = fit_auto(sc.Xs, sc.Xt, sc.ys, "froda", HyperParams())
    return sc, model


@pytest.fixture(scope="module")
def fitted_dfroda():
    sc = generate_synthetic()
    model = fit_auto(sc.Xs, sc.Xt, sc.ys, "dfroda", HyperParams())
    return sc, model


# ---------------------------------------------------------------- ratio rule


def test_ratio_example():
    T = np.array([[1.0], [0.0], [0.0], [10.0]])
    ratio, deg = coefficient_ratio(T, 2)
    assert ratio[0] == pytest.approx(0.1) and not deg[0]


def test_ratio_division_conventions():
    T = np.array([[1.0, 0.0], [0.0, 0.0]])
    ratio, deg = coefficient_ratio(T, 1)
    assert ratio[0] == np.inf and not deg[0]
    assert ratio[1] == 0.0 and deg[1]


class _Stub:
    def __init__(self, T, d, eps=0.2):
        self.T = T
        self.d = d
        self.hyperparams = HyperParams(epsilon=eps)


def test_assignment_rule_and_tie():
    T = np.array([[1.0, 2.0, 1.0, 0.0, 5.0], [10.0, 10.0, 1.0, 0.0, 0.0]])
    a = assign_known_unknown(_Stub(T, 1), 0.2)
    # ratios: 0.1, 0.2 (tie), 1, degenerate, inf
    np.testing.assert_array_equal(a.is_unknown, [True, True, False, True, False])
    np.testing.assert_array_equal(a.degenerate, [False, False, False, True, False])
    assert a.n_unknown == 3 and len(a) == 5


def test_assignment_extremes():
    T = np.abs(np.random.default_rng(0).standard_normal((4, 9))) + 0.1
    assert assign_known_unknown(_Stub(T, 2), np.inf).is_unknown.all()
    assert not assign_known_unknown(_Stub(T, 2), 0.0).is_unknown.any()
    with pytest.raises(ValueError):
        assign_known_unknown(_Stub(T, 2), -1.0)


def test_assignment_default_epsilon_from_model():
    T = np.array([[1.0], [4.0]])
    assert assign_known_unknown(_Stub(T, 1, eps=0.3)).is_unknown[0]
    assert not assign_known_unknown(_Stub(T, 1, eps=0.2)).is_unknown[0]


@given(seeds, st.floats(1e-3, 1e3), st.floats(0, 3))
def test_assignment_invariant_to_column_scaling(seed, c, eps):
    rng = np.random.default_rng(seed)
    T = rng.standard_normal((4, 6))
    T[:, 0] = 0.0
    j = int(rng.integers(6))
    T2 = T.copy()
    T2[:, j] *= c
    a = assign_known_unknown(_Stub(T, 2), eps)
    b = assign_known_unknown(_Stub(T2, 2), eps)
    np.testing.assert_array_equal(a.is_unknown, b.is_unknown)


# ---------------------------------------------------------------- embeddings


def test_embed_training_sources_returns_cached_codes(fitted):
    sc, m = fitted
    np.testing.assert_array_equal(embed_shared(m, sc.Xs), m.S)
    np.testing.assert_array_equal(embed_shared(m, sc.Xt, role="target"), m.T[: m.d])
    np.testing.assert_array_equal(encode_targets(m, sc.Xt), m.T)


def test_embed_basis_vectors_gives_identity(fitted):
    _, m = fitted
    # columns of V mapped back to the original space
    X = m.projection.inverse_transform(m.V)
    np.testing.assert_allclose(embed_shared(m, X), np.eye(m.d), atol=1e-8)


def test_embed_empty_and_bad_input(fitted):
    sc, m = fitted
    assert embed_shared(m, np.zeros((sc.Xs.shape[0], 0))).shape == (m.d, 0)
    assert encode_targets(m, np.zeros((sc.Xs.shape[0], 0))).shape == (2 * m.d, 0)
    with pytest.raises(ValueError):
        embed_shared(m, sc.Xs, role="other")
    with pytest.raises(ValueError):
        embed_shared(m, np.zeros(5))


def test_encode_new_targets_matches_cached_codes(fitted):
    sc, m = fitted
    # a perturbation below solver accuracy forces a fresh group-lasso solve
    codes = encode_targets(m, sc.Xt + 1e-12)
    np.testing.assert_allclose(codes, m.T, atol=1e-3 * np.abs(m.T).max())


# ---------------------------------------------------------------- classifiers


def test_knn_k1_returns_training_labels():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 3))
    y = rng.integers(1, 4, 20)
    np.testing.assert_array_equal(KNNClassifier(1).fit(X, y).predict(X), y)


@given(seeds)
def test_knn_k1_self_accuracy(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((15, 2))
    y = rng.integers(1, 5, 15)
    assert KNNClassifier(1).fit(X, y).score(X, y) == 1.0


def test_knn_exclusion_and_fallback():
    X = np.array([[0.0], [0.1], [0.2], [5.0]])
    y = np.array([3, 3, 3, 1])
    knn = KNNClassifier(3).fit(X, y)
    assert knn.predict([[0.05]])[0] == 3
    # all three neighbours carry the excluded label: nearest allowed points vote
    assert knn.predict([[0.05]], exclude=(3,))[0] == 1
    with pytest.raises(ValueError):
        KNNClassifier(1).fit(X[:3], y[:3]).predict([[0.0]], exclude=(3,))


def test_knn_tie_goes_to_smallest_label():
    X = np.array([[-1.0], [1.0]])
    knn = KNNClassifier(2).fit(X, np.array([2, 1]))
    assert knn.predict([[0.0]])[0] == 1


def test_svm_separable_toy():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.uniform(-3, -1, (10, 2)), rng.uniform(1, 3, (10, 2))])
    X[:, 1] = rng.uniform(-1, 1, 20)
    y = np.repeat([1, 2], 10)
    svm = OneVsOneLinearSVM().fit(X, y)
    assert svm.score(X, y) == 1.0


@given(seeds, st.integers(2, 5))
def test_svm_vote_count(seed, C):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6 * C, 2)) + np.repeat(3 * rng.standard_normal((C, 2)), 6, axis=0)
    y = np.repeat(np.arange(1, C + 1), 6)
    svm = OneVsOneLinearSVM(epochs=50).fit(X, y)
    votes = svm.votes(X)
    assert votes.shape == (6 * C, C)
    np.testing.assert_array_equal(votes.sum(axis=1), C * (C - 1) // 2)
    pred = svm.predict(X)
    best = votes.max(axis=1)
    # ties resolved towards the smallest label
    for i in range(len(pred)):
        assert pred[i] == 1 + np.flatnonzero(votes[i] == best[i])[0]


def test_svm_deterministic():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((30, 3))
    y = rng.integers(1, 4, 30)
    a = OneVsOneLinearSVM(epochs=100).fit(X, y).votes(X)
    b = OneVsOneLinearSVM(epochs=100).fit(X, y).votes(X)
    np.testing.assert_array_equal(a, b)


def test_learnt_w_argmax():
    W = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    clf = LearntWClassifier(W, 2)
    codes = np.array([[2.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    np.testing.assert_array_equal(clf.predict(codes), [1, 2, 1])
    np.testing.assert_array_equal(clf.predict(codes, exclude=(1,)), [3, 2, 2])


def test_classifier_spec_validation():
    assert ClassifierSpec().k == 3
    assert ClassifierSpec(kind="svm").kind == "linear_svm_ovo"
    for kw in (dict(kind="forest"), dict(k=0), dict(svm_c=0), dict(svm_epochs=0), dict(feature_space="x"),
               dict(kind="learnt_w", feature_space="raw")):
        with pytest.raises(ValueError):
            ClassifierSpec(**kw)


# ---------------------------------------------------------------- pipeline


@pytest.mark.parametrize("kind", ["knn", "learnt_w", "svm"])
def test_synthetic_known_classes_recovered(fitted, kind):
    sc, m = fitted
    a = assign_known_unknown(m)
    clf = train_open_classifier(m, a, ClassifierSpec(kind=kind))
    pred = predict(m, clf, a)
    s = score(pred, sc.yt, 3)
    for c in (1, 2, 3):
        assert s.per_class[c] >= 0.9
    assert pred.min() >= 1 and pred.max() <= 4
    np.testing.assert_array_equal(pred == 4, a.is_unknown)


def test_learnt_w_uses_fitted_w(fitted_dfroda):
    sc, m = fitted_dfroda
    a = assign_known_unknown(m)
    clf = train_open_classifier(m, a, ClassifierSpec(kind="learnt_w"))
    assert clf.estimator.W is m.W
    pred = predict(m, clf, a)
    known = ~a.is_unknown
    expected = np.argmax(m.W @ m.T[: m.d, known], axis=0) + 1
    np.testing.assert_array_equal(pred[known], expected)


def test_raw_feature_space(fitted):
    sc, m = fitted
    a = assign_known_unknown(m)
    clf = train_open_classifier(m, a, ClassifierSpec(feature_space="raw"))
    pred = predict(m, clf, a)
    assert score(pred, sc.yt, 3).class_avg_accuracy >= 0.9


def test_all_unknown_predicts_unknown(fitted):
    sc, m = fitted
    a = assign_known_unknown(m, np.inf)
    clf = train_open_classifier(m, a)
    np.testing.assert_array_equal(predict(m, clf, a), 4)


def test_no_unknown_targets_warns_and_stays_known(fitted):
    sc, m = fitted
    a = assign_known_unknown(m, 0.0)
    with pytest.warns(RuntimeWarning, match="C-way"):
        clf = train_open_classifier(m, a)
    assert clf.n_unknown_train == 0
    pred = predict(m, clf, a)
    assert pred.max() <= 3


def test_predict_new_samples(fitted):
    sc, m = fitted
    fresh = generate_synthetic(replace(SyntheticSpec(), seed=0))
    T = encode_targets(m, fresh.Xt)
    a_new = assign_known_unknown(m, None, T)
    clf = train_open_classifier(m, assign_known_unknown(m))
    pred = predict(m, clf, a_new, fresh.Xt)
    assert score(pred, fresh.yt, 3).class_avg_accuracy >= 0.9
    with pytest.raises(ValueError):
        predict(m, clf, a_new, fresh.Xt[:, :5])


def test_missing_labels_rejected():
    sc = generate_synthetic(SyntheticSpec(D=12, d=2, C=2, n_per_class_source=6, n_per_class_target=4, n_unknown_target=4))
    m = fit_froda(sc.Xs, sc.Xt, HyperParams(d=2, outer_max_iter=2))
    with pytest.raises(ValueError, match="source labels"):
        train_open_classifier(m, assign_known_unknown(m))
    clf = train_open_classifier(m, assign_known_unknown(m), source_labels=sc.ys)
    assert clf.n_classes == 2


def test_dfroda_u_pipeline():
    sc = generate_synthetic(SyntheticSpec(n_unknown_source=20, seed=1))
    y = np.concatenate([sc.ys, np.full(20, 4)])
    m = fit_dfroda_u(sc.Xs, sc.Xs_unknown, sc.Xt, y, HyperParams(d=5, outer_max_iter=60))
    a = assign_known_unknown(m)
    for kind in ("knn", "learnt_w"):
        clf = train_open_classifier(m, a, ClassifierSpec(kind=kind))
        pred = predict(m, clf, a)
        s = score(pred, sc.yt, 3)
        assert s.unknown_f1 >= 0.9 and s.class_avg_accuracy >= 0.9


def test_dfroda_labels_from_model():
    sc = generate_synthetic(SyntheticSpec(D=12, d=2, C=2, n_per_class_source=6, n_per_class_target=4, n_unknown_target=4))
    m = fit_dfroda(sc.Xs, sc.Xt, sc.ys, HyperParams(d=2, outer_max_iter=2))
    clf = train_open_classifier(m, assign_known_unknown(m))
    assert clf.n_classes == 2


@given(st.floats(0, 10), st.sampled_from(["knn", "learnt_w", "svm"]), st.integers(1, 7))
def test_predict_stays_in_label_range(fitted_dfroda, eps, kind, k):
    _, m = fitted_dfroda
    a = assign_known_unknown(m, eps)
    with warnings.catch_warnings():
        # no unknown-assigned targets at small eps
        warnings.simplefilter("ignore", RuntimeWarning)
        clf = train_open_classifier(m, a, ClassifierSpec(kind=kind, k=k, svm_epochs=50))
        pred = predict(m, clf, a)
    assert pred.min() >= 1 and pred.max() <= m.n_classes + 1
    np.testing.assert_array_equal(pred == m.n_classes + 1, a.is_unknown)
