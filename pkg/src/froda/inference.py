"""Known/unknown assignment and (C+1)-way classification of target samples."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .solvers import auto_ridge_least_squares, group_lasso_solve

CLASSIFIERS = ("knn", "learnt_w", "linear_svm_ovo")
_ALIASES = {"svm": "linear_svm_ovo", "w": "learnt_w", "nn": "knn"}


@dataclass(frozen=True)
class OpenSetAssignment:
    """Per-target known/unknown decision from the coefficient ratio.

    ``ratio`` is ``||T_i^v|| / ||T_i^u||`` (``inf`` when only the shared part is
    non-zero, ``0`` when both parts vanish); ``degenerate`` flags the samples
    neither subspace reconstructs.
    """

    is_unknown: np.ndarray
    ratio: np.ndarray
    degenerate: np.ndarray
    epsilon: float

    @property
    def n_unknown(self) -> int:
        return int(self.is_unknown.sum())

    def __len__(self):
        return self.ratio.size


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str = "knn"
    k: int = 3
    svm_c: float = 1.0
    svm_epochs: int = 2000
    seed: int = 0
    feature_space: str = "embedding"

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in CLASSIFIERS:
            raise ValueError(f"unknown classifier {self.kind!r}; expected one of {CLASSIFIERS}")
        object.__setattr__(self, "kind", kind)
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.svm_c > 0:
            raise ValueError(f"svm_c must be > 0, got {self.svm_c}")
        if int(self.svm_epochs) < 1:
            raise ValueError("svm_epochs must be >= 1")
        if self.feature_space not in ("embedding", "raw"):
            raise ValueError("feature_space must be 'embedding' or 'raw'")
        if kind == "learnt_w" and self.feature_space == "raw":
            raise ValueError("learnt_w maps shared-subspace codes; it needs feature_space='embedding'")


def coefficient_ratio(T, d):
    """Ratio of shared to private coefficient norms per column of ``T``."""
    T = np.asarray(T, dtype=float)
    nv = np.linalg.norm(T[:d], axis=0)
    nu = np.linalg.norm(T[d:], axis=0)
    degenerate = (nv == 0) & (nu == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(nu > 0, nv / np.where(nu > 0, nu, 1.0), np.inf)
    ratio[degenerate] = 0.0
    return ratio, degenerate


def assign_known_unknown(model, epsilon=None, T=None):
    """Flag targets with ``ratio <= epsilon`` as unknown.

    ``T`` defaults to the model's fitted target codes; pass codes from
    :func:`encode_targets` to assign unseen samples.
    """
    if epsilon is None:
        epsilon = model.hyperparams.epsilon
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    T = model.T if T is None else T
    ratio, degenerate = coefficient_ratio(T, model.d)
    return OpenSetAssignment(ratio <= epsilon, ratio, degenerate, float(epsilon))


def _reduce(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D (features x samples) matrix")
    if model.projection is not None:
        return model.projection.transform(X)
    if X.shape[0] != model.V.shape[0]:
        raise ValueError(f"expected {model.V.shape[0]} features, got {X.shape[0]}")
    return X


def encode_targets(model, X):
    """Target codes over ``[V, U]`` for samples in the original feature space."""
    Xr = _reduce(model, X)
    if Xr.shape == model.Xt.shape and np.array_equal(Xr, model.Xt):
        return model.T.copy()
    if Xr.shape[1] == 0:
        return np.zeros((2 * model.d, 0))
    hp = model.hyperparams
    return group_lasso_solve(Xr, model.B, model.groups, hp.lambda1, hp.inner)


def embed_shared(model, X, role="source"):
    """Shared-subspace codes of samples given in the original feature space.

    Source-role samples are coded by least squares on ``V``; target-role
    samples get the shared block of their group-lasso codes. The fitted
    training matrices map to the cached codes.
    """
    if role not in ("source", "target"):
        raise ValueError("role must be 'source' or 'target'")
    Xr = _reduce(model, X)
    if Xr.shape[1] == 0:
        return np.zeros((model.d, 0))
    if role == "target":
        return encode_targets(model, X)[: model.d]
    n_known = model.n_source_known or model.Xs.shape[1]
    if Xr.shape == model.Xs.shape and np.array_equal(Xr, model.Xs):
        return model.S_shared.copy()
    if model.variant != "dfroda_u" and Xr.shape[1] == n_known and np.array_equal(
        Xr, model.Xs[:, :n_known]
    ):
        return model.S_shared[:, :n_known].copy()
    return auto_ridge_least_squares(model.V, Xr, model.hyperparams.inner.ridge)


class KNNClassifier(ClassifierMixin, BaseEstimator):
    """Euclidean k-nearest-neighbour vote; ties go to the smallest label.

    ``predict(X, exclude=...)`` ignores the votes of the excluded labels and
    falls back to the nearest allowed training points when none remain.
    """

    def __init__(self, k=3):
        self.k = k

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.X_ = X
        self.y_ = y.astype(int)
        self.classes_ = np.unique(self.y_)
        return self

    def predict(self, X, exclude=()):
        check_is_fitted(self, "X_")
        X = check_array(X)
        allowed = ~np.isin(self.y_, list(exclude))
        if not allowed.any():
            raise ValueError("every training label is excluded")
        dist = cdist(X, self.X_)
        order = np.argsort(dist, axis=1, kind="stable")
        k = min(int(self.k), self.X_.shape[0])
        out = np.empty(X.shape[0], dtype=int)
        allowed_idx = np.flatnonzero(allowed)
        for i in range(X.shape[0]):
            nbrs = order[i, :k]
            votes = self.y_[nbrs][allowed[nbrs]]
            if votes.size == 0:
                near = allowed_idx[np.argsort(dist[i, allowed_idx], kind="stable")[:k]]
                votes = self.y_[near]
            labels, counts = np.unique(votes, return_counts=True)
            out[i] = labels[np.argmax(counts)]
        return out


class OneVsOneLinearSVM(ClassifierMixin, BaseEstimator):
    """One-vs-one linear SVMs trained on the squared-hinge primal.

    Each pairwise problem ``0.5 ||w||^2 + C sum max(0, 1 - y (w.x + b))^2`` is
    minimized by deterministic full-batch accelerated gradient descent with
    step ``1/L`` for ``epochs`` iterations. Prediction counts one vote per
    pair; ties go to the smallest class label.
    """

    def __init__(self, C=1.0, epochs=2000, seed=0):
        self.C = C
        self.epochs = epochs
        self.seed = seed

    def _fit_pair(self, X, y):
        Xa = np.hstack([X, np.ones((X.shape[0], 1))])
        reg = np.ones(Xa.shape[1])
        reg[-1] = 0.0
        L = 1.0 + 2.0 * self.C * np.linalg.norm(Xa, 2) ** 2
        w = np.zeros(Xa.shape[1])
        z = w.copy()
        t = 1.0
        for _ in range(int(self.epochs)):
            margin = 1.0 - y * (Xa @ z)
            active = margin > 0
            grad = reg * z - 2.0 * self.C * (Xa[active].T @ (y[active] * margin[active]))
            w_next = z - grad / L
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            z = w_next + ((t - 1.0) / t_next) * (w_next - w)
            w, t = w_next, t_next
        return w

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        y = y.astype(int)
        self.classes_ = np.unique(y)
        self.pairs_ = []
        self.coef_ = []
        for i, a in enumerate(self.classes_):
            for b in self.classes_[i + 1 :]:
                mask = (y == a) | (y == b)
                target = np.where(y[mask] == a, 1.0, -1.0)
                self.pairs_.append((a, b))
                self.coef_.append(self._fit_pair(X[mask], target))
        self.coef_ = np.array(self.coef_).reshape(len(self.pairs_), X.shape[1] + 1)
        return self

    def votes(self, X):
        check_is_fitted(self, "classes_")
        X = check_array(X)
        votes = np.zeros((X.shape[0], self.classes_.size), dtype=int)
        if len(self.classes_) == 1:
            votes[:, 0] = 1
            return votes
        index = {c: i for i, c in enumerate(self.classes_)}
        Xa = np.hstack([X, np.ones((X.shape[0], 1))])
        scores = Xa @ self.coef_.T
        for p, (a, b) in enumerate(self.pairs_):
            win_a = scores[:, p] >= 0
            votes[win_a, index[a]] += 1
            votes[~win_a, index[b]] += 1
        return votes

    def predict(self, X, exclude=()):
        votes = self.votes(X)
        allowed = ~np.isin(self.classes_, list(exclude))
        if not allowed.any():
            raise ValueError("every class is excluded")
        votes = np.where(allowed, votes, -1)
        return self.classes_[np.argmax(votes, axis=1)]


class LearntWClassifier:
    """Argmax over the rows of a learnt linear map (first ``n_classes`` rows)."""

    def __init__(self, W, n_classes):
        self.W = np.asarray(W, dtype=float)
        self.n_classes = int(n_classes)

    def scores(self, codes):
        return np.asarray(codes, dtype=float) @ self.W.T

    def predict(self, codes, exclude=()):
        s = self.scores(codes)
        labels = np.arange(1, s.shape[1] + 1)
        allowed = ~np.isin(labels, list(exclude))
        s = np.where(allowed, s, -np.inf)
        return labels[np.argmax(s, axis=1)]


@dataclass
class OpenSetClassifier:
    """A trained classifier plus how to embed samples for it."""

    spec: ClassifierSpec
    estimator: object
    n_classes: int
    n_unknown_train: int


def _source_labels(model, source_labels):
    if source_labels is not None:
        y = np.asarray(source_labels, dtype=int)
    elif model.source_labels is not None:
        y = np.asarray(model.source_labels, dtype=int)
    else:
        raise ValueError("source labels are required to train a classifier")
    return y


def _target_features(model, spec, T, Xt_reduced=None):
    if spec.feature_space == "raw":
        return (model.Xt if Xt_reduced is None else Xt_reduced).T
    if spec.kind == "learnt_w" and model.variant == "dfroda_u":
        return T.T
    return T[: model.d].T


def train_open_classifier(model, assignment, spec=None, source_labels=None):
    """Train the (C+1)-way classifier on source codes plus unknown-assigned targets.

    Source samples keep their labels ``1..C``; targets flagged unknown join as
    class ``C + 1``. With no flagged target the classifier is C-way and the
    unknown label still comes from the ratio rule alone.
    """
    spec = spec or ClassifierSpec()
    y_all = _source_labels(model, source_labels)
    n_known = model.n_source_known or model.Xs.shape[1]
    if model.variant == "dfroda_u":
        n_classes = model.n_classes
    else:
        n_classes = model.n_classes or int(y_all[:n_known].max())
    if spec.kind == "learnt_w":
        W = model.W
        if W is None:
            # post-hoc least-squares map for the unsupervised variant
            from ._validation import one_hot

            y = y_all[:n_known]
            L = one_hot(y, n_classes)
            W = auto_ridge_least_squares(model.S_shared[:, :n_known].T, L.T).T
        return OpenSetClassifier(spec, LearntWClassifier(W, n_classes), n_classes, 0)
    if model.variant == "dfroda_u":
        y = y_all
        src = model.Xs if spec.feature_space == "raw" else model.S_shared
    else:
        y = y_all[:n_known]
        src = model.Xs[:, :n_known] if spec.feature_space == "raw" else model.S_shared[:, :n_known]
    tgt = _target_features(model, spec, model.T)[assignment.is_unknown]
    X_train = np.vstack([src.T, tgt])
    y_train = np.concatenate([y, np.full(tgt.shape[0], n_classes + 1)])
    if tgt.shape[0] == 0:
        warnings.warn(
            "no target sample was assigned unknown; training a C-way classifier",
            RuntimeWarning,
            stacklevel=2,
        )
    if spec.kind == "knn":
        est = KNNClassifier(k=spec.k)
    else:
        est = OneVsOneLinearSVM(C=spec.svm_c, epochs=spec.svm_epochs, seed=spec.seed)
    est.fit(X_train, y_train)
    return OpenSetClassifier(spec, est, n_classes, int(tgt.shape[0]))


def predict(model, classifier, assignment, Xt=None):
    """Labels in ``1..C+1``: ``C+1`` for unknown-assigned targets, the
    classifier's known-class prediction for the rest.

    ``Xt`` defaults to the fitted targets; for new samples pass them in the
    original feature space together with an assignment computed from
    :func:`encode_targets`.
    """
    C = classifier.n_classes
    if Xt is None:
        T = model.T
        Xr = model.Xt
    else:
        T = encode_targets(model, Xt)
        Xr = _reduce(model, Xt)
    if T.shape[1] != len(assignment):
        raise ValueError("assignment and targets differ in length")
    labels = np.full(T.shape[1], C + 1, dtype=int)
    known = ~assignment.is_unknown
    if known.any():
        feats = _target_features(model, classifier.spec, T, Xr)[known]
        labels[known] = classifier.estimator.predict(feats, exclude=(C + 1,))
    return labels
