"""scikit-learn style wrapper around fit + assignment + classification.

Unlike the functional API, the estimator takes samples as rows.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .inference import (
    ClassifierSpec,
    assign_known_unknown,
    coefficient_ratio,
    encode_targets,
    predict,
    train_open_classifier,
)
from .model import HyperParams, fit_auto


class FRODAClassifier(ClassifierMixin, BaseEstimator):
    """Open-set domain adaptation classifier.

    Fits a shared/private subspace factorization of labelled source samples
    and unlabelled target samples, flags targets whose private coefficients
    dominate as unknown, and classifies the rest into the source classes.

    Parameters
    ----------
    variant : {"froda", "dfroda", "dfroda_u"}, default="froda"
    alpha, beta, lambda1, lambda2 : float
        Objective weights.
    epsilon : float, default=0.2
        A target is unknown when its shared/private norm ratio is ``<= epsilon``.
    d : int, default=0
        Subspace dimension; 0 selects it from the subspace disagreement measure.
    variance_fraction : float, default=0.99
        Variance kept by the joint PCA reduction.
    max_iter : int, default=200
    tol : float, default=1e-6
    classifier : {"knn", "learnt_w", "svm"}, default="knn"
    k : int, default=3
    svm_c : float, default=1.0
    svm_epochs : int, default=2000
    seed : int, default=0
    unknown_label : object, default=-1
        Label returned for unknown targets.

    Attributes
    ----------
    classes_ : ndarray
        Known source classes, sorted.
    model_ : FactorizedModel
    assignment_ : OpenSetAssignment
        Decision on the fitted targets.
    """

    def __init__(
        self,
        variant="froda",
        alpha=0.1,
        beta=0.01,
        lambda1=0.001,
        lambda2=0.001,
        epsilon=0.2,
        d=0,
        variance_fraction=0.99,
        max_iter=200,
        tol=1e-6,
        classifier="knn",
        k=3,
        svm_c=1.0,
        svm_epochs=2000,
        seed=0,
        unknown_label=-1,
    ):
        self.variant = variant
        self.alpha = alpha
        self.beta = beta
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.epsilon = epsilon
        self.d = d
        self.variance_fraction = variance_fraction
        self.max_iter = max_iter
        self.tol = tol
        self.classifier = classifier
        self.k = k
        self.svm_c = svm_c
        self.svm_epochs = svm_epochs
        self.seed = seed
        self.unknown_label = unknown_label

    def _hyperparams(self):
        return HyperParams(
            alpha=self.alpha,
            beta=self.beta,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            epsilon=self.epsilon,
            d=self.d,
            variance_fraction=self.variance_fraction,
            outer_max_iter=self.max_iter,
            outer_tol=self.tol,
        )

    def _spec(self):
        return ClassifierSpec(
            kind=self.classifier,
            k=self.k,
            svm_c=self.svm_c,
            svm_epochs=self.svm_epochs,
            seed=self.seed,
        )

    def fit(self, X, y, X_target, X_source_unknown=None):
        """Fit on source rows ``X`` with labels ``y`` and target rows ``X_target``.

        ``X_source_unknown`` holds source samples of classes that are not
        among ``y``; only the ``dfroda_u`` variant uses them.
        """
        X = check_array(X, dtype=float)
        X_target = check_array(X_target, dtype=float)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(f"y must have one label per source row ({X.shape[0]})")
        if X_target.shape[1] != X.shape[1]:
            raise ValueError(
                f"X_target has {X_target.shape[1]} features, X has {X.shape[1]}"
            )
        self.classes_, codes = np.unique(y, return_inverse=True)
        Xu = None
        if X_source_unknown is not None:
            Xu = check_array(X_source_unknown, dtype=float, ensure_min_samples=0).T
        spec = self._spec()
        self.model_ = fit_auto(
            X.T,
            X_target.T,
            labels=codes + 1,
            variant=self.variant,
            hp=self._hyperparams(),
            Xs_unknown=Xu if self.variant == "dfroda_u" else None,
        )
        self.assignment_ = assign_known_unknown(self.model_, self.epsilon)
        self.classifier_ = train_open_classifier(self.model_, self.assignment_, spec)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_X(self, X):
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return X

    def _to_labels(self, labels):
        C = len(self.classes_)
        dtype = np.result_type(self.classes_.dtype, np.asarray(self.unknown_label).dtype)
        out = np.empty(labels.shape[0], dtype=dtype)
        unknown = labels == C + 1
        out[unknown] = self.unknown_label
        out[~unknown] = self.classes_[labels[~unknown] - 1]
        return out

    def predict(self, X=None):
        """Class labels of target rows; ``unknown_label`` for unknown samples.

        ``X=None`` returns the decisions for the targets seen in ``fit``.
        """
        check_is_fitted(self, "model_")
        if X is None:
            labels = predict(self.model_, self.classifier_, self.assignment_)
        else:
            X = self._check_X(X)
            T = encode_targets(self.model_, X.T)
            assignment = assign_known_unknown(self.model_, self.epsilon, T)
            labels = predict(self.model_, self.classifier_, assignment, X.T)
        return self._to_labels(labels)

    def transform(self, X=None):
        """Target codes over the shared then private bases, one row per sample."""
        check_is_fitted(self, "model_")
        if X is None:
            return self.model_.T.T.copy()
        return encode_targets(self.model_, self._check_X(X).T).T

    def decision_function(self, X=None):
        """Shared/private coefficient norm ratio; small values mean unknown."""
        T = self.transform(X).T
        return coefficient_ratio(T, self.model_.d)[0]
