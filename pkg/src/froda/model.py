"""Block-coordinate fitting of the factorized shared/private subspace models.

Three variants share one alternating loop:

``froda``
    target reconstruction on ``[V, U]`` with per-sample group sparsity, plus a
    weighted source reconstruction on ``V``.
``dfroda``
    adds a least-squares linear classifier ``W`` on the source codes.
``dfroda_u``
    also models unknown-class source samples with a source-private
    subspace ``U_src`` and group-sparse source codes over ``[V, U_src]``.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from ._validation import check_feature_matrix, check_labels, check_one_hot, one_hot
from .solvers import (
    GroupSpec,
    JointProjection,
    SolverConfig,
    auto_ridge_least_squares,
    dictionary_update,
    group_lasso_solve,
    group_norm_sum,
    joint_pca_reduce,
    pca_basis,
    subspace_disagreement_dim,
    truncated_null_space,
    _numerical_rank,
)

logger = logging.getLogger(__name__)

VARIANTS = ("froda", "dfroda", "dfroda_u")


@dataclass(frozen=True)
class HyperParams:
    """Model weights, threshold and iteration budgets.

    The defaults are ``alpha=0.1``, ``beta=0.01``,
    ``lambda=0.001`` (used for both group-sparsity weights) and ``epsilon=0.2``.
    ``d=0`` selects the subspace dimension automatically.
    """

    alpha: float = 0.1
    beta: float = 0.01
    lambda1: float = 0.001
    lambda2: float = 0.001
    epsilon: float = 0.2
    d: int = 0
    variance_fraction: float = 0.99
    outer_max_iter: int = 200
    outer_tol: float = 1e-6
    inner: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        for name in ("beta", "lambda1", "lambda2", "epsilon", "outer_tol"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if int(self.d) < 0:
            raise ValueError(f"d must be >= 0, got {self.d}")
        if int(self.outer_max_iter) < 1:
            raise ValueError("outer_max_iter must be >= 1")
        if not 0 < self.variance_fraction <= 1:
            raise ValueError("variance_fraction must lie in (0, 1]")

    def as_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "inner"}
        out["inner"] = dict(vars(self.inner))
        return out


@dataclass
class FactorizedModel:
    """Learned subspaces, codes and diagnostics of one fit.

    ``S`` holds the source codes: ``d x n_s`` for ``froda``/``dfroda`` and the
    grouped ``2d x n_s`` codes over ``[V, U_src]`` for ``dfroda_u``. ``T`` holds
    the target codes over ``[V, U]``. ``Xs`` and ``Xt`` are the (reduced)
    training matrices the model was fitted on.
    """

    variant: str
    V: np.ndarray
    U: np.ndarray
    S: np.ndarray
    T: np.ndarray
    Xs: np.ndarray
    Xt: np.ndarray
    hyperparams: HyperParams
    U_src: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None
    source_labels: Optional[np.ndarray] = None
    n_classes: Optional[int] = None
    n_source_known: Optional[int] = None
    projection: Optional[JointProjection] = None
    objective_trace: List[float] = field(default_factory=list)
    block_trace: List[tuple] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    fit_seconds: float = 0.0
    iter_seconds: List[float] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.V.shape[1]

    @property
    def groups(self) -> GroupSpec:
        return GroupSpec.from_sizes([self.d, self.d])

    @property
    def B(self):
        return np.hstack([self.V, self.U])

    @property
    def B_src(self):
        return None if self.U_src is None else np.hstack([self.V, self.U_src])

    @property
    def T_v(self):
        return self.T[: self.d]

    @property
    def T_u(self):
        return self.T[self.d :]

    @property
    def S_shared(self):
        """Source codes on the shared subspace."""
        return self.S[: self.d] if self.variant == "dfroda_u" else self.S

    @property
    def per_iter_seconds(self) -> float:
        return float(np.mean(self.iter_seconds)) if self.iter_seconds else 0.0


def _label_matrix(labels, n_samples, n_rows=None):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        L = check_one_hot(labels)
        if L.shape[1] != n_samples:
            raise ValueError(
                f"label matrix has {L.shape[1]} columns, expected {n_samples}"
            )
        return L
    y = check_labels(labels, n_samples)
    return one_hot(y, n_rows if n_rows is not None else int(y.max()))


def _labels_from_matrix(L):
    return np.argmax(L, axis=0).astype(int) + 1


def objective(model, Xs, Xt, hp, labels=None):
    """Full objective of ``model``'s variant on the given (reduced) data.

    ``Xs`` is the source matrix the source codes refer to (known and unknown
    source samples concatenated for ``dfroda_u``); ``labels`` is the one-hot
    label matrix used by the discriminative variants.
    """
    Xs = np.asarray(Xs, dtype=float)
    Xt = np.asarray(Xt, dtype=float)
    groups = model.groups
    if Xt.shape != (model.V.shape[0], model.T.shape[1]):
        raise ValueError("Xt does not match the model's target codes")
    if Xs.shape != (model.V.shape[0], model.S.shape[1]):
        raise ValueError("Xs does not match the model's source codes")
    Rt = Xt - model.B @ model.T
    value = float(np.sum(Rt * Rt)) + hp.lambda1 * group_norm_sum(model.T, groups)
    if model.variant == "dfroda_u":
        Rs = Xs - model.B_src @ model.S
        value += hp.lambda2 * group_norm_sum(model.S, groups)
    else:
        Rs = Xs - model.V @ model.S
    value += hp.alpha * float(np.sum(Rs * Rs))
    if model.variant != "froda" and model.W is not None and labels is not None:
        Rl = np.asarray(labels) - model.W @ model.S
        value += hp.beta * float(np.sum(Rl * Rl))
    return value


def objective_froda(model, Xs, Xt, hp):
    """Reconstruction plus target group-sparsity objective."""
    if model.variant != "froda":
        model = replace(model, variant="froda")
    return objective(model, Xs, Xt, hp)


def _update_S(V, Xs, alpha, beta, W=None, L=None, ridge=0.0):
    if beta == 0 or W is None:
        return auto_ridge_least_squares(V, Xs, ridge)
    a, b = np.sqrt(alpha), np.sqrt(beta)
    V_new = np.vstack([a * V, b * W])
    X_new = np.vstack([a * Xs, b * L])
    return auto_ridge_least_squares(V_new, X_new, ridge)


def _update_W(S, L, ridge=0.0):
    # min_W ||L - W S||_F^2 solved on the transposed system
    return auto_ridge_least_squares(S.T, L.T, ridge).T


def _check_pair(Xs, Xt):
    Xs = check_feature_matrix(Xs, name="Xs")
    Xt = check_feature_matrix(Xt, name="Xt")
    if Xs.shape[0] != Xt.shape[0]:
        raise ValueError(
            f"dimension mismatch: Xs has {Xs.shape[0]} features, Xt {Xt.shape[0]}"
        )
    return Xs, Xt


def _fit(
    variant,
    Xs,
    Xt,
    hp,
    L=None,
    Xs_unknown=None,
    trace_blocks=False,
    callback=None,
):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    Xs, Xt = _check_pair(Xs, Xt)
    D = Xs.shape[0]
    d = int(hp.d)
    if d < 1:
        raise ValueError("d must be >= 1 here; use fit_auto for automatic selection")
    n_private = 2 if variant == "dfroda_u" else 1
    if (1 + n_private) * d > D:
        raise ValueError(
            f"d={d} is unattainable: {1 + n_private} subspaces of dimension d "
            f"need at least {(1 + n_private) * d} features, have {D}"
        )
    cfg = hp.inner
    groups = GroupSpec.from_sizes([d, d])

    # initialization: PCA shared basis, null-space private bases
    V = pca_basis(Xs, dim=d)
    null = truncated_null_space(V, n_private * d)
    U = null[:, :d]
    U_src = null[:, d:] if variant == "dfroda_u" else None

    if variant == "dfroda_u":
        Xs_all = np.hstack([Xs, Xs_unknown])
    else:
        Xs_all = Xs

    T = group_lasso_solve(Xt, np.hstack([V, U]), groups, hp.lambda1, cfg)
    W = None
    a = np.sqrt(hp.alpha)
    if variant == "dfroda_u":
        S = group_lasso_solve(
            a * Xs_all, a * np.hstack([V, U_src]), groups, hp.lambda2, cfg
        )
        W = _update_W(S, L, cfg.ridge)
    else:
        S = auto_ridge_least_squares(V, Xs, cfg.ridge)
        if variant == "dfroda":
            W = _update_W(S, L, cfg.ridge)

    model = FactorizedModel(
        variant=variant,
        V=V,
        U=U,
        S=S,
        T=T,
        Xs=Xs_all,
        Xt=Xt,
        hyperparams=hp,
        U_src=U_src,
        W=W,
        n_source_known=Xs.shape[1],
    )

    def current():
        model.V, model.U, model.U_src, model.S, model.T, model.W = V, U, U_src, S, T, W
        return objective(model, Xs_all, Xt, hp, L)

    prev = current()
    model.objective_trace.append(prev)
    if trace_blocks:
        model.block_trace.append((0, "init", prev))

    def mark(it, name):
        if trace_blocks:
            model.block_trace.append((it, name, current()))

    start = time.perf_counter()
    for it in range(1, int(hp.outer_max_iter) + 1):
        t0 = time.perf_counter()
        # target-private subspace
        U = dictionary_update(Xt - V @ T[:d], T[d:], cfg, warm_start=U)
        mark(it, "U")
        if variant == "dfroda_u":
            U_src = dictionary_update(
                Xs_all - V @ S[:d], S[d:], cfg, warm_start=U_src
            )
            mark(it, "U_src")
            A_stack = np.hstack([Xt - U @ T[d:], a * (Xs_all - U_src @ S[d:])])
            C_stack = np.hstack([T[:d], a * S[:d]])
        else:
            A_stack = np.hstack([Xt - U @ T[d:], a * Xs])
            C_stack = np.hstack([T[:d], a * S])
        # shared subspace, one dual problem over the stacked system
        V = dictionary_update(A_stack, C_stack, cfg, warm_start=V)
        mark(it, "V")
        T = group_lasso_solve(Xt, np.hstack([V, U]), groups, hp.lambda1, cfg, T)
        mark(it, "T")
        if variant == "dfroda_u":
            b = np.sqrt(hp.beta)
            S = group_lasso_solve(
                np.vstack([a * Xs_all, b * L]),
                np.vstack([a * np.hstack([V, U_src]), b * W]),
                groups,
                hp.lambda2,
                cfg,
                S,
            )
        else:
            S = _update_S(V, Xs, hp.alpha, hp.beta, W, L, cfg.ridge)
        mark(it, "S")
        if variant != "froda":
            W = _update_W(S, L, cfg.ridge)
            mark(it, "W")
        value = current()
        model.objective_trace.append(value)
        model.iter_seconds.append(time.perf_counter() - t0)
        model.n_iter = it
        if callback is not None:
            callback(it, value)
        change = abs(prev - value) / max(abs(prev), np.finfo(float).tiny)
        prev = value
        if change < hp.outer_tol:
            model.converged = True
            break
    model.fit_seconds = time.perf_counter() - start
    current()
    return model


def fit_froda(Xs, Xt, hp=None, *, trace_blocks=False, callback=None):
    """Fit the unsupervised factorization.

    Parameters
    ----------
    Xs : ndarray of shape (n_features, n_source)
    Xt : ndarray of shape (n_features, n_target)
    hp : HyperParams
        ``hp.d`` must be positive; see :func:`fit_auto` for automatic ``d``.
    trace_blocks : bool
        Record the objective after every block update in ``model.block_trace``.
    callback : callable, optional
        Called as ``callback(iteration, objective)`` after each outer iteration.
    """
    hp = hp or HyperParams()
    return _fit("froda", Xs, Xt, hp, trace_blocks=trace_blocks, callback=callback)


def fit_dfroda(Xs, Xt, labels, hp=None, *, trace_blocks=False, callback=None):
    """Fit the discriminative factorization.

    ``labels`` is either a vector of 1-based class ids or a ``C x n_s`` one-hot
    matrix. Each outer iteration updates ``U, V, T, S, W`` in that order.
    """
    hp = hp or HyperParams()
    Xs = check_feature_matrix(Xs, name="Xs")
    L = _label_matrix(labels, Xs.shape[1])
    model = _fit("dfroda", Xs, Xt, hp, L=L, trace_blocks=trace_blocks, callback=callback)
    model.source_labels = _labels_from_matrix(L)
    model.n_classes = L.shape[0]
    return model


def fit_dfroda_u(
    Xs_known,
    Xs_unknown,
    Xt,
    labels_with_unknown,
    hp=None,
    *,
    trace_blocks=False,
    callback=None,
):
    """Fit the discriminative factorization with unknown-class source samples.

    ``labels_with_unknown`` covers ``[Xs_known, Xs_unknown]``: either 1-based ids
    where the unknown source samples carry ``C + 1``, or a ``(C + 1) x n_s``
    one-hot matrix. Each outer iteration updates ``U, U_src, V, T, S, W``.
    """
    hp = hp or HyperParams()
    Xs_known = check_feature_matrix(Xs_known, name="Xs_known")
    Xs_unknown = check_feature_matrix(Xs_unknown, name="Xs_unknown", allow_empty=True)
    if Xs_unknown.size == 0:
        Xs_unknown = np.zeros((Xs_known.shape[0], 0))
    if Xs_unknown.shape[0] != Xs_known.shape[0]:
        raise ValueError("known and unknown source samples differ in dimension")
    n_k, n_u = Xs_known.shape[1], Xs_unknown.shape[1]
    labels = np.asarray(labels_with_unknown)
    if labels.ndim == 2:
        L = _label_matrix(labels, n_k + n_u)
    else:
        y = check_labels(labels, n_k + n_u)
        n_classes = int(y[:n_k].max())
        if np.any(y[:n_k] > n_classes) or np.any(y[n_k:] != n_classes + 1):
            raise ValueError("unknown source samples must carry label C + 1")
        L = one_hot(y, n_classes + 1)
    model = _fit(
        "dfroda_u",
        Xs_known,
        Xt,
        hp,
        L=L,
        Xs_unknown=Xs_unknown,
        trace_blocks=trace_blocks,
        callback=callback,
    )
    model.source_labels = _labels_from_matrix(L)
    model.n_classes = L.shape[0] - 1
    return model


def default_d_max(Xs, Xt, n_subspaces=2):
    """Largest ``d`` the SDM search may return for this data."""
    D = Xs.shape[0]
    rank_s = _numerical_rank(
        np.linalg.svd(Xs - Xs.mean(axis=1, keepdims=True), compute_uv=False), Xs.shape
    )
    rank_t = _numerical_rank(
        np.linalg.svd(Xt - Xt.mean(axis=1, keepdims=True), compute_uv=False), Xt.shape
    )
    return max(1, min(D // n_subspaces, rank_s, rank_t))


def fit_auto(
    Xs,
    Xt,
    labels=None,
    variant="froda",
    hp=None,
    Xs_unknown=None,
    *,
    trace_blocks=False,
    callback=None,
):
    """Joint PCA reduction, automatic ``d`` and dispatch to the variant's fit.

    All inputs are in the original feature space. The returned model carries
    the joint projection so new samples can be encoded later.
    """
    hp = hp or HyperParams()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant != "froda" and labels is None:
        raise ValueError(f"variant {variant!r} needs source labels")
    Xs, Xt = _check_pair(Xs, Xt)
    if variant == "dfroda_u":
        if Xs_unknown is None:
            Xs_unknown = np.zeros((Xs.shape[0], 0))
        Xs_unknown = check_feature_matrix(
            Xs_unknown, name="Xs_unknown", allow_empty=True
        ).reshape(Xs.shape[0], -1)
        pooled_source = np.hstack([Xs, Xs_unknown])
    else:
        pooled_source = Xs
    _, _, projection = joint_pca_reduce(pooled_source, Xt, hp.variance_fraction)
    Xs_r = projection.transform(Xs)
    Xt_r = projection.transform(Xt)
    n_sub = 3 if variant == "dfroda_u" else 2
    d = int(hp.d)
    if d == 0:
        d_max = default_d_max(Xs_r, Xt_r, n_sub)
        d = subspace_disagreement_dim(Xs_r, Xt_r, d_max)
        logger.info("subspace disagreement selected d=%d (d_max=%d)", d, d_max)
    hp_fit = replace(hp, d=d)
    kwargs = dict(trace_blocks=trace_blocks, callback=callback)
    if variant == "froda":
        model = fit_froda(Xs_r, Xt_r, hp_fit, **kwargs)
        if labels is not None:
            y = check_labels(labels, Xs.shape[1])
            model.source_labels = y
            model.n_classes = int(y.max())
    elif variant == "dfroda":
        model = fit_dfroda(Xs_r, Xt_r, labels, hp_fit, **kwargs)
    else:
        Xu_r = projection.transform(Xs_unknown)
        labels = np.asarray(labels)
        if labels.ndim == 1 and labels.size == Xs.shape[1]:
            y = check_labels(labels, Xs.shape[1])
            labels = np.concatenate([y, np.full(Xu_r.shape[1], y.max() + 1)])
        model = fit_dfroda_u(Xs_r, Xu_r, Xt_r, labels, hp_fit, **kwargs)
    model.projection = projection
    return model
