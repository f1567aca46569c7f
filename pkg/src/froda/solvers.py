"""Numerical kernels shared by the factorized models.

All matrices follow the column-sample convention: a feature matrix has shape
``(n_features, n_samples)`` and a coefficient matrix ``(n_atoms, n_samples)``.
"""

import warnings
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import scipy.linalg

from ._validation import check_feature_matrix

RIDGE_FLOOR = 1e-8
RIDGE_COND_MAX = 1e12
SDM_THRESHOLD = 1.0 - 1e-6


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and budgets of the inner solvers.

    Parameters
    ----------
    tol : float
        The proximal gradient solver stops once a prox-gradient step moves the
        codes by less than ``tol`` times their norm.
    max_iter : int
        Iteration cap of the proximal gradient solver.
    ridge : float
        Extra ridge added to least-squares and dictionary systems.
    dual_tol : float
        Projected-gradient tolerance of the dictionary dual (on squared norms).
    dual_max_iter : int
        Newton iteration cap of the dictionary dual.
    """

    tol: float = 1e-8
    max_iter: int = 500
    ridge: float = 0.0
    dual_tol: float = 1e-10
    dual_max_iter: int = 200

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if not self.dual_tol > 0:
            raise ValueError(f"dual_tol must be > 0, got {self.dual_tol}")
        if int(self.max_iter) < 1 or int(self.dual_max_iter) < 1:
            raise ValueError("max_iter and dual_max_iter must be >= 1")
        if not self.ridge >= 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")


@dataclass(frozen=True)
class GroupSpec:
    """Partition of coefficient rows into contiguous ``(start, stop)`` blocks."""

    groups: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        groups = tuple((int(a), int(b)) for a, b in self.groups)
        if not groups:
            raise ValueError("GroupSpec needs at least one group")
        expected = 0
        for start, stop in groups:
            if start != expected or stop <= start:
                raise ValueError(
                    f"groups must be contiguous, non-empty and ordered; got {groups}"
                )
            expected = stop
        object.__setattr__(self, "groups", groups)
        # cached for the vectorized group reductions
        object.__setattr__(self, "_starts", np.array([a for a, _ in groups]))
        object.__setattr__(self, "_sizes", np.array([b - a for a, b in groups]))

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "GroupSpec":
        bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        return cls(tuple(zip(bounds[:-1], bounds[1:])))

    @property
    def n_rows(self) -> int:
        return self.groups[-1][1]

    def __len__(self):
        return len(self.groups)

    def slices(self):
        return [slice(a, b) for a, b in self.groups]

    def norms(self, T):
        """Euclidean norm of every group, shape ``(n_groups,) + T.shape[1:]``."""
        return np.sqrt(np.add.reduceat(T * T, self._starts, axis=0))


def _sign_normalize(basis):
    # largest-magnitude entry of every column made non-negative
    if basis.size == 0:
        return basis
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def _numerical_rank(s, shape):
    if s.size == 0 or s[0] == 0:
        return 0
    tol = s[0] * max(shape) * np.finfo(float).eps
    return int(np.sum(s > tol))


def pca_basis(X, dim=None, variance_fraction=None, return_variance=False):
    """Orthonormal basis of the leading principal directions of ``X``.

    Parameters
    ----------
    X : ndarray of shape (n_features, n_samples)
        Column samples; they are mean-centered before the decomposition.
    dim : int, optional
        Number of directions to keep.
    variance_fraction : float, optional
        Keep the smallest number of directions whose cumulative explained
        variance reaches this fraction. Exactly one of ``dim`` and
        ``variance_fraction`` must be given.
    return_variance : bool
        Also return the explained variance of the kept directions.

    Returns
    -------
    basis : ndarray of shape (n_features, d)
    variance : ndarray of shape (d,), only if ``return_variance``
    """
    X = check_feature_matrix(X)
    if (dim is None) == (variance_fraction is None):
        raise ValueError("give exactly one of dim and variance_fraction")
    Xc = X - X.mean(axis=1, keepdims=True)
    left, s, _ = np.linalg.svd(Xc, full_matrices=False)
    rank = _numerical_rank(s, Xc.shape)
    if dim is not None:
        dim = int(dim)
        if not 1 <= dim <= min(X.shape):
            raise ValueError(f"dim must lie in [1, {min(X.shape)}], got {dim}")
        if dim > rank:
            raise ValueError(
                f"requested dim={dim} exceeds the attainable rank {rank} "
                "of the centered data"
            )
        d = dim
    else:
        if not 0 < variance_fraction <= 1:
            raise ValueError(
                f"variance_fraction must lie in (0, 1], got {variance_fraction}"
            )
        if rank == 0:
            raise ValueError("zero variance: all samples are identical")
        var = s[:rank] ** 2
        cumulative = np.cumsum(var) / var.sum()
        d = int(np.searchsorted(cumulative, variance_fraction - 1e-12) + 1)
        d = min(d, rank)
    basis = _sign_normalize(left[:, :d].copy())
    if return_variance:
        return basis, s[:d] ** 2 / max(X.shape[1] - 1, 1)
    return basis


@dataclass(frozen=True)
class JointProjection:
    """Mean and orthonormal basis learned on the pooled source and target data."""

    basis: np.ndarray
    mean: np.ndarray

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    def transform(self, X):
        X = check_feature_matrix(X, allow_empty=True)
        if X.shape[0] != self.basis.shape[0]:
            raise ValueError(
                f"expected {self.basis.shape[0]} features, got {X.shape[0]}"
            )
        return self.basis.T @ (X - self.mean[:, None])

    def inverse_transform(self, Z):
        return self.basis @ np.asarray(Z, dtype=float) + self.mean[:, None]


def joint_pca_reduce(Xs, Xt, variance_fraction=0.99):
    """Project source and target onto the PCA basis of their concatenation.

    Returns ``(Xs_reduced, Xt_reduced, projection)``; ``projection`` keeps the
    joint mean so new samples can be mapped the same way.
    """
    Xs = check_feature_matrix(Xs, name="Xs")
    Xt = check_feature_matrix(Xt, name="Xt")
    if Xs.shape[0] != Xt.shape[0]:
        raise ValueError(
            f"dimension mismatch: Xs has {Xs.shape[0]} features, Xt {Xt.shape[0]}"
        )
    pooled = np.hstack([Xs, Xt])
    basis = pca_basis(pooled, variance_fraction=variance_fraction)
    proj = JointProjection(basis=basis, mean=pooled.mean(axis=1))
    return proj.transform(Xs), proj.transform(Xt), proj


def truncated_null_space(V, d):
    """``d`` orthonormal directions orthogonal to the columns of ``V``."""
    V = np.asarray(V, dtype=float)
    if V.ndim != 2:
        raise ValueError("V must be a 2-D matrix")
    d = int(d)
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    Q, s, _ = np.linalg.svd(V, full_matrices=True)
    rank = _numerical_rank(s, V.shape)
    available = V.shape[0] - rank
    if d > available:
        raise ValueError(
            f"d={d} exceeds the orthogonal complement dimension {available}"
        )
    return _sign_normalize(Q[:, rank : rank + d].copy())


def principal_angles(A, B):
    """Principal angles (radians, ascending) between ``span(A)`` and ``span(B)``."""
    Qa = scipy.linalg.orth(np.asarray(A, dtype=float))
    Qb = scipy.linalg.orth(np.asarray(B, dtype=float))
    cos = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    cos = np.clip(cos, -1.0, 1.0)
    k = min(Qa.shape[1], Qb.shape[1])
    angles = np.full(k, np.pi / 2)
    angles[: cos.size] = np.arccos(cos[:k])
    return np.sort(angles)


def _largest_angle_sine(Qa, Qb):
    # Qa, Qb orthonormal with equal column counts
    cos = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    return float(np.sqrt(max(0.0, 1.0 - min(1.0, cos.min()) ** 2)))


def subspace_disagreement_curve(Xs, Xt, d_max):
    """Disagreement ``D(d)`` for ``d = 1..d_max`` between source, target and joint PCA."""
    Xs = check_feature_matrix(Xs, name="Xs")
    Xt = check_feature_matrix(Xt, name="Xt")
    if Xs.shape[0] != Xt.shape[0]:
        raise ValueError("Xs and Xt must share their feature dimension")
    d_max = int(d_max)
    if not 1 <= d_max <= Xs.shape[0]:
        raise ValueError(f"d_max must lie in [1, {Xs.shape[0]}], got {d_max}")
    Ps = pca_basis(Xs, dim=d_max)
    Pt = pca_basis(Xt, dim=d_max)
    Pst = pca_basis(np.hstack([Xs, Xt]), dim=d_max)
    curve = np.empty(d_max)
    for d in range(1, d_max + 1):
        sin_a = _largest_angle_sine(Ps[:, :d], Pst[:, :d])
        sin_b = _largest_angle_sine(Pt[:, :d], Pst[:, :d])
        curve[d - 1] = 0.5 * (sin_a + sin_b)
    return curve


def subspace_disagreement_dim(Xs, Xt, d_max):
    """Subspace dimension picked by the subspace disagreement measure.

    The first ``d`` whose disagreement reaches one (the bases become
    orthogonal) marks where the domains stop sharing directions; the
    dimension just before it is returned, clamped to ``[1, d_max]``.
    """
    curve = subspace_disagreement_curve(Xs, Xt, d_max)
    hits = np.flatnonzero(curve >= SDM_THRESHOLD)
    if hits.size == 0:
        return int(d_max)
    return int(min(max(hits[0], 1), d_max))


def block_soft_threshold(t, groups, tau):
    """Proximal operator of ``tau * sum_g ||t_g||_2``.

    ``t`` may be a vector or a matrix whose columns are thresholded independently.
    """
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    t = np.asarray(t, dtype=float)
    if tau == 0:
        return np.array(t, copy=True)
    norms = groups.norms(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > tau, 1.0 - tau / np.where(norms > 0, norms, 1.0), 0.0)
    return t * np.repeat(scale, groups._sizes, axis=0)


def group_norm_sum(T, groups):
    """``sum_i sum_g ||T_i^g||_2`` over the columns of ``T``."""
    return float(groups.norms(np.asarray(T, dtype=float)).sum())


def group_lasso_objective(X, B, T, groups, lam):
    """``||X - B T||_F^2 + lam * sum of group norms`` evaluated directly."""
    R = np.asarray(X) - np.asarray(B) @ np.asarray(T)
    return float(np.sum(R * R) + lam * group_norm_sum(T, groups))


# relative round-off band of a sum of group norms
_NOISE = 64 * np.finfo(float).eps


def group_lasso_solve(
    X, B, groups, lam, cfg=None, warm_start=None, return_n_iter=False
):
    """Group-lasso coding of every column of ``X`` on the dictionary ``B``.

    Minimizes ``||X - B T||_F^2 + lam * sum_i sum_g ||T_i^g||_2`` with monotone
    accelerated proximal gradient (fixed step ``1/L``, ``L = 2 sigma_max(B)^2``)
    and a momentum restart whenever a step would increase the objective.
    The objective therefore never exceeds its value at ``warm_start``.

    Parameters
    ----------
    X : ndarray of shape (n_features, n_samples)
    B : ndarray of shape (n_features, n_atoms)
    groups : GroupSpec
        Row partition of the coefficients, covering ``n_atoms`` rows.
    lam : float
        Group-sparsity weight.
    cfg : SolverConfig, optional
    warm_start : ndarray of shape (n_atoms, n_samples), optional

    Returns
    -------
    T : ndarray of shape (n_atoms, n_samples)
    n_iter : int, only if ``return_n_iter``
    """
    cfg = cfg or SolverConfig()
    X = check_feature_matrix(X, name="X", allow_empty=True)
    B = check_feature_matrix(B, name="B", allow_empty=True)
    if B.shape[0] != X.shape[0]:
        raise ValueError(f"B has {B.shape[0]} rows but X has {X.shape[0]}")
    if groups.n_rows != B.shape[1]:
        raise ValueError(
            f"groups cover {groups.n_rows} rows but B has {B.shape[1]} columns"
        )
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    k, n = B.shape[1], X.shape[1]
    if warm_start is None:
        T = np.zeros((k, n))
    else:
        T = np.array(warm_start, dtype=float, copy=True)
        if T.shape != (k, n):
            raise ValueError(f"warm_start must have shape {(k, n)}, got {T.shape}")

    G = B.T @ B
    BtX = B.T @ X
    xx = float(np.sum(X * X))
    L = 2.0 * float(np.linalg.eigvalsh(G)[-1]) if k else 0.0
    if n == 0:
        return (T, 0) if return_n_iter else T
    if L <= 0.0:
        if xx > 0 and lam == 0:
            warnings.warn(
                "zero dictionary: returning the least-norm (zero) coefficients",
                RuntimeWarning,
                stacklevel=2,
            )
        T = np.zeros((k, n))
        return (T, 0) if return_n_iter else T

    tau = lam / L
    sizes = groups._sizes

    def prox(V):
        # block soft threshold that also returns the output group norms
        norms = groups.norms(V)
        shrunk = np.maximum(norms - tau, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norms > tau, shrunk / np.where(norms > 0, norms, 1.0), 0.0)
        return V * np.repeat(scale, sizes, axis=0), float(shrunk.sum())

    def change(Z, GZ, gZ, delta):
        # F(Z) - F(T) from delta = Z - T; subtracting two full objective
        # values loses the small decreases near the optimum to cancellation
        smooth = np.vdot(delta, GZ + GT - BtX2)
        penalty = lam * (gZ - gT)
        if abs(smooth + penalty) > _NOISE * lam * (gZ + gT):
            return smooth + penalty
        # within round-off of the group-norm sums: difference each group as
        # (|z|^2 - |t|^2) / (|z| + |t|)
        num = np.add.reduceat(delta * (Z + T), groups._starts, axis=0)
        den = groups.norms(Z) + groups.norms(T)
        per_group = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        return smooth + lam * float(per_group.sum())

    step = 2.0 / L
    BtX2 = 2.0 * BtX
    shift = step * BtX
    tol2 = float(cfg.tol) ** 2
    GT = G @ T
    gT = group_norm_sum(T, groups)
    Y, GY = T, GT
    t = 1.0
    n_iter = 0
    for n_iter in range(1, int(cfg.max_iter) + 1):
        V = Y - step * GY
        V += shift
        Z, gZ = prox(V)
        GZ = G @ Z
        # gradient-mapping residual at Y: Z is near-stationary once it is small
        R = Z - Y
        r2 = np.vdot(R, R)
        converged = r2 == 0.0 or r2 <= tol2 * np.vdot(Z, Z)
        delta = Z - T
        if change(Z, GZ, gZ, delta) <= 0.0:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            c = (t - 1.0) / t_next
            Y = Z + c * delta
            GY = GZ + c * (GZ - GT)
            T, GT, gT, t = Z, GZ, gZ, t_next
        else:
            # restart from the last accepted iterate; the plain step that
            # follows is a guaranteed descent step
            Y, GY = T, GT
            t = 1.0
        if converged:
            break
    return (T, n_iter) if return_n_iter else T


def ridge_floor(gram, floor=RIDGE_FLOOR, cond_max=RIDGE_COND_MAX):
    """Ridge to add to a Gram matrix: ``floor`` when it is ill-conditioned, else 0."""
    gram = np.asarray(gram, dtype=float)
    if gram.size == 0:
        return 0.0
    eig = np.linalg.eigvalsh(gram)
    if eig[-1] <= 0 or eig[0] <= eig[-1] / cond_max:
        return float(floor)
    return 0.0


def ridge_least_squares(V, X, ridge=0.0):
    """Solve ``(V^T V + ridge I) S = V^T X``.

    Raises
    ------
    numpy.linalg.LinAlgError
        If ``ridge`` is zero and ``V^T V`` is singular or too ill-conditioned.
    """
    V = np.asarray(V, dtype=float)
    X = np.asarray(X, dtype=float)
    if V.ndim != 2 or X.ndim != 2 or V.shape[0] != X.shape[0]:
        raise ValueError(f"row counts differ: V {V.shape}, X {X.shape}")
    if ridge < 0:
        raise ValueError(f"ridge must be non-negative, got {ridge}")
    k = V.shape[1]
    if k == 0:
        return np.zeros((0, X.shape[1]))
    gram = V.T @ V
    if ridge == 0 and ridge_floor(gram) > 0:
        raise np.linalg.LinAlgError(
            "normal equations are singular; pass a positive ridge"
        )
    gram[np.diag_indices(k)] += ridge
    return scipy.linalg.solve(gram, V.T @ X, assume_a="pos")


def auto_ridge_least_squares(V, X, ridge=0.0):
    """Least squares with the ridge floor applied only when needed."""
    V = np.asarray(V, dtype=float)
    gram = V.T @ V
    if ridge == 0.0:
        ridge = ridge_floor(gram)
    return ridge_least_squares(V, X, ridge)


def dictionary_objective(A, U, T):
    R = np.asarray(A) - np.asarray(U) @ np.asarray(T)
    return float(np.sum(R * R))


def _dual_value(KtK, gram, lam, ridge):
    M = gram + np.diag(lam + ridge)
    try:
        c = scipy.linalg.cho_factor(M)
    except np.linalg.LinAlgError:
        return -np.inf, None
    return -float(np.trace(scipy.linalg.cho_solve(c, KtK))) - float(lam.sum()), c


def _solve_dual(KtK, gram, ridge, cfg):
    """Maximize the Lagrange dual over non-negative column multipliers.

    Projected Newton with Armijo backtracking along the projection arc.
    """
    k = gram.shape[0]
    lam = np.zeros(k)
    value, chol = _dual_value(KtK, gram, lam, ridge)
    for _ in range(int(cfg.dual_max_iter)):
        Minv = scipy.linalg.cho_solve(chol, np.eye(k))
        Z = Minv @ KtK @ Minv
        grad = np.diag(Z) - 1.0
        pg = np.where(lam > 0, grad, np.maximum(grad, 0.0))
        if np.max(np.abs(pg)) < cfg.dual_tol:
            break
        free = (lam > 0) | (grad > 0)
        H = 2.0 * Z * Minv  # negated Hessian of the dual, positive semidefinite
        direction = np.zeros(k)
        Hf = H[np.ix_(free, free)]
        try:
            direction[free] = scipy.linalg.solve(
                Hf + 1e-14 * np.trace(Hf) * np.eye(Hf.shape[0]),
                grad[free],
                assume_a="pos",
            )
        except (np.linalg.LinAlgError, ValueError):
            direction[free] = grad[free]
        if not np.all(np.isfinite(direction)) or grad @ direction <= 0:
            direction = np.where(free, grad, 0.0)
        # gains below round-off cannot be verified by Armijo; take the full step
        noise = 1e-13 * (abs(value) + 1.0)
        step = 1.0
        accepted = False
        for _ in range(40):
            cand = np.maximum(lam + step * direction, 0.0)
            cand_value, cand_chol = _dual_value(KtK, gram, cand, ridge)
            gain = grad @ (cand - lam)
            if cand_chol is not None and (
                cand_value >= value + 1e-4 * gain or gain <= noise
            ):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        lam, value, chol = cand, cand_value, cand_chol
    return lam, chol


def dictionary_update(A, T, cfg=None, warm_start=None, return_dual=False):
    """Norm-constrained least-squares dictionary update.

    Solves ``min_U ||A - U T||_F^2`` subject to ``||U_j||_2 <= 1`` for every
    column through its Lagrange dual: ``U = A T^T (T T^T + diag(lam))^{-1}``
    with the multipliers ``lam >= 0`` found by projected Newton ascent.
    Columns whose coefficient row is identically zero do not enter the
    objective; they keep their ``warm_start`` value (zero without one).
    If a feasible ``warm_start`` scores better than the new solution (only
    possible through round-off or the ridge floor), it is returned instead.

    Parameters
    ----------
    A : ndarray of shape (n_features, n_samples)
    T : ndarray of shape (n_atoms, n_samples)
    cfg : SolverConfig, optional
    warm_start : ndarray of shape (n_features, n_atoms), optional
    return_dual : bool
        Also return the multipliers (zero for the inactive rows).

    Returns
    -------
    U : ndarray of shape (n_features, n_atoms)
    lam : ndarray of shape (n_atoms,), only if ``return_dual``
    """
    cfg = cfg or SolverConfig()
    A = np.asarray(A, dtype=float)
    T = np.asarray(T, dtype=float)
    if A.ndim != 2 or T.ndim != 2 or A.shape[1] != T.shape[1]:
        raise ValueError(f"column counts differ: A {A.shape}, T {T.shape}")
    D, k = A.shape[0], T.shape[0]
    if warm_start is not None:
        warm = np.array(warm_start, dtype=float, copy=True)
        if warm.shape != (D, k):
            raise ValueError(f"warm_start must have shape {(D, k)}, got {warm.shape}")
        warm = _project_columns(warm)
    else:
        warm = None
    U = np.zeros((D, k)) if warm is None else warm.copy()
    lam = np.zeros(k)
    active = np.any(T != 0, axis=1)
    if active.any():
        Ta = T[active]
        K = A @ Ta.T
        gram = Ta @ Ta.T
        ridge = cfg.ridge + ridge_floor(gram)
        lam_a, chol = _solve_dual(K.T @ K, gram, ridge, cfg)
        U[:, active] = scipy.linalg.cho_solve(chol, K.T).T
        lam[active] = lam_a
        U = _project_columns(U)
        if warm is not None and dictionary_objective(A, warm, T) < dictionary_objective(
            A, U, T
        ):
            U, lam = warm, np.zeros(k)
    return (U, lam) if return_dual else U


def _project_columns(U):
    norms = np.linalg.norm(U, axis=0)
    over = norms > 1.0
    if over.any():
        U = U.copy()
        U[:, over] /= norms[over]
    return U
