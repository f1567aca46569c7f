import numpy as np


def check_feature_matrix(X, name="X", allow_empty=False):
    """Return ``X`` as a finite 2-D float array (features x samples)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not allow_empty and (X.shape[0] < 1 or X.shape[1] < 1):
        raise ValueError(f"{name} must have at least one feature and one sample")
    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))[0]
        raise ValueError(f"{name} contains a non-finite value at {tuple(bad)}")
    return X


def check_labels(y, n_samples, name="labels"):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(
            f"{name} must be a vector of length {n_samples}, got shape {y.shape}"
        )
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"{name} must be integers")
    y = y.astype(int)
    if y.size and y.min() < 1:
        raise ValueError(f"{name} must be 1-based class ids")
    return y


def one_hot(y, n_classes):
    """One-hot label matrix of shape ``(n_classes, n_samples)`` for 1-based ``y``."""
    y = np.asarray(y, dtype=int)
    if y.size and (y.min() < 1 or y.max() > n_classes):
        raise ValueError(f"labels must lie in 1..{n_classes}")
    L = np.zeros((n_classes, y.size))
    L[y - 1, np.arange(y.size)] = 1.0
    return L


def check_one_hot(L):
    L = np.asarray(L, dtype=float)
    if L.ndim != 2:
        raise ValueError("label matrix must be 2-D")
    if not np.all((L == 0) | (L == 1)) or not np.all(L.sum(axis=0) == 1):
        raise ValueError("label matrix must have exactly one 1 per column")
    return L
