import numpy as np
from sklearn.utils import check_array


def check_rtf_array(X, n_features=None):
    """2-D float array of packed RTF rows with an even, optionally fixed, width."""
    X = check_array(np.atleast_2d(X), dtype=np.float64, ensure_all_finite=True)
    if X.shape[1] % 2:
        raise ValueError(f"RTF rows must have even length, got {X.shape[1]}")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X
