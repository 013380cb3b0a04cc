"""Input checks shared by the estimators and the command line."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_points(X, d):
    """Rows of ``(t, x_1..x_d)`` as a float array of shape (n, 1 + d)."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 1 + d:
        raise ValueError(f"expected rows (t, x_1..x_{d}) with {1 + d} columns, got {X.shape[1]}")
    return X


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_seed(seed):
    if seed is None:
        raise ValueError("a seed is required; wall-clock seeding is not supported")
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral) or not 0 <= seed < 2 ** 64:
        raise ValueError(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return int(seed)
