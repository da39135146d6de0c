"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from gridlift.engine import make_rng


def check_poses(X, num_joints: int, channels: int, name: str = "X", allow_flat: bool = True):
    """Return ``X`` as a finite float64 (N, J, C) array.

    A 2D (N, J*C) array is accepted when ``allow_flat`` and reshaped. The
    second return value tells whether the input was flat.
    """
    arr = check_array(X, dtype=np.float64, allow_nd=True, ensure_all_finite=True, input_name=name)
    flat = arr.ndim == 2
    if flat:
        if not allow_flat or arr.shape[1] != num_joints * channels:
            raise ValueError(f"{name} must have shape (N, {num_joints}, {channels}) or (N, {num_joints * channels}), "
                             f"got {arr.shape}")
        arr = arr.reshape(arr.shape[0], num_joints, channels)
    elif arr.shape[1:] != (num_joints, channels):
        raise ValueError(f"{name} must have shape (N, {num_joints}, {channels}), got {arr.shape}")
    return arr, flat


def check_matching_samples(X, y):
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} samples but y has {y.shape[0]}")


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_probability(value, name: str) -> float:
    if not (isinstance(value, numbers.Real) and 0.0 <= value < 1.0):
        raise ValueError(f"{name} must lie in [0, 1), got {value!r}")
    return float(value)


def check_seed(random_state) -> int:
    """Integer seed from ``random_state``; None maps to 0 so runs stay reproducible."""
    if random_state is None:
        return 0
    if isinstance(random_state, bool) or not isinstance(random_state, numbers.Integral) or random_state < 0:
        raise ValueError(f"random_state must be a non-negative integer or None, got {random_state!r}")
    return int(random_state)


def rng_from(random_state):
    return make_rng(check_seed(random_state))
