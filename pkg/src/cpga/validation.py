"""Input validation for the estimator layer."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ConfigurationError


def check_feature_matrix(X, name="X") -> np.ndarray:
    """2-d float64 matrix with finite entries."""
    return check_array(X, dtype=np.float64, ensure_2d=True,
                       ensure_all_finite=True, input_name=name)


def check_labels(y, n_samples) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ConfigurationError("y must be 1-d and align with X rows")
    if y.shape[0] == 0:
        raise ConfigurationError("y must be non-empty")
    return y
