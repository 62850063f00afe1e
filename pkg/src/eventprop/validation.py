"""Input validation helpers shared by the estimators and the trainer."""
import numpy as np
from sklearn.utils.validation import check_array, check_X_y


def check_coordinates(X):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != 2:
        raise ValueError(f"expected (n, 2) coordinates, got shape {X.shape}")
    if np.any(X < 0.0) or np.any(X > 1.0):
        raise ValueError("coordinates must lie in [0, 1]")
    return X


def check_spike_steps(X, n_inputs, n_steps):
    """Validate an ``(n, n_inputs)`` integer matrix of input spike steps.

    Negative entries mean "no spike". Non-negative entries must be a valid
    step in ``[0, n_steps - 1]``.
    """
    X = check_array(X, dtype=None, ensure_all_finite=True)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("spike steps must be integers")
    X = X.astype(np.int64)
    if X.shape[1] != n_inputs:
        raise ValueError(f"expected {n_inputs} input neurons, got {X.shape[1]}")
    if np.any(X >= n_steps):
        raise ValueError(f"spike steps must be < n_steps={n_steps}")
    return X


def check_spike_data(X, y, n_steps, n_inputs=None):
    """Validate a spike-step matrix and its 1-D label vector."""
    X, y = check_X_y(X, y, dtype=None)
    X = check_spike_steps(X, X.shape[1] if n_inputs is None else n_inputs, n_steps)
    return X, y


def input_raster(steps, n_steps):
    """``(T+1, n_inputs)`` boolean raster from one row of spike steps."""
    steps = np.asarray(steps, dtype=np.int64)
    raster = np.zeros((n_steps + 1, steps.shape[0]), dtype=bool)
    mask = steps >= 0
    raster[steps[mask], np.flatnonzero(mask)] = True
    return raster
