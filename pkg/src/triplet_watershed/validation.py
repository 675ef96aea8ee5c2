"""Input checks shared by the estimator and the CLI."""
import numpy as np
from sklearn.utils import check_array


def check_cube(X, dtype=np.float64):
    """Return ``X`` as a finite ``(H, W, B)`` float array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=dtype,
                    ensure_all_finite=True, input_name="X")
    if X.ndim != 3:
        raise ValueError(f"expected an (H, W, B) cube, got shape {X.shape}")
    return X


def check_label_map(y, shape, allow_unlabeled=True):
    """Return ``y`` as an int64 ``(H, W)`` map matching ``shape``.

    Valid values are 0 (outside the graph), positive class labels and,
    when ``allow_unlabeled``, -1 for graph pixels without a label.
    """
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ValueError(f"label map shape {y.shape} does not match image {tuple(shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("label map must hold integers")
    y = y.astype(np.int64)
    low = -1 if allow_unlabeled else 0
    if y.min() < low:
        raise ValueError(f"label values below {low} are not allowed")
    if not np.any(y != 0):
        raise ValueError("label map selects no graph pixels")
    return y
