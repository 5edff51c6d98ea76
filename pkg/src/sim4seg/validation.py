"""Input validation helpers.

Thin wrappers over ``sklearn.utils.validation`` that raise the package's own
:class:`~sim4seg.exceptions.InvalidInputError` so callers can catch a single
error type.
"""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import InvalidInputError


def check_image(image, *, min_side=1, name="image"):
    """Return ``image`` as a finite 2-D float64 array.

    uint8 rasters are rescaled to ``[0, 1]``.
    """
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    try:
        arr = check_array(arr, dtype=np.float64, ensure_all_finite=True,
                          ensure_min_samples=1, ensure_min_features=1)
    except ValueError as exc:
        raise InvalidInputError(f"{name}: {exc}") from exc
    if min(arr.shape) < min_side:
        raise InvalidInputError(
            f"{name} of shape {arr.shape} is smaller than {min_side}x{min_side}")
    return arr


def check_vector(values, *, name="vector"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty 1-D array")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or infinite values")
    return arr


def check_matrix(values, *, name="matrix"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or infinite values")
    return arr


def check_binary_mask(mask, *, name="mask"):
    """Return ``mask`` as a 2-D bool array; values must be 0/1."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.bool_:
        if not np.all((arr == 0) | (arr == 1)):
            raise InvalidInputError(f"{name} must contain only 0/1 values")
        arr = arr.astype(bool)
    return arr


def check_same_shape(a, b, *, names=("prediction", "ground truth")):
    if np.shape(a) != np.shape(b):
        raise InvalidInputError(
            f"{names[0]} shape {np.shape(a)} != {names[1]} shape {np.shape(b)}")


def frozen(arr):
    """Return a read-only view so value types stay immutable."""
    arr = np.asarray(arr)
    view = arr.view()
    view.flags.writeable = False
    return view
