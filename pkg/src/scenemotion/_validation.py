"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""
import numbers

import numpy as np


def check_scalar(x, name, *, min_val=None, max_val=None, include_min=True,
                 include_max=True, exc=ValueError, target_type=numbers.Real):
    if isinstance(x, bool) or not isinstance(x, target_type):
        raise exc(f"{name} must be {target_type.__name__}, got {type(x).__name__}")
    if isinstance(x, numbers.Real) and not np.isfinite(x):
        raise exc(f"{name} must be finite, got {x}")
    if min_val is not None and (x < min_val or (not include_min and x == min_val)):
        op = ">=" if include_min else ">"
        raise exc(f"{name} must be {op} {min_val}, got {x}")
    if max_val is not None and (x > max_val or (not include_max and x == max_val)):
        op = "<=" if include_max else "<"
        raise exc(f"{name} must be {op} {max_val}, got {x}")
    return x


def check_points(p, name="points", exc=ValueError):
    """Return ``p`` as a finite float array whose last axis has length 3."""
    arr = np.asarray(p, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] != 3:
        raise exc(f"{name} must have a trailing dimension of 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise exc(f"{name} must be finite")
    return arr


def check_vector(x, length, name="vector", exc=ValueError):
    arr = np.asarray(x, dtype=float).reshape(-1)
    if len(arr) != length:
        raise exc(f"{name} must have length {length}, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise exc(f"{name} must be finite")
    return arr
