"""Small input-validation helpers shared by the value types and estimators."""

import math
import numbers

import numpy as np

from .exceptions import ConfigError


def check_scalar(value, name, *, min_val=None, max_val=None, include_min=True,
                 include_max=True):
    """Validate a finite real scalar and return it as ``float``.

    Parameters
    ----------
    value : real
        Value to check.
    name : str
        Field name used in the error message.
    min_val, max_val : float, optional
        Bounds; inclusivity controlled by ``include_min``/``include_max``.
    """
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ConfigError(f"expected a real number, got {value!r}", name)
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"must be finite, got {value!r}", name)
    if min_val is not None:
        bad = value < min_val if include_min else value <= min_val
        if bad:
            op = ">=" if include_min else ">"
            raise ConfigError(f"must be {op} {min_val}, got {value!r}", name)
    if max_val is not None:
        bad = value > max_val if include_max else value >= max_val
        if bad:
            op = "<=" if include_max else "<"
            raise ConfigError(f"must be {op} {max_val}, got {value!r}", name)
    return value


def check_positive(value, name):
    return check_scalar(value, name, min_val=0.0, include_min=False)


def check_nonnegative(value, name):
    return check_scalar(value, name, min_val=0.0)


def check_probability(value, name):
    return check_scalar(value, name, min_val=0.0, max_val=1.0)


def check_int(value, name, *, min_val=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"expected an integer, got {value!r}", name)
    value = int(value)
    if min_val is not None and value < min_val:
        raise ConfigError(f"must be >= {min_val}, got {value}", name)
    return value


def check_seed(value, name="seed"):
    value = check_int(value, name, min_val=0)
    if value >= 2**64:
        raise ConfigError("must fit in 64 bits", name)
    return value


def as_1d_float(x, name):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ConfigError(f"expected a 1-D array, got shape {arr.shape}", name)
    if not np.all(np.isfinite(arr)):
        raise ConfigError("contains non-finite values", name)
    return arr
