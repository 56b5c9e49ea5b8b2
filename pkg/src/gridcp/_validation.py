"""Argument checks shared by the estimators."""

import math

import numpy as np

from .errors import IndexMismatch


def check_alpha(alpha):
    """Raise ValueError unless 0 < alpha < 1."""
    a = float(alpha)
    if not (0.0 < a < 1.0) or math.isnan(a):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    return a


def check_aligned(*arrays, names=None):
    """Coerce to 1-D arrays and require equal length."""
    out = [np.asarray(a).reshape(-1) for a in arrays]
    sizes = {a.size for a in out}
    if len(sizes) > 1:
        label = ", ".join(names) if names else "inputs"
        raise IndexMismatch(f"{label} must have equal length, got {[a.size for a in out]}")
    return out
