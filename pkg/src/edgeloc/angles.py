"""Degree-valued angle helpers with a single wrapping convention.

Angles are canonicalised to (-180, 180]; the boundary value -180 is
reported as +180 so every direction has exactly one representation.
"""

from __future__ import annotations

import numpy as np


def wrap_deg(angle):
    """Wrap degrees into (-180, 180]. Accepts scalars or arrays."""
    wrapped = np.remainder(np.asarray(angle, dtype=float) + 180.0, 360.0) - 180.0
    wrapped = np.where(wrapped == -180.0, 180.0, wrapped)
    if np.ndim(angle) == 0:
        return float(wrapped)
    return wrapped


def angular_difference_deg(a, b):
    """Smallest absolute difference between two headings, in [0, 180]."""
    return abs(wrap_deg(float(a) - float(b)))


def circular_mean_deg(angles) -> float:
    """Direction of the mean unit vector of the given headings."""
    rad = np.radians(np.asarray(angles, dtype=float))
    return wrap_deg(float(np.degrees(np.arctan2(np.mean(np.sin(rad)), np.mean(np.cos(rad))))))
