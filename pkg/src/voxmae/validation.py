"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .volume import Volume4D

__all__ = ["check_volume", "as_volume_list"]


def check_volume(obj) -> Volume4D:
    """Accept a Volume4D or a 4D (T, D, W, H) array; reject anything else."""
    if isinstance(obj, Volume4D):
        return obj
    arr = np.asarray(obj)
    if arr.ndim == 4:
        return Volume4D(arr.astype(np.float32))
    raise TypeError(
        f"expected a Volume4D or 4D array, got {type(obj).__name__} with shape "
        f"{getattr(arr, 'shape', None)}"
    )


def as_volume_list(X) -> list[Volume4D]:
    """Normalize estimator input to a list of volumes.

    A single volume becomes a one-element list; iterables are validated
    element-wise.
    """
    if isinstance(X, Volume4D):
        return [X]
    if isinstance(X, np.ndarray) and X.ndim == 4:
        return [check_volume(X)]
    volumes = [check_volume(item) for item in X]
    if not volumes:
        raise ValueError("need at least one volume")
    return volumes
