"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
import torch

from mapprior.exceptions import ShapeError
from mapprior.layout import _Grid
from mapprior.prior.quantize import TokenGrid


def check_layout_array(Y, n_channels: int | None = None, dims: tuple | None = None,
                       name: str = "Y", finite_only: bool = False) -> np.ndarray:
    """Coerce grids or arrays to a float32 (N, C, H, W) array and check its shape.

    Accepts a single grid object, a sequence of grids, a (C, H, W) array or an
    (N, C, H, W) array. Values must lie in [0, 1] unless ``finite_only``.
    """
    if isinstance(Y, _Grid):
        arr = Y.data[None]
    elif isinstance(Y, (list, tuple)) and Y and isinstance(Y[0], _Grid):
        arr = np.stack([g.data for g in Y])
    else:
        arr = np.asarray(Y.detach().cpu() if torch.is_tensor(Y) else Y)
        if arr.ndim == 3:
            arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be (N, C, H, W), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} is empty")
    if n_channels is not None and arr.shape[1] != n_channels:
        raise ShapeError(f"{name} has {arr.shape[1]} channels, expected {n_channels}")
    if dims is not None and tuple(arr.shape[2:]) != tuple(dims):
        raise ShapeError(f"{name} spatial dims {arr.shape[2:]} != expected {tuple(dims)}")
    arr = arr.astype(np.float32, copy=False)
    if not arr.flags.writeable:
        arr = arr.copy()
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if not finite_only and (arr.min() < 0 or arr.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_token_array(T, n_codes: int, dims: tuple | None = None, name: str = "tokens") -> np.ndarray:
    """Coerce token grids to an int64 (N, h, w) array with indices in range."""
    if isinstance(T, TokenGrid):
        arr = T.indices[None]
    elif isinstance(T, (list, tuple)) and T and isinstance(T[0], TokenGrid):
        arr = np.stack([t.indices for t in T])
    else:
        arr = np.asarray(T.detach().cpu() if torch.is_tensor(T) else T)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be (N, h, w), got shape {arr.shape}")
    if dims is not None and tuple(arr.shape[1:]) != tuple(dims):
        raise ShapeError(f"{name} dims {arr.shape[1:]} != expected {tuple(dims)}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError(f"{name} must be integer indices")
    if arr.size and (arr.min() < 0 or arr.max() >= n_codes):
        raise IndexError(f"{name} index out of range [0, {n_codes})")
    arr = arr.astype(np.int64, copy=False)
    return arr if arr.flags.writeable else arr.copy()


def batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))
