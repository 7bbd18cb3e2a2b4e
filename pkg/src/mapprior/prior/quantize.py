"""Nearest-code quantization and the token grid type."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from mapprior.exceptions import ShapeError


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """An (h, w) grid of codebook indices in ``[0, n_codes)``."""

    indices: np.ndarray
    n_codes: int

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64, copy=True)
        if idx.ndim != 2:
            raise ShapeError(f"token grid must be 2-D, got shape {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_codes):
            raise IndexError(f"token index out of range [0, {self.n_codes})")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    @property
    def shape(self) -> tuple:
        return self.indices.shape

    def __eq__(self, other):
        return (
            isinstance(other, TokenGrid)
            and self.n_codes == other.n_codes
            and np.array_equal(self.indices, other.indices)
        )

    def __hash__(self):
        return hash((self.n_codes, self.indices.tobytes()))


def quantize(features: torch.Tensor, codebook: torch.Tensor, chunk: int = 1 << 22):
    """Snap each feature vector to its nearest code.

    Args:
        features: (..., D) tensor.
        codebook: (K, D) tensor.
        chunk: max number of ``N*K*D`` elements materialized at once.

    Returns:
        ``(indices, quantized)`` with ``indices`` of shape ``features.shape[:-1]``
        and ``quantized = codebook[indices]``. Squared distances are computed
        by explicit differences so exact ties resolve to the smallest index.
    """
    if features.shape[-1] != codebook.shape[-1]:
        raise ShapeError(f"feature dim {features.shape[-1]} != code dim {codebook.shape[-1]}")
    flat = features.reshape(-1, features.shape[-1])
    K, D = codebook.shape
    rows = max(1, chunk // max(K * D, 1))
    with torch.no_grad():
        cb = codebook.detach()
        parts = []
        for start in range(0, flat.shape[0], rows):
            diff = flat[start : start + rows].detach()[:, None, :] - cb[None, :, :]
            parts.append((diff * diff).sum(-1).argmin(-1))
        idx = torch.cat(parts) if parts else torch.zeros(0, dtype=torch.long)
    idx = idx.reshape(features.shape[:-1])
    return idx, torch.nn.functional.embedding(idx, codebook)


def quantize_bchw(z: torch.Tensor, codebook: torch.Tensor):
    """:func:`quantize` for channel-first (B, D, h, w) encoder outputs."""
    idx, zq = quantize(z.permute(0, 2, 3, 1), codebook)
    return idx, zq.permute(0, 3, 1, 2)
