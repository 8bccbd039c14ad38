"""Flow field container shared by the model, metrics and file formats."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class FlowField:
    """Per-pixel displacement (u, v) in pixels, anchored on the source frame.

    ``data`` is [2, H, W] (or [B, 2, H, W] for batches) as a Tensor or ndarray.
    ``direction`` is a free-form tag such as ``"t->t+1"`` or ``"t->t-2"``.
    """

    data: Tensor | np.ndarray
    direction: str = "t->t+1"

    def numpy(self) -> np.ndarray:
        return self.data.data if isinstance(self.data, Tensor) else np.asarray(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.numpy().shape

    def __post_init__(self):
        arr = self.numpy()
        if arr.ndim not in (3, 4) or arr.shape[-3] != 2:
            raise ValueError(f"flow must be [2,H,W] or [B,2,H,W], got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("flow contains non-finite values")
