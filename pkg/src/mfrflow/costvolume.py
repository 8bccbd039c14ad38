"""All-pairs correlation volume and its pooled pyramid."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class FeatureMap:
    data: Tensor  # [D, H, W] or [B, D, H, W]
    frame_id: int = 0


@dataclass
class CostVolumePyramid:
    """Level ``l`` holds [..., H, W, H / 2**l, W / 2**l]; level 0 is the full volume."""

    levels: list[Tensor] = field(default_factory=list)
    scale_factor: float = 1.0
    _padded: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.levels)

    def padded(self, level: int, pad: int) -> Tensor:
        """Level ``level`` as [queries, h + 2*pad, w + 2*pad], zero padded and cached."""
        key = (level, pad)
        if key not in self._padded:
            vol = self.levels[level]
            h, w = vol.shape[-2:]
            queries = int(np.prod(vol.shape[:-2]))
            self._padded[key] = T.pad2d(vol.reshape(queries, h, w), pad)
        return self._padded[key]


def _features(f) -> Tensor:
    return f.data if isinstance(f, FeatureMap) else T.as_tensor(f)


def default_scale(depth: int) -> float:
    return 1.0 / math.sqrt(depth)


def build_cost_volume(f_t, f_next, scale_factor: float | None = None) -> Tensor:
    """Dot product of every frame-t feature with every next-frame feature.

    C[i, j, k, l] = scale * sum_d f_t[d, i, j] * f_next[d, k, l]. Batched
    inputs [B, D, H, W] give [B, H, W, H, W]. ``scale_factor`` defaults to
    1/sqrt(D); pass 1.0 for the raw dot product.
    """
    a = _features(f_t)
    b = _features(f_next)
    if a.shape != b.shape:
        raise ShapeError(f"feature maps differ in shape: {a.shape} vs {b.shape}")
    unbatched = a.ndim == 3
    if unbatched:
        a = a.reshape((1,) + a.shape)
        b = b.reshape((1,) + b.shape)
    if a.ndim != 4:
        raise ShapeError(f"feature maps must be [D,H,W] or [B,D,H,W], got {a.shape}")
    B, D, H, W = a.shape
    scale = default_scale(D) if scale_factor is None else scale_factor

    lhs = a.reshape(B, D, H * W).transpose(0, 2, 1)
    rhs = b.reshape(B, D, H * W)
    vol = T.matmul(lhs, rhs)
    if scale != 1.0:
        vol = vol * scale
    vol = vol.reshape(B, H, W, H, W)
    return vol.reshape(H, W, H, W) if unbatched else vol


def build_pyramid(volume: Tensor, levels: int = 4, scale_factor: float = 1.0) -> CostVolumePyramid:
    """Average-pool the trailing (target) axes ``levels - 1`` times."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = volume.shape[-2:]
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ShapeError(f"volume target dims {h}x{w} not divisible by 2**{levels - 1}")
    out = [volume]
    for _ in range(levels - 1):
        out.append(T.avg_pool2(out[-1]))
    return CostVolumePyramid(out, scale_factor)


def dump_volume_slice(volume: Tensor | np.ndarray, i: int, j: int, path) -> None:
    """Write C[i, j, :, :] as CSV rows (k, l, value)."""
    arr = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    sl = arr[i, j]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "l", "value"])
        for k in range(sl.shape[0]):
            for l in range(sl.shape[1]):
                writer.writerow([k, l, repr(float(sl[k, l]))])
