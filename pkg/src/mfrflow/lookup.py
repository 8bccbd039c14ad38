"""Table lookup of motion features from a cost-volume pyramid.

For every source pixel x and pyramid level l, the (2r+1)^2 grid of points
(x + F(x)) / 2**l + delta is sampled bilinearly from that pixel's own slice
of the volume. Samples whose bilinear footprint falls entirely outside the
slice are the vanished entries; they read as exactly zero and are flagged
invalid in the companion mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .costvolume import CostVolumePyramid
from .flowfield import FlowField
from .tensor import ShapeError, Tensor, _result


@dataclass(frozen=True)
class LookupConfig:
    radius: int = 3
    levels: int = 4

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    @property
    def window(self) -> int:
        return 2 * self.radius + 1

    @property
    def channels(self) -> int:
        return self.levels * self.window**2


@dataclass
class MotionFeature:
    data: Tensor  # [B, levels * (2r+1)^2, H, W]
    direction: str = "t->t+1"


@dataclass
class ValidityMask:
    valid: np.ndarray  # bool, same shape as the motion feature
    levels: int = 1

    @property
    def omega(self) -> np.ndarray:
        return ~self.valid


def grid_offsets(radius: int) -> np.ndarray:
    """(dx, dy) offsets in row-major order: dy is the slow index."""
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=-1).astype(np.float64)


def window_sample(padded: Tensor, pad: int, size: tuple[int, int], centre: Tensor, radius: int):
    """Sample each query's map on the integer grid centre + [-r, r]^2.

    ``padded`` is [N, h + 2*pad, w + 2*pad] (zero border, ``pad >= 2r + 2``),
    ``centre`` is [N, 2] as (x, y). Every sample of a query shares the same
    fractional offset, so one (2r+2)^2 patch per query feeds all (2r+1)^2
    bilinear samples. Same values and in-bounds rule as
    :func:`tensor.gather_bilinear`. Returns values [N, K] and in-bounds [N, K].
    """
    h, w = size
    N, hp, wp = padded.shape
    if pad < 2 * radius + 2:
        raise ValueError("padding must be at least 2r + 2")
    S = 2 * radius + 2
    cx = centre.data[:, 0]
    cy = centre.data[:, 1]
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    fx = (cx - x0).astype(padded.dtype)[:, None, None]
    fy = (cy - y0).astype(padded.dtype)[:, None, None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    d = np.arange(-radius, radius + 1)
    px = (x0[:, None] + d[None, :]) + fx[:, 0]
    py = (y0[:, None] + d[None, :]) + fy[:, 0]
    T.log_branch(x0, y0)
    inb = (((py > -1) & (py < h))[:, :, None] & ((px > -1) & (px < w))[:, None, :])

    # Windows entirely off the padded map only hold out-of-bounds samples.
    sx = np.clip(x0 - radius + pad, 0, wp - S)
    sy = np.clip(y0 - radius + pad, 0, hp - S)
    a = np.arange(S)
    lin = (np.arange(N)[:, None, None] * hp + (sy[:, None] + a)[:, :, None]) * wp + (sx[:, None] + a)[:, None, :]
    win = padded.data.reshape(-1)[lin]  # [N, S, S]
    w00, w01, w10, w11 = win[:, :-1, :-1], win[:, :-1, 1:], win[:, 1:, :-1], win[:, 1:, 1:]
    vals = (1 - fy) * ((1 - fx) * w00 + fx * w01) + fy * ((1 - fx) * w10 + fx * w11)
    vals = np.where(inb, vals, 0).astype(padded.dtype)
    K = (2 * radius + 1) ** 2

    def backward(g):
        g = np.where(inb, g.reshape(inb.shape), 0)
        gp = gc = None
        if padded.requires_grad:
            gwin = np.zeros(win.shape, dtype=padded.dtype)
            gwin[:, :-1, :-1] += g * (1 - fy) * (1 - fx)
            gwin[:, :-1, 1:] += g * (1 - fy) * fx
            gwin[:, 1:, :-1] += g * fy * (1 - fx)
            gwin[:, 1:, 1:] += g * fy * fx
            flat = np.zeros(padded.size, dtype=padded.dtype)
            flat[lin.ravel()] = gwin.ravel()  # indices are unique
            gp = flat.reshape(padded.shape)
        if centre.requires_grad:
            dvdx = (1 - fy) * (w01 - w00) + fy * (w11 - w10)
            dvdy = (1 - fx) * (w10 - w00) + fx * (w11 - w01)
            gc = np.stack([(g * dvdx).sum(axis=(1, 2)), (g * dvdy).sum(axis=(1, 2))], axis=-1).astype(centre.dtype)
        return gp, gc

    return _result(vals.reshape(N, K), (padded, centre), backward), inb.reshape(N, K)


def lookup_motion_feature(
    pyramid: CostVolumePyramid,
    flow,
    cfg: LookupConfig = LookupConfig(),
    zero_test: bool = False,
    direction: str = "t->t+1",
    method: str = "window",
) -> tuple[MotionFeature, ValidityMask]:
    """Sample motion features around the flow-displaced correspondences.

    ``flow`` is [2, H, W] or [B, 2, H, W] in feature-grid pixels. With
    ``zero_test`` the invalid set is taken literally as the entries equal to
    zero instead of the geometric out-of-bounds test.
    """
    if isinstance(flow, FlowField):
        flow = flow.data
    flow = T.as_tensor(flow)
    if cfg.levels > len(pyramid.levels):
        raise ShapeError(f"lookup wants {cfg.levels} levels but pyramid has {len(pyramid.levels)}")
    vol0 = pyramid.levels[0]
    unbatched = vol0.ndim == 4
    if unbatched:
        flow = flow.reshape((1,) + flow.shape)
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"flow must be [2,H,W] or [B,2,H,W], got {flow.shape}")
    B, _, H, W = flow.shape
    lead = tuple(vol0.shape[:2]) if unbatched else tuple(vol0.shape[:3])
    if lead != ((H, W) if unbatched else (B, H, W)):
        raise ShapeError(f"flow grid {flow.shape} does not match volume {vol0.shape}")

    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    base = np.stack([xs, ys], axis=-1).astype(flow.dtype)  # [H, W, 2]
    base = np.broadcast_to(base, (B, H, W, 2)).reshape(B * H * W, 1, 2)
    centre = flow.transpose(0, 2, 3, 1).reshape(B * H * W, 1, 2) + base
    offsets = grid_offsets(cfg.radius).astype(flow.dtype)[None]  # [1, K, 2]
    K = offsets.shape[1]
    pad = 2 * cfg.radius + 2

    feats, masks = [], []
    for level in range(cfg.levels):
        vol = pyramid.levels[level]
        h, w = vol.shape[-2:]
        scaled = centre * (1.0 / 2**level)
        if method == "window":
            values, inb = window_sample(pyramid.padded(level, pad), pad, (h, w), scaled.reshape(B * H * W, 2), cfg.radius)
        elif method == "gather":
            values, inb = T.gather_bilinear(vol.reshape(B * H * W, 1, h, w), scaled + offsets)
        else:
            raise ValueError(f"unknown lookup method {method!r}")
        feats.append(values.reshape(B, H, W, K).transpose(0, 3, 1, 2))
        masks.append(inb.reshape(B, H, W, K).transpose(0, 3, 1, 2))

    data = T.concat(feats, axis=1) if len(feats) > 1 else feats[0]
    valid = np.concatenate(masks, axis=1)
    if zero_test:
        valid = data.data != 0
    if unbatched:
        data = data.reshape(data.shape[1:])
        valid = valid[0]
    return MotionFeature(data, direction), ValidityMask(valid, cfg.levels)


def invalid_support(mask: ValidityMask | np.ndarray) -> np.ndarray:
    valid = mask.valid if isinstance(mask, ValidityMask) else np.asarray(mask, dtype=bool)
    return ~valid


def nzr(mask: ValidityMask | np.ndarray, per_level: bool = False, levels: int | None = None):
    """Fraction of valid (non-vanished) entries, overall or per pyramid level.

    Channels are grouped level-major, so level ``l`` owns the ``l``-th block
    of ``channels / levels`` channels on axis -3.
    """
    if isinstance(mask, ValidityMask):
        levels = mask.levels if levels is None else levels
        valid = mask.valid
    else:
        valid = np.asarray(mask, dtype=bool)
    if not per_level:
        return float(valid.mean()) if valid.size else float("nan")
    levels = levels or 1
    chans = valid.shape[-3]
    if chans % levels:
        raise ShapeError(f"{chans} channels do not split into {levels} levels")
    per = chans // levels
    return [float(valid[..., l * per : (l + 1) * per, :, :].mean()) for l in range(levels)]
