"""Motion feature recovery.

Vanished entries of the forward motion feature M(t->t+1) are replaced by a
learned, per-pixel weighted combination of the inverse motion features
M(t->t-n) from the history frames:

    M_fwd[omega] = 1 / (P * N) * sum_patch sum_n alpha_n * M_hist_n[omega]

where P is the patch size (number of local offsets) and N the number of
history frames. Entries outside omega pass through untouched.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

# Gradient multiplier applied to the coefficient field; only changed by the
# gradient-check sensitivity probe.
_ALPHA_GRAD_SCALE = 1.0


@contextlib.contextmanager
def corrupt_backward(factor: float):
    """Scale the coefficient-net backward pass by ``factor`` (for checker probes)."""
    global _ALPHA_GRAD_SCALE
    previous = _ALPHA_GRAD_SCALE
    _ALPHA_GRAD_SCALE = factor
    try:
        yield
    finally:
        _ALPHA_GRAD_SCALE = previous


@dataclass(frozen=True)
class MfrConfig:
    history_frames: int = 2
    window: int = 1
    literal_prefactor: bool = True
    hidden: int = 64
    shared: bool = True
    normalization: str = "joint"  # "joint" over (N x window) or "spatial" over window only

    def __post_init__(self):
        if self.history_frames < 1:
            raise ValueError("history_frames must be >= 1")
        side = math.isqrt(self.window)
        if self.window < 1 or side * side != self.window or side % 2 == 0:
            raise ValueError(f"window must be an odd square (1, 9, 25, ...), got {self.window}")
        if self.normalization not in ("joint", "spatial"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def patch_side(self) -> int:
        return math.isqrt(self.window)


def patch_offsets(window: int) -> list[tuple[int, int]]:
    """Centred (dy, dx) offsets of a square patch with ``window`` cells, row-major."""
    half = math.isqrt(window) // 2
    return [(dy, dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1)]


def patch_support(window: int, height: int, width: int) -> np.ndarray:
    """[window, H, W] flags: True where the offset neighbour lies on the grid."""
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    out = np.empty((window, height, width), dtype=bool)
    for o, (dy, dx) in enumerate(patch_offsets(window)):
        out[o] = (ys + dy >= 0) & (ys + dy < height) & (xs + dx >= 0) & (xs + dx < width)
    return out


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class CoefficientNet:
    """Two 3x3 convolutions joined by a ReLU, producing ``window`` logits per history frame."""

    def __init__(self, in_channels: int, cfg: MfrConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.in_channels = in_channels
        copies = 1 if cfg.shared else cfg.history_frames
        self.params: dict[str, Parameter] = {}
        for c in range(copies):
            tag = "" if cfg.shared else f"{c}."
            self.params[f"{tag}conv1.weight"] = Parameter(
                _he_uniform(rng, (cfg.hidden, in_channels, 3, 3), in_channels * 9)
            )
            self.params[f"{tag}conv1.bias"] = Parameter(np.zeros(cfg.hidden))
            # Small output layer: starts close to uniform coefficients.
            self.params[f"{tag}conv2.weight"] = Parameter(
                0.1 * _he_uniform(rng, (cfg.window, cfg.hidden, 3, 3), cfg.hidden * 9)
            )
            self.params[f"{tag}conv2.bias"] = Parameter(np.zeros(cfg.window))
        for name, p in self.params.items():
            p.name = name

    def logits(self, history: Tensor, copy: int = 0) -> Tensor:
        tag = "" if self.cfg.shared else f"{copy}."
        p = self.params
        h = T.relu(T.conv2d(history, p[f"{tag}conv1.weight"], p[f"{tag}conv1.bias"], padding=1))
        return T.conv2d(h, p[f"{tag}conv2.weight"], p[f"{tag}conv2.bias"], padding=1)


def _as_batched(x: Tensor) -> Tensor:
    return x.reshape((1,) + x.shape) if x.ndim == 3 else x


def _history_data(h) -> Tensor:
    return _as_batched(h.data if hasattr(h, "data") and isinstance(h.data, Tensor) else T.as_tensor(h))


def coefficient_forward(net: CoefficientNet, histories) -> Tensor:
    """Coefficient field alpha with shape [B, N, window, H, W].

    Each history feature goes through the coefficient CNN; the stacked logits
    are softmax-normalised per pixel over (N x window) jointly, or over the
    window alone when ``normalization == "spatial"``. Patch offsets falling
    off the grid are excluded from the normalisation and get alpha = 0.
    """
    cfg = net.cfg
    if len(histories) != cfg.history_frames:
        raise ShapeError(f"expected {cfg.history_frames} history features, got {len(histories)}")
    hs = [_history_data(h) for h in histories]
    shape = hs[0].shape
    if any(h.shape != shape for h in hs):
        raise ShapeError("history motion features must share one shape")
    B, _, H, W = shape
    N, P = cfg.history_frames, cfg.window

    if cfg.shared:
        logits = net.logits(T.concat(hs, axis=0)).reshape(N, B, P, H, W).transpose(1, 0, 2, 3, 4)
    else:
        logits = T.stack([net.logits(h, n) for n, h in enumerate(hs)], axis=1)

    support = patch_support(P, H, W)[None, None] if P > 1 else None
    axes = (1, 2) if cfg.normalization == "joint" else (2,)
    alpha = T.softmax(logits, axes, mask=support)
    if _ALPHA_GRAD_SCALE != 1.0:
        alpha = T.scale_grad(alpha, _ALPHA_GRAD_SCALE)
    return alpha


def _shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """out[..., i, j] = x[..., i + dy, j + dx], zero where that falls off the grid."""
    if dy == 0 and dx == 0:
        return x
    pad = max(abs(dy), abs(dx))
    H, W = x.shape[-2:]
    padded = T.pad2d(x, pad)
    return padded[..., pad + dy : pad + dy + H, pad + dx : pad + dx + W]


def recovery_estimate(histories, alpha: Tensor, cfg: MfrConfig) -> Tensor:
    """The weighted history combination used to fill vanished entries."""
    hs = [_history_data(h) for h in histories]
    terms = None
    for o, (dy, dx) in enumerate(patch_offsets(cfg.window)):
        for n, h in enumerate(hs):
            a = alpha[:, n, o]
            a = a.reshape(a.shape[0], 1, a.shape[1], a.shape[2])
            term = a * _shift(h, dy, dx)
            terms = term if terms is None else terms + term
    if cfg.literal_prefactor:
        terms = terms * (1.0 / (cfg.window * cfg.history_frames))
    return terms


def recover(m_fwd, omega: np.ndarray, histories, alpha: Tensor, cfg: MfrConfig) -> Tensor:
    """Fill the entries of ``m_fwd`` selected by ``omega``; all others are copied exactly."""
    m = m_fwd.data if hasattr(m_fwd, "data") and isinstance(m_fwd.data, Tensor) else T.as_tensor(m_fwd)
    unbatched = m.ndim == 3
    m = _as_batched(m)
    omega = np.asarray(omega, dtype=bool)
    if omega.ndim == 3:
        omega = omega[None]
    if omega.shape != m.shape:
        raise ShapeError(f"omega {omega.shape} does not match motion feature {m.shape}")
    if not omega.any():
        out = m
    else:
        out = T.where(omega, recovery_estimate(histories, alpha, cfg), m)
    return out.reshape(out.shape[1:]) if unbatched else out


def recovered_validity(valid_fwd: np.ndarray, history_valid, alpha: np.ndarray, cfg: MfrConfig) -> np.ndarray:
    """Entries carrying matching evidence after recovery.

    A vanished entry becomes valid when some history frame and patch offset
    with positive coefficient points at a valid history entry.
    """
    valid_fwd = np.asarray(valid_fwd, dtype=bool)
    unbatched = valid_fwd.ndim == 3
    if unbatched:
        valid_fwd = valid_fwd[None]
        history_valid = [np.asarray(v)[None] for v in history_valid]
        alpha = np.asarray(alpha)[None] if np.asarray(alpha).ndim == 4 else alpha
    alpha = np.asarray(alpha)
    H, W = valid_fwd.shape[-2:]
    filled = np.zeros_like(valid_fwd)
    for o, (dy, dx) in enumerate(patch_offsets(cfg.window)):
        for n, hv in enumerate(history_valid):
            hv = np.asarray(hv, dtype=bool)
            shifted = np.zeros_like(hv)
            ys = slice(max(0, -dy), min(H, H - dy))
            xs = slice(max(0, -dx), min(W, W - dx))
            ys_src = slice(max(0, dy), min(H, H + dy))
            xs_src = slice(max(0, dx), min(W, W + dx))
            shifted[..., ys, xs] = hv[..., ys_src, xs_src]
            positive = (alpha[:, n, o] > 0)[:, None]
            filled |= shifted & positive
    out = valid_fwd | filled
    return out[0] if unbatched else out
