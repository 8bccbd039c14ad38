"""Multi-frame recurrent flow network with motion feature recovery.

Frames I_{t-N} .. I_{t+1} share one convolutional encoder. The pair
(I_t, I_{t+1}) is refined by a convolutional GRU that reads motion features
looked up from their cost-volume pyramid. Before every update the vanished
entries of that motion feature are filled from the inverse motion features
M(t->t-n), which come from running the same recurrent estimator on the
pairs (I_t, I_{t-n}).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .costvolume import build_cost_volume, build_pyramid
from .flowfield import FlowField
from .lookup import LookupConfig, MotionFeature, ValidityMask, lookup_motion_feature
from .mfr import CoefficientNet, MfrConfig, coefficient_forward, recover, recovered_validity
from .tensor import Parameter, ShapeError, Tensor

DOWNSAMPLE = 8


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 32
    hidden_dim: int = 32
    context_dim: int = 32
    radius: int = 3
    levels: int = 4
    iterations: int = 6
    history: int = 2
    window: int = 1
    coef_hidden: int = 64
    coef_shared: bool = True
    coef_normalization: str = "joint"
    literal_prefactor: bool = True
    recovery: bool = True
    omega: str = "geometric"  # geometric | zero | empty
    scale_factor: float = 0.0  # 0 selects 1/sqrt(feature_dim)

    def __post_init__(self):
        if self.omega not in ("geometric", "zero", "empty"):
            raise ValueError(f"unknown omega mode {self.omega!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    @property
    def lookup(self) -> LookupConfig:
        return LookupConfig(self.radius, self.levels)

    @property
    def mfr(self) -> MfrConfig:
        return MfrConfig(
            history_frames=self.history,
            window=self.window,
            literal_prefactor=self.literal_prefactor,
            hidden=self.coef_hidden,
            shared=self.coef_shared,
            normalization=self.coef_normalization,
        )

    @property
    def volume_scale(self) -> float:
        return self.scale_factor if self.scale_factor > 0 else 1.0 / math.sqrt(self.feature_dim)


@dataclass
class IterationState:
    flow: Tensor  # [B, 2, H, W], feature-grid pixels
    hidden: Tensor  # [B, hidden_dim, H, W]


@dataclass
class ForwardResult:
    predictions: list[Tensor]  # full-resolution flow per iteration, [B, 2, H0, W0]
    lowres: list[Tensor] = field(default_factory=list)
    forward_valid: list[np.ndarray] = field(default_factory=list)  # per iteration, before recovery
    recovered_valid: list[np.ndarray] = field(default_factory=list)  # per iteration, after recovery
    history_flows: list[Tensor] = field(default_factory=list)  # F_{t->t-n}, feature grid
    history_valid: list[np.ndarray] = field(default_factory=list)
    alpha: Tensor | None = None


class _Conv:
    def __init__(self, params: dict, name: str, cin: int, cout: int, k: int, rng, stride=1, gain=1.0):
        fan_in = cin * k * k
        bound = gain * math.sqrt(6.0 / fan_in)
        self.weight = params[f"{name}.weight"] = Parameter(rng.uniform(-bound, bound, (cout, cin, k, k)), name=f"{name}.weight")
        self.bias = params[f"{name}.bias"] = Parameter(np.zeros(cout), name=f"{name}.bias")
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def upsample_matrix(n_in: int, factor: int = DOWNSAMPLE, dtype=np.float64) -> np.ndarray:
    """[n_in * factor, n_in] bilinear interpolation with aligned corners."""
    n_out = n_in * factor
    if n_in == 1:
        return np.ones((n_out, 1), dtype=dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), lo] = 1 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def upsample_flow(flow, factor: int = DOWNSAMPLE) -> Tensor:
    """Bilinear x``factor`` upsampling; flow vectors are scaled by ``factor`` as well."""
    if isinstance(flow, FlowField):
        flow = flow.data
    flow = T.as_tensor(flow)
    h, w = flow.shape[-2:]
    uh = upsample_matrix(h, factor, flow.dtype)
    uw = upsample_matrix(w, factor, flow.dtype)
    out = T.matmul(T.matmul(Tensor(uh), flow), Tensor(np.ascontiguousarray(uw.T)))
    return out * float(factor)


class MFRFlowModel:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        p = self.params
        D, Hd, Cd = cfg.feature_dim, cfg.hidden_dim, cfg.context_dim

        def encoder(prefix: str, out_dim: int):
            return [
                _Conv(p, f"{prefix}.conv1", 3, 16, 3, rng, stride=2),
                _Conv(p, f"{prefix}.conv2", 16, 24, 3, rng, stride=2),
                _Conv(p, f"{prefix}.conv3", 24, 32, 3, rng, stride=2),
                _Conv(p, f"{prefix}.proj", 32, out_dim, 1, rng),
            ]

        self.feature_net = encoder("feature_net", D)
        self.context_net = encoder("context_net", Hd + Cd)

        corr_ch = cfg.lookup.channels
        self.motion_corr = _Conv(p, "motion_encoder.corr", corr_ch, 64, 1, rng)
        self.motion_flow = _Conv(p, "motion_encoder.flow", 2, 16, 3, rng)
        self.motion_out = _Conv(p, "motion_encoder.out", 80, 30, 3, rng)

        gru_in = Hd + 32 + Cd
        # Update (z) and reset (r) gates share one convolution: output channels [z | r].
        self.convzr = _Conv(p, "gru.convzr", gru_in, 2 * Hd, 3, rng, gain=0.5)
        self.convq = _Conv(p, "gru.convq", gru_in, Hd, 3, rng, gain=0.5)

        self.head1 = _Conv(p, "flow_head.conv1", Hd, 48, 3, rng)
        self.head2 = _Conv(p, "flow_head.conv2", 48, 2, 3, rng, gain=0.1)

        self.coef = CoefficientNet(corr_ch, cfg.mfr, rng)
        for name, param in self.coef.params.items():
            param.name = f"mfr.{name}"
            p[f"mfr.{name}"] = param

    # ----------------------------------------------------------- parameters
    def named_parameters(self) -> dict[str, Parameter]:
        return self.params

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.params:
            out.setdefault(name.split(".", 1)[0], []).append(name)
        return out

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        unknown = set(state) - set(self.params)
        if missing or unknown:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != model shape {self.params[k].shape}")
            self.params[k].data[...] = v

    def astype(self, dtype) -> "MFRFlowModel":
        """Cast every parameter in place (64-bit for gradient checks)."""
        for param in self.params.values():
            param.data = param.data.astype(dtype)
            param.grad = np.zeros_like(param.data)
        return self

    # -------------------------------------------------------------- network
    @staticmethod
    def _prepare(image) -> Tensor:
        img = T.as_tensor(image.data if isinstance(image, Tensor) else np.asarray(image))
        if img.ndim == 3:
            img = img.reshape((1,) + img.shape)
        if img.ndim != 4 or img.shape[1] != 3:
            raise ShapeError(f"images must be [3,H,W] or [B,3,H,W], got {img.shape}")
        if img.shape[2] % DOWNSAMPLE or img.shape[3] % DOWNSAMPLE:
            raise ShapeError(f"image size {img.shape[2]}x{img.shape[3]} not divisible by {DOWNSAMPLE}")
        return img * 2.0 - 1.0

    @staticmethod
    def _encode(layers, x: Tensor) -> Tensor:
        for conv in layers[:-1]:
            x = T.relu(conv(x))
        return layers[-1](x)

    def extract_features(self, image) -> Tensor:
        """Shared encoder: [B,3,H0,W0] -> [B,D,H0/8,W0/8] (unbatched input keeps no batch axis)."""
        unbatched = np.ndim(image.data if isinstance(image, Tensor) else image) == 3
        out = self._encode(self.feature_net, self._prepare(image))
        return out.reshape(out.shape[1:]) if unbatched else out

    def context(self, image: Tensor) -> tuple[Tensor, Tensor]:
        out = self._encode(self.context_net, image)
        Hd = self.cfg.hidden_dim
        return T.tanh(out[:, :Hd]), T.relu(out[:, Hd:])

    def update(self, state: IterationState, ctx: Tensor, motion: Tensor) -> IterationState:
        """One GRU step: encode motion + flow, update hidden state, add the predicted flow delta."""
        flow, h = state.flow, state.hidden
        cor = T.relu(self.motion_corr(motion))
        flo = T.relu(self.motion_flow(flow))
        mot = T.relu(self.motion_out(T.concat([cor, flo], axis=1)))
        x = T.concat([mot, flow, ctx], axis=1)
        hx = T.concat([h, x], axis=1)
        zr = T.sigmoid(self.convzr(hx))
        Hd = self.cfg.hidden_dim
        z, r = zr[:, :Hd], zr[:, Hd:]
        q = T.tanh(self.convq(T.concat([r * h, x], axis=1)))
        h = (1.0 - z) * h + z * q
        delta = self.head2(T.relu(self.head1(h)))
        return IterationState(flow + delta, h)

    def _pyramid(self, fa: Tensor, fb: Tensor):
        return build_pyramid(build_cost_volume(fa, fb, self.cfg.volume_scale), self.cfg.levels, self.cfg.volume_scale)

    def _zero_state(self, hidden: Tensor) -> IterationState:
        B, _, H, W = hidden.shape
        return IterationState(Tensor(np.zeros((B, 2, H, W), dtype=hidden.dtype)), hidden)

    def _refine(self, pyramid, hidden, ctx, iterations, fill=None):
        state = self._zero_state(hidden)
        flows, fwd_valid, rec_valid = [], [], []
        for _ in range(iterations):
            motion, mask = lookup_motion_feature(pyramid, state.flow, self.cfg.lookup, zero_test=self.cfg.omega == "zero")
            fwd_valid.append(mask.valid)
            data = motion.data
            if fill is not None:
                data, valid_after = fill(data, mask)
                rec_valid.append(valid_after)
            state = self.update(state, ctx, data)
            flows.append(state.flow)
        return flows, fwd_valid, rec_valid

    def estimate_flow_pair(self, image_a, image_b, iterations: int | None = None) -> FlowField:
        """Backbone-only estimate of the a->b flow on the 1/8 feature grid."""
        iterations = self.cfg.iterations if iterations is None else iterations
        a, b = self._prepare(image_a), self._prepare(image_b)
        if a.shape != b.shape:
            raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
        B = a.shape[0]
        feats = self._encode(self.feature_net, T.concat([a, b], axis=0))
        hidden, ctx = self.context(a)
        flows, _, _ = self._refine(self._pyramid(feats[:B], feats[B:]), hidden, ctx, iterations)
        flow = flows[-1] if flows else self._zero_state(hidden).flow
        return FlowField(flow, "a->b")

    def forward_detailed(self, frames, iterations: int | None = None) -> ForwardResult:
        cfg = self.cfg
        iterations = cfg.iterations if iterations is None else iterations
        N = cfg.history
        if len(frames) != N + 2:
            raise ShapeError(f"expected {N + 2} frames (t-{N} .. t+1), got {len(frames)}")
        imgs = [self._prepare(f) for f in frames]
        if any(im.shape != imgs[0].shape for im in imgs):
            raise ShapeError("all frames must share one shape")
        B = imgs[0].shape[0]
        result = ForwardResult(predictions=[])

        # History frames are only encoded when recovery consumes them.
        first = 0 if cfg.recovery else N
        feats = self._encode(self.feature_net, T.concat(imgs[first:], axis=0))

        def frame_features(k: int) -> Tensor:
            return feats[(k - first) * B : (k - first + 1) * B]

        f_t, f_next = frame_features(N), frame_features(N + 1)
        hidden, ctx = self.context(imgs[N])
        pyr_fwd = self._pyramid(f_t, f_next)

        fill = None
        if cfg.recovery:
            # Pairs (t, t-n) for n = 1..N, batched along the leading axis.
            past = T.concat([frame_features(N - n) for n in range(1, N + 1)], axis=0)
            pyr_hist = self._pyramid(T.concat([f_t] * N, axis=0), past)
            hist_flows, _, _ = self._refine(
                pyr_hist, T.concat([hidden] * N, axis=0), T.concat([ctx] * N, axis=0), iterations
            )
            hist_flow = hist_flows[-1] if hist_flows else self._zero_state(T.concat([hidden] * N, axis=0)).flow
            m_hist, hist_mask = lookup_motion_feature(
                pyr_hist, hist_flow, cfg.lookup, zero_test=cfg.omega == "zero", direction="t->t-n"
            )
            histories = [m_hist.data[(n - 1) * B : n * B] for n in range(1, N + 1)]
            hist_valid = [hist_mask.valid[(n - 1) * B : n * B] for n in range(1, N + 1)]
            alpha = coefficient_forward(self.coef, histories)
            result.history_flows = [hist_flow[(n - 1) * B : n * B] for n in range(1, N + 1)]
            result.history_valid = hist_valid
            result.alpha = alpha

            def fill(motion: Tensor, mask: ValidityMask):
                omega = mask.omega if cfg.omega != "empty" else np.zeros_like(mask.valid)
                out = recover(motion, omega, histories, alpha, cfg.mfr)
                valid_after = (
                    recovered_validity(mask.valid, hist_valid, alpha.data, cfg.mfr)
                    if cfg.omega != "empty"
                    else mask.valid
                )
                return out, valid_after

        flows, fwd_valid, rec_valid = self._refine(pyr_fwd, hidden, ctx, iterations, fill)
        result.lowres = flows
        result.forward_valid = fwd_valid
        result.recovered_valid = rec_valid
        result.predictions = [upsample_flow(f) for f in flows]
        return result

    def forward_multiframe(self, frames, iterations: int | None = None) -> list[FlowField]:
        """Full-resolution flow F_{t->t+1} after every GRU iteration."""
        unbatched = np.ndim(frames[0].data if isinstance(frames[0], Tensor) else frames[0]) == 3
        preds = self.forward_detailed(frames, iterations).predictions
        if unbatched:
            preds = [p.reshape(p.shape[1:]) for p in preds]
        return [FlowField(p, "t->t+1") for p in preds]


def sequence_loss(predictions, gt, valid_mask=None, weighting: str = "uniform", gamma: float = 0.8) -> Tensor:
    """Sum over iterations k of w_k * mean over valid pixels of ||pred_k - gt||_2.

    ``weighting`` is ``"uniform"`` (w_k = 1) or ``"exponential"`` (w_k = gamma**(K-k)).
    """
    if not predictions:
        raise ValueError("sequence_loss needs at least one prediction")
    gt_t = gt.data if isinstance(gt, FlowField) else gt
    gt_t = T.as_tensor(gt_t.data if isinstance(gt_t, Tensor) else np.asarray(gt_t))
    preds = [p.data if isinstance(p, FlowField) else p for p in predictions]
    preds = [T.as_tensor(p) for p in preds]
    chan_axis = preds[0].ndim - 3
    if valid_mask is None:
        valid = np.ones(preds[0].shape[:chan_axis] + preds[0].shape[chan_axis + 1 :], dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(valid_mask, dtype=bool), preds[0].shape[:chan_axis] + preds[0].shape[chan_axis + 1 :])
    count = int(valid.sum())
    if count == 0:
        raise ValueError("valid mask is empty")
    w = Tensor(valid.astype(preds[0].dtype))
    K = len(preds)
    total = None
    for k, pred in enumerate(preds, start=1):
        if pred.shape != gt_t.shape:
            raise ShapeError(f"prediction {pred.shape} does not match ground truth {gt_t.shape}")
        err = T.l2_norm(pred - gt_t, axis=chan_axis)
        term = (err * w).sum() * (1.0 / count)
        if weighting == "exponential":
            term = term * gamma ** (K - k)
        elif weighting != "uniform":
            raise ValueError(f"unknown weighting {weighting!r}")
        total = term if total is None else total + term
    return total


def sequence_loss_terms(predictions, gt, valid_mask=None, weighting: str = "uniform", gamma: float = 0.8) -> np.ndarray:
    """Per-iteration, per-pixel summands of :func:`sequence_loss` as a [K, ...] array.

    ``terms.sum()`` equals the loss. Differencing two of these elementwise
    before summing cancels untouched pixels exactly, which keeps
    finite-difference noise well below that of subtracting two totals.
    """
    gt_arr = np.asarray(gt.numpy() if isinstance(gt, FlowField) else getattr(gt, "data", gt))
    preds = [np.asarray(p.numpy() if isinstance(p, FlowField) else getattr(p, "data", p)) for p in predictions]
    chan_axis = preds[0].ndim - 3
    shape = preds[0].shape[:chan_axis] + preds[0].shape[chan_axis + 1 :]
    valid = np.ones(shape, dtype=bool) if valid_mask is None else np.broadcast_to(np.asarray(valid_mask, dtype=bool), shape)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("valid mask is empty")
    K = len(preds)
    out = []
    for k, pred in enumerate(preds, start=1):
        w = 1.0 if weighting == "uniform" else gamma ** (K - k)
        err = np.sqrt(((pred - gt_arr) ** 2).sum(axis=chan_axis))
        out.append(np.where(valid, err, 0.0) * (w / count))
    return np.stack(out)


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
