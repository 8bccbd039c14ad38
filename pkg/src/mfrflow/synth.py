"""Synthetic multi-frame sequences of textured sprites with analytic flow.

Every surface (the background plus each sprite) translates at a constant
velocity, so flow is known exactly and consecutive flows agree. Textures are
sums of random sinusoids, evaluated in the surface's own coordinates, so a
surface looks identical after translation. Frames are rendered with 4x4
supersampling for anti-aliased edges.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .flowfield import FlowField

REGIMES = ("small", "large", "occluding")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class Sprite:
    shape: str  # "rect" or "disc"
    size: tuple[float, float]  # (width, height); discs use width as diameter
    texture_seed: int
    position: tuple[float, float]  # centre (x, y) in frame t
    velocity: tuple[float, float]  # px per frame
    depth: int  # larger is nearer the camera

    def __post_init__(self):
        if self.shape not in ("rect", "disc"):
            raise ValueError(f"unknown sprite shape {self.shape!r}")
        if min(self.size) <= 0:
            raise ValueError("sprite size must be positive")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    background_seed: int = 0
    background_velocity: tuple[float, float] = (0.0, 0.0)
    sprites: tuple[Sprite, ...] = ()
    history: int = 2
    regime: str = "small"


@dataclass
class SampleSequence:
    frames: list[np.ndarray]  # I_{t-N} .. I_{t+1}, each [3, H, W] in [0, 1]
    gt_flow: FlowField  # F_{t->t+1}
    occlusion_mask: np.ndarray  # [H, W] bool
    valid_mask: np.ndarray  # [H, W] bool
    sprite_mask: np.ndarray  # [H, W] bool, pixels of frame t owned by a sprite
    history_flows: list[FlowField] = field(default_factory=list)  # F_{t->t-n}, n = 1..N
    regime: str = "small"
    sample_id: str = ""

    @property
    def history(self) -> int:
        return len(self.frames) - 2

    def checksum(self) -> str:
        h = hashlib.sha256()
        for f in self.frames:
            h.update(np.ascontiguousarray(f).tobytes())
        h.update(self.gt_flow.numpy().tobytes())
        h.update(self.occlusion_mask.tobytes())
        return h.hexdigest()


class Texture:
    """Smooth RGB texture: a base colour plus random plane waves per channel."""

    def __init__(self, seed: int, waves: int = 6, min_period: float = 10.0, max_period: float = 36.0):
        rng = np.random.default_rng(seed)
        self.base = rng.uniform(0.3, 0.7, size=3)
        period = rng.uniform(min_period, max_period, size=(3, waves))
        angle = rng.uniform(0, 2 * np.pi, size=(3, waves))
        self.fx = np.cos(angle) / period
        self.fy = np.sin(angle) / period
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, waves))
        self.amp = rng.uniform(0.3, 1.0, size=(3, waves))
        self.amp *= 0.3 / self.amp.sum(axis=1, keepdims=True)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Colour at surface coordinates; returns [3, *x.shape]."""
        arg = (
            2 * np.pi * (self.fx[:, :, None] * x.ravel()[None, None] + self.fy[:, :, None] * y.ravel()[None, None])
            + self.phase[:, :, None]
        )
        val = self.base[:, None] + (self.amp[:, :, None] * np.sin(arg)).sum(axis=1)
        return val.reshape((3,) + x.shape)

    def grid(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Colour on the separable grid ys x xs; returns [3, len(ys), len(xs)]."""
        a = 2 * np.pi * self.fx[:, :, None] * xs[None, None, :]
        b = 2 * np.pi * self.fy[:, :, None] * ys[None, None, :] + self.phase[:, :, None]
        # sin(a + b) = sin(a) cos(b) + cos(a) sin(b)
        lhs = np.concatenate([self.amp[:, :, None] * np.cos(b), self.amp[:, :, None] * np.sin(b)], axis=1)
        rhs = np.concatenate([np.sin(a), np.cos(a)], axis=1)
        waves = np.matmul(lhs.transpose(0, 2, 1), rhs)
        return self.base[:, None, None] + waves


def _covers(sprite: Sprite, x: np.ndarray, y: np.ndarray, time: float) -> np.ndarray:
    cx = sprite.position[0] + sprite.velocity[0] * time
    cy = sprite.position[1] + sprite.velocity[1] * time
    dx, dy = x - cx, y - cy
    w, h = sprite.size
    if sprite.shape == "rect":
        return (np.abs(dx) <= w / 2) & (np.abs(dy) <= h / 2)
    return dx * dx + dy * dy <= (w / 2) ** 2


def _layers(spec: SceneSpec) -> list[Sprite]:
    return sorted(spec.sprites, key=lambda s: s.depth)


def owner_map(spec: SceneSpec, x: np.ndarray, y: np.ndarray, time: float) -> np.ndarray:
    """Index of the frontmost surface at each point: -1 background, k = k-th sprite by depth."""
    owner = np.full(x.shape, -1, dtype=np.int64)
    for k, sprite in enumerate(_layers(spec)):
        owner[_covers(sprite, x, y, time)] = k
    return owner


def render_frame(spec: SceneSpec, time: float, textures: dict | None = None) -> np.ndarray:
    """Anti-aliased RGB frame [3, H, W] at ``time`` (frame t is time 0)."""
    H, W, S = spec.height, spec.width, SUPERSAMPLE
    sub = (np.arange(S) + 0.5) / S - 0.5
    ys = (np.arange(H)[:, None] + sub[None, :]).ravel()
    xs = (np.arange(W)[:, None] + sub[None, :]).ravel()
    y, x = np.meshgrid(ys, xs, indexing="ij")

    textures = textures or _textures(spec)
    vx, vy = spec.background_velocity
    img = textures["bg"].grid(xs - vx * time, ys - vy * time)
    for k, sprite in enumerate(_layers(spec)):
        cov = _covers(sprite, x, y, time)
        if not cov.any():
            continue
        ox = sprite.position[0] + sprite.velocity[0] * time
        oy = sprite.position[1] + sprite.velocity[1] * time
        img[:, cov] = textures[k].grid(xs - ox, ys - oy)[:, cov]
    img = img.reshape(3, H, S, W, S).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _textures(spec: SceneSpec) -> dict:
    tex: dict = {"bg": Texture(spec.background_seed)}
    for k, sprite in enumerate(_layers(spec)):
        tex[k] = Texture(sprite.texture_seed)
    return tex


def _velocity_of(spec: SceneSpec, owner: np.ndarray) -> np.ndarray:
    layers = _layers(spec)
    vel = np.empty((2,) + owner.shape, dtype=np.float64)
    vel[0] = spec.background_velocity[0]
    vel[1] = spec.background_velocity[1]
    for k, sprite in enumerate(layers):
        sel = owner == k
        vel[0][sel] = sprite.velocity[0]
        vel[1][sel] = sprite.velocity[1]
    return vel


def generate_sequence(spec: SceneSpec, seed: int | None = None) -> SampleSequence:
    """Render I_{t-N} .. I_{t+1} with analytic F_{t->t+1}, history flows and occlusion mask.

    ``seed`` only salts the sample id; the render is fully determined by ``spec``.
    """
    if spec.history < 1:
        raise ValueError("history must be >= 1")
    if spec.height < 1 or spec.width < 1:
        raise ValueError("canvas must be non-empty")
    for sprite in spec.sprites:
        if min(sprite.size) <= 0:
            raise ValueError("degenerate sprite with zero size")

    textures = _textures(spec)
    frames = [render_frame(spec, float(tau), textures) for tau in range(-spec.history, 2)]

    H, W = spec.height, spec.width
    y, x = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    owner = owner_map(spec, x, y, 0.0)
    vel = _velocity_of(spec, owner)

    qx, qy = x + vel[0], y + vel[1]
    outside = (qx < -0.5) | (qx > W - 0.5) | (qy < -0.5) | (qy > H - 0.5)
    covered = owner_map(spec, qx, qy, 1.0) != owner
    occlusion = outside | covered

    history_flows = [FlowField((-n * vel).astype(np.float32), f"t->t-{n}") for n in range(1, spec.history + 1)]
    return SampleSequence(
        frames=frames,
        gt_flow=FlowField(vel.astype(np.float32), "t->t+1"),
        occlusion_mask=occlusion,
        valid_mask=np.ones((H, W), dtype=bool),
        sprite_mask=owner >= 0,
        history_flows=history_flows,
        regime=spec.regime,
        sample_id="" if seed is None else f"{seed}",
    )


def _polar(rng: np.random.Generator, lo: float, hi: float) -> tuple[float, float]:
    speed = rng.uniform(lo, hi)
    angle = rng.uniform(0, 2 * np.pi)
    return float(speed * math.cos(angle)), float(speed * math.sin(angle))


def random_scene(regime: str, rng: np.random.Generator, history: int = 2, height: int = 64, width: int = 64) -> SceneSpec:
    """Draw a scene for one displacement regime.

    small     background pans 5-8 px/frame, sprites within +-2 px of it
    large     sprites move 16-28 px/frame over a slow background
    occluding 2-4 overlapping sprites at 6-16 px/frame, crossing each other
              and the canvas border
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if regime == "small":
        bg_v = _polar(rng, 5.0, 8.0)
        n_sprites = int(rng.integers(1, 4))
    elif regime == "large":
        bg_v = _polar(rng, 0.0, 4.0)
        n_sprites = int(rng.integers(1, 4))
    else:
        bg_v = _polar(rng, 2.0, 6.0)
        n_sprites = int(rng.integers(2, 5))

    depths = rng.permutation(n_sprites) + 1
    sprites = []
    for k in range(n_sprites):
        shape = "rect" if rng.random() < 0.5 else "disc"
        size = (float(rng.uniform(12, 26)), float(rng.uniform(12, 26)))
        if shape == "disc":
            size = (size[0], size[0])
        if regime == "small":
            vel = (bg_v[0] + float(rng.uniform(-2, 2)), bg_v[1] + float(rng.uniform(-2, 2)))
        elif regime == "large":
            vel = _polar(rng, 16.0, 28.0)
        else:
            vel = _polar(rng, 6.0, 16.0)
        if regime == "occluding":
            # Cluster near the centre so sprites overlap, with some crossing the border.
            pos = (float(rng.uniform(0.2, 0.8) * width), float(rng.uniform(0.2, 0.8) * height))
        else:
            pos = (float(rng.uniform(0.1, 0.9) * width), float(rng.uniform(0.1, 0.9) * height))
        sprites.append(
            Sprite(shape, size, int(rng.integers(2**31)), pos, vel, int(depths[k]))
        )
    return SceneSpec(
        height=height,
        width=width,
        background_seed=int(rng.integers(2**31)),
        background_velocity=bg_v,
        sprites=tuple(sprites),
        history=history,
        regime=regime,
    )


def regime_counts(mix: dict[str, float], count: int) -> dict[str, int]:
    """Split ``count`` across regimes by largest remainder so the totals match exactly."""
    total = sum(mix.values())
    if total <= 0:
        raise ValueError("regime mix must have positive total weight")
    for name in mix:
        if name not in REGIMES:
            raise ValueError(f"unknown regime {name!r}")
    raw = {k: count * v / total for k, v in mix.items()}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    leftover = count - sum(counts.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - counts[k]), k))[:leftover]:
        counts[k] += 1
    return counts


def make_dataset(
    mix: dict[str, float] | str,
    count: int,
    seed: int = 0,
    history: int = 2,
    height: int = 64,
    width: int = 64,
) -> list[SampleSequence]:
    """Reproducible dataset; per-sample generators come from ``SeedSequence(seed).spawn``."""
    if isinstance(mix, str):
        mix = parse_mix(mix)
    if count == 0:
        return []
    counts = regime_counts(mix, count)
    tags = [name for name in sorted(counts) for _ in range(counts[name])]
    order_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    tags = [tags[i] for i in order_rng.permutation(count)]
    children = np.random.SeedSequence([seed, 1]).spawn(count)
    out = []
    for i, (tag, child) in enumerate(zip(tags, children)):
        rng = np.random.default_rng(child)
        spec = random_scene(tag, rng, history, height, width)
        seq = generate_sequence(spec)
        seq.sample_id = f"{i:05d}"
        out.append(seq)
    return out


def parse_mix(text: str) -> dict[str, float]:
    """``"small"`` or ``"small:0.5,large:0.5"`` to a weight mapping."""
    mix: dict[str, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, weight = part.partition(":")
        mix[name.strip()] = float(weight) if weight else 1.0
    return mix


def warp_error(seq: SampleSequence) -> float:
    """Mean |I_{t+1}(x + F(x)) - I_t(x)| over non-occluded sprite pixels.

    Destinations within half a pixel of the canvas edge count as visible but
    lie beyond the outermost pixel centres, where bilinear warping would read
    zeros; only destinations between pixel centres are compared.
    """
    frame_t = seq.frames[-2]
    frame_n = seq.frames[-1]
    flow = seq.gt_flow.numpy()
    H, W = frame_t.shape[1:]
    y, x = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    qx, qy = x + flow[0], y + flow[1]
    inside = (qx >= 0) & (qx <= W - 1) & (qy >= 0) & (qy <= H - 1)
    sel = seq.sprite_mask & ~seq.occlusion_mask & inside
    if not sel.any():
        return 0.0
    coords = np.stack([qx[sel], qy[sel]], axis=-1)
    warped, _ = T.bilinear_sample(T.Tensor(frame_n.astype(np.float64)), coords.astype(np.float64))
    return float(np.abs(warped.data - frame_t[:, sel]).mean())
