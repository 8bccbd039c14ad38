"""File formats: Middlebury .flo, binary PPM/PGM, and colour-wheel flow rendering."""

from __future__ import annotations

import struct

import numpy as np

from .flowfield import FlowField

FLO_MAGIC = b"PIEH"


class FormatError(ValueError):
    pass


def write_flo(path, flow) -> None:
    """Write [2, H, W] flow: "PIEH", width i32, height i32, then interleaved (u, v) float32 LE."""
    arr = flow.numpy() if isinstance(flow, FlowField) else np.asarray(getattr(flow, "data", flow))
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"flow must be [2,H,W], got {arr.shape}")
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(arr.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: not a .flo file (bad magic)")
    w, h = struct.unpack_from("<ii", blob, 4)
    if w < 0 or h < 0:
        raise FormatError(f"{path}: negative dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(blob) < need:
        raise FormatError(f"{path}: truncated ({len(blob)} of {need} bytes)")
    data = np.frombuffer(blob, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(data.transpose(2, 0, 1).astype(np.float32), "t->t+1")


def write_ppm(path, image: np.ndarray) -> None:
    """Write an RGB image ([3,H,W] or [H,W,3], floats in [0,1] or uint8) as binary P6."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write a single-channel image as binary P5; booleans map to 0/255."""
    img = np.asarray(image)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    elif img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported")
    count = w * h * channels
    if len(blob) - pos < count:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w))


def read_ppm(path) -> np.ndarray:
    """Binary P6 to float32 [3, H, W] in [0, 1]."""
    return (_read_netpbm(path, b"P6", 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def read_pgm(path) -> np.ndarray:
    """Binary P5 to uint8 [H, W]."""
    return _read_netpbm(path, b"P5", 1).copy()


def _color_wheel() -> np.ndarray:
    """Middlebury colour wheel: 55 hues through red-yellow-green-cyan-blue-magenta."""
    segments = [(15, (255, 0, 0), (255, 255, 0)),
                (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)),
                (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)),
                (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, start, end in segments:
        t = np.arange(n)[:, None] / n
        rows.append(np.asarray(start) * (1 - t) + np.asarray(end) * t)
    return np.concatenate(rows, axis=0) / 255.0


def flow_angle_to_wheel(angle: np.ndarray) -> np.ndarray:
    """Map flow angle atan2(-v, -u) in [-pi, pi] to a fractional wheel index."""
    ncols = len(_color_wheel())
    return (angle / np.pi + 1) / 2 * (ncols - 1)


def flow_to_color(flow, max_magnitude: float | None = None) -> np.ndarray:
    """Render [2, H, W] flow as uint8 [H, W, 3].

    Hue follows the flow direction on the Middlebury wheel, saturation grows
    with magnitude / ``max_magnitude`` (default: the field's maximum), and
    zero flow is white.
    """
    arr = flow.numpy() if isinstance(flow, FlowField) else np.asarray(getattr(flow, "data", flow))
    u, v = arr[0].astype(np.float64), arr[1].astype(np.float64)
    mag = np.sqrt(u * u + v * v)
    scale = float(mag.max()) if max_magnitude is None else float(max_magnitude)
    rad = mag / scale if scale > 0 else np.zeros_like(mag)

    wheel = _color_wheel()
    ncols = len(wheel)
    angle = np.arctan2(-v, -u)
    fk = flow_angle_to_wheel(angle)
    k0 = np.floor(fk).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    f = fk - np.floor(fk)
    img = np.empty(u.shape + (3,))
    for c in range(3):
        col = (1 - f) * wheel[k0, c] + f * wheel[k1, c]
        inside = rad <= 1
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        img[..., c] = col
    return np.clip(np.floor(255 * img), 0, 255).astype(np.uint8)


def error_heatmap(err: np.ndarray, max_value: float | None = None) -> np.ndarray:
    """Map non-negative per-pixel errors to a black-red-yellow-white ramp, uint8 [H, W, 3]."""
    top = float(err.max()) if max_value is None else float(max_value)
    t = np.clip(err / top, 0, 1) if top > 0 else np.zeros_like(err)
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)
