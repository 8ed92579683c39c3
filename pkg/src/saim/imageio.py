"""Image batches: synthetic generation, augmentation and file formats.

An image batch is a float32 array of shape ``(N, C, H, W)`` with values in
[0, 1] (channel-planar, row-major). Augmentation returns color-normalized
batches, which are no longer bounded to [0, 1].
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from saim.rng import Xoshiro256

N_CLASSES = 8
RAW_MAGIC = b"SIMB"
RAW_VERSION = 1


class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class AugmentConfig:
    crop_scale_min: float = 0.67
    crop_scale_max: float = 1.0
    aspect_min: float = 3 / 4
    aspect_max: float = 4 / 3
    hflip_prob: float = 0.5
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1:
            raise ValueError("need 0 < crop_scale_min <= crop_scale_max <= 1")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise ValueError("need 0 < aspect_min <= aspect_max")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must be a probability")


# ---------------------------------------------------------------------------
# synthetic data

# Per-channel background offset common to the whole dataset. Under per-patch
# normalized targets it gives flat regions a consistent pattern to learn
# without adding per-image nuisance to the features.
CAST = 0.1


def _shape_mask(kind: int, cy: float, cx: float, radius: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if kind == 0:  # disk
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2).astype(np.float64)
    # axis-aligned square
    return ((np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)).astype(np.float64)


def generate_synthetic(n: int, size: int, seed: int, channels: int = 3):
    """Procedural images and their class labels.

    Class ``k`` (0..7) encodes three bits: shape (disk or square), position
    (upper-left or lower-right half of the frame) and intensity (bright or
    dark object). The background is a faint random low-frequency grating over
    a gray level with a colour cast shared by every image plus a small
    per-image tint jitter. Deterministic given ``seed``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 8 or size % 4 != 0:
        raise ValueError(f"size must be a multiple of 4 and >= 8, got {size}")
    rng = Xoshiro256(seed)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(n):
        label = rng.integers(N_CLASSES)
        shape_kind, pos_kind, bright = label & 1, (label >> 1) & 1, (label >> 2) & 1

        theta = rng.uniform53() * math.pi
        freq = (1.0 + 2.0 * rng.uniform53()) / size
        phase = rng.uniform53() * 2 * math.pi
        wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
        gray = 0.3 + 0.4 * rng.uniform53()
        tint = [
            gray + CAST * (c - (channels - 1) / 2) + 0.05 * (rng.uniform53() - 0.5)
            for c in range(channels)
        ]
        background = np.stack([t + 0.03 * wave for t in tint])

        radius = size * (0.16 + 0.06 * rng.uniform53())
        jitter_y = (rng.uniform53() - 0.5) * size * 0.15
        jitter_x = (rng.uniform53() - 0.5) * size * 0.15
        centre = size * (0.3 if pos_kind == 0 else 0.7)
        mask = _shape_mask(shape_kind, centre + jitter_y, centre + jitter_x, radius, size)
        level = 0.92 if bright else 0.06
        colour = [level + 0.3 * (rng.uniform53() - 0.5) for _ in range(channels)]

        img = background * (1 - mask) + np.stack([c * mask for c in colour])
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = label
    return images, labels


# ---------------------------------------------------------------------------
# augmentation

def _crop_box(h: int, w: int, cfg: AugmentConfig, rng: Xoshiro256) -> tuple[int, int, int, int]:
    area = h * w
    log_lo, log_hi = math.log(cfg.aspect_min), math.log(cfg.aspect_max)
    for _ in range(10):
        target = area * (cfg.crop_scale_min + (cfg.crop_scale_max - cfg.crop_scale_min) * rng.uniform53())
        aspect = math.exp(log_lo + (log_hi - log_lo) * rng.uniform53())
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if not (0 < cw <= w and 0 < ch <= h):
            continue
        # rounding can push the realised area out of range; treat as degenerate
        if not cfg.crop_scale_min <= (cw * ch) / area <= cfg.crop_scale_max:
            continue
        top = rng.integers(h - ch + 1)
        left = rng.integers(w - cw + 1)
        return top, left, ch, cw
    # fallback: largest centred crop whose aspect lies in range
    ratio = w / h
    if ratio < cfg.aspect_min:
        cw, ch = w, int(round(w / cfg.aspect_min))
    elif ratio > cfg.aspect_max:
        ch, cw = h, int(round(h * cfg.aspect_max))
    else:
        ch, cw = h, w
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def normalize_colors(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    c = img.shape[1]
    mean = np.asarray(cfg.mean[:c], dtype=np.float32).reshape(1, c, 1, 1)
    std = np.asarray(cfg.std[:c], dtype=np.float32).reshape(1, c, 1, 1)
    return ((img - mean) / std).astype(np.float32)


def denormalize_colors(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    c = img.shape[1]
    mean = np.asarray(cfg.mean[:c], dtype=np.float32).reshape(1, c, 1, 1)
    std = np.asarray(cfg.std[:c], dtype=np.float32).reshape(1, c, 1, 1)
    return (img * std + mean).astype(np.float32)


def random_resize_crop_flip(
    img: np.ndarray, cfg: AugmentConfig, rng: Xoshiro256, out_size: tuple[int, int] | None = None
) -> np.ndarray:
    """Random resized crop, horizontal flip, then per-channel normalization.

    Images are processed in index order, consuming ``rng`` in a fixed order.
    """
    n, c, h, w = img.shape
    oh, ow = out_size if out_size is not None else (h, w)
    out = np.empty((n, c, oh, ow), dtype=np.float32)
    for i in range(n):
        top, left, ch, cw = _crop_box(h, w, cfg, rng)
        crop = img[i : i + 1, :, top : top + ch, left : left + cw]
        if (ch, cw) != (oh, ow):
            crop = F.interpolate(
                torch.from_numpy(np.ascontiguousarray(crop, dtype=np.float32)),
                size=(oh, ow),
                mode="bilinear",
                align_corners=False,
            ).numpy()
        if rng.uniform53() < cfg.hflip_prob:
            crop = crop[..., ::-1]
        out[i] = crop[0]
    return normalize_colors(out, cfg)


# ---------------------------------------------------------------------------
# PPM / PGM

def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of header", start)
    return data[start:pos], pos


def parse_ppm(data: bytes) -> np.ndarray:
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}", 0)
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad header field {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError("image dimensions must be positive", pos)
    if not 0 < maxval <= 255:
        raise ImageFormatError(f"only 8-bit maxval supported, got {maxval}", pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(data) - pos < need:
        raise ImageFormatError(
            f"truncated payload: need {need} bytes, found {len(data) - pos}", len(data)
        )
    if len(data) - pos > need:
        raise ImageFormatError(f"trailing bytes after {need}-byte payload", pos + need)
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    img = raw.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float32) / maxval
    return img[None]


def load_ppm(path: str | Path) -> np.ndarray:
    """Load a binary PPM (P6) or PGM (P5) as a ``(1, C, H, W)`` batch."""
    return parse_ppm(Path(path).read_bytes())


def encode_ppm(img: np.ndarray) -> bytes:
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError("encode_ppm takes a single image")
        img = img[0]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"PPM/PGM needs 1 or 3 channels, got {c}")
    q = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    header = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode("ascii")
    return header + q.transpose(1, 2, 0).tobytes()


def save_ppm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


# ---------------------------------------------------------------------------
# raw batch files

_RAW_HEADER = struct.Struct("<4sIIIII")


def encode_raw_batch(batch: np.ndarray) -> bytes:
    if batch.ndim != 4:
        raise ValueError("raw batch must be 4-d (N, C, H, W)")
    header = _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, *batch.shape)
    return header + np.ascontiguousarray(batch, dtype="<f4").tobytes()


def parse_raw_batch(data: bytes) -> np.ndarray:
    if len(data) < _RAW_HEADER.size:
        raise ImageFormatError("truncated header", len(data))
    magic, version, n, c, h, w = _RAW_HEADER.unpack_from(data, 0)
    if magic != RAW_MAGIC:
        raise ImageFormatError(f"bad magic {magic!r}", 0)
    if version != RAW_VERSION:
        raise ImageFormatError(f"unsupported version {version}", 4)
    need = n * c * h * w * 4
    have = len(data) - _RAW_HEADER.size
    if have != need:
        raise ImageFormatError(
            f"payload is {have} bytes but dims {n}x{c}x{h}x{w} need {need}", _RAW_HEADER.size
        )
    arr = np.frombuffer(data, dtype="<f4", offset=_RAW_HEADER.size).reshape(n, c, h, w)
    return arr.astype(np.float32)


def save_raw_batch(path: str | Path, batch: np.ndarray) -> None:
    Path(path).write_bytes(encode_raw_batch(batch))


def load_raw_batch(path: str | Path) -> np.ndarray:
    return parse_raw_batch(Path(path).read_bytes())
