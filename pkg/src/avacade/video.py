"""Latent video containers, resampling, serialization, and debug renders.

A latent video is a dense float64 array of shape (F, H, W, D): F frames on a
fixed latent-frame clock, an H x W spatial grid, and D channels per cell.
Videos carry a tier tag ("low" for the 8x8 working resolution, "high" for the
16x16 super-resolved one) and the latent frame rate used to align audio.

The on-disk format is little-endian and fully specified here so that byte
equality is meaningful: magic ``AVLV``, four u32 dims, one f64 frame rate,
one u8 tier code (0=low, 1=high), then the raw float64 payload in C order.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput

MAGIC = b"AVLV"
_TIER_CODES = {"low": 0, "high": 1}
_TIER_NAMES = {v: k for k, v in _TIER_CODES.items()}

# Fixed display range for debug renders; latents are roughly unit scale.
_RENDER_LO = -2.0
_RENDER_HI = 2.0


@dataclass
class LatentVideo:
    data: np.ndarray
    tier: str = "low"
    latent_fps: float = 8.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise InvalidInput(f"latent video must be (F, H, W, D), got shape {self.data.shape}")
        if self.tier not in _TIER_CODES:
            raise InvalidInput(f"unknown tier {self.tier!r}")
        if not self.latent_fps > 0:
            raise InvalidInput("latent_fps must be positive")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def copy(self) -> "LatentVideo":
        return LatentVideo(self.data.copy(), self.tier, self.latent_fps, dict(self.meta))


def block_downsample(video: LatentVideo, factor: int = 2) -> LatentVideo:
    """Average non-overlapping factor x factor spatial blocks.

    H and W must be exact multiples of the factor.
    """
    if factor < 1:
        raise InvalidInput("factor must be >= 1")
    f, h, w, d = video.data.shape
    if h % factor or w % factor:
        raise InvalidInput(f"grid {h}x{w} not divisible by factor {factor}")
    x = video.data.reshape(f, h // factor, factor, w // factor, factor, d)
    out = x.mean(axis=(2, 4))
    return LatentVideo(out, "low", video.latent_fps, dict(video.meta))


def nn_upsample(video: LatentVideo, factor: int = 2) -> LatentVideo:
    """Nearest-neighbour spatial upsampling (each cell repeated factor times)."""
    if factor < 1:
        raise InvalidInput("factor must be >= 1")
    out = np.repeat(np.repeat(video.data, factor, axis=1), factor, axis=2)
    return LatentVideo(out, "high", video.latent_fps, dict(video.meta))


def concat_frames(videos: list[LatentVideo]) -> LatentVideo:
    if not videos:
        raise InvalidInput("nothing to concatenate")
    first = videos[0]
    for v in videos[1:]:
        if v.data.shape[1:] != first.data.shape[1:]:
            raise InvalidInput("frame shapes differ across segments")
        if v.tier != first.tier:
            raise InvalidInput("tier mismatch across segments")
    data = np.concatenate([v.data for v in videos], axis=0)
    return LatentVideo(data, first.tier, first.latent_fps, dict(first.meta))


def save_latent(path: str, video: LatentVideo) -> None:
    f, h, w, d = video.data.shape
    header = MAGIC + struct.pack(
        "<IIIIdB", f, h, w, d, float(video.latent_fps), _TIER_CODES[video.tier]
    )
    payload = np.ascontiguousarray(video.data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_latent(path: str) -> LatentVideo:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise InvalidInput(f"{path}: bad magic")
    f, h, w, d, fps, tier_code = struct.unpack_from("<IIIIdB", blob, 4)
    offset = 4 + struct.calcsize("<IIIIdB")
    n = f * h * w * d
    expected = offset + 8 * n
    if len(blob) != expected:
        raise InvalidInput(f"{path}: payload length {len(blob)} != {expected}")
    if tier_code not in _TIER_NAMES:
        raise InvalidInput(f"{path}: bad tier code {tier_code}")
    data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(f, h, w, d)
    return LatentVideo(data.copy(), _TIER_NAMES[tier_code], fps)


def checksum(video: LatentVideo) -> str:
    """Content hash of the exact bytes (shape, fps, tier, payload)."""
    f, h, w, d = video.data.shape
    hd = hashlib.sha256()
    hd.update(MAGIC)
    hd.update(struct.pack("<IIIIdB", f, h, w, d, float(video.latent_fps), _TIER_CODES[video.tier]))
    hd.update(np.ascontiguousarray(video.data, dtype="<f8").tobytes())
    return hd.hexdigest()


def checksum_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _to_gray(channel: np.ndarray) -> np.ndarray:
    t = (channel - _RENDER_LO) / (_RENDER_HI - _RENDER_LO)
    return (np.clip(t, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def render_frame_pgm(path: str, video: LatentVideo, frame: int, channel: int = 0) -> None:
    """Write one frame's channel as a binary PGM heatmap."""
    gray = _to_gray(video.data[frame, :, :, channel])
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def render_contact_sheet(path: str, video: LatentVideo, channel: int = 0, columns: int = 8) -> None:
    """Tile every frame's channel into one binary PPM (grayscale triplets)."""
    f, h, w, _ = video.data.shape
    columns = max(1, min(columns, f))
    rows = (f + columns - 1) // columns
    sheet = np.zeros((rows * h, columns * w), dtype=np.uint8)
    for i in range(f):
        r, c = divmod(i, columns)
        sheet[r * h : (r + 1) * h, c * w : (c + 1) * w] = _to_gray(video.data[i, :, :, channel])
    rgb = np.repeat(sheet[:, :, None], 3, axis=2)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{sheet.shape[1]} {sheet.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM back into the render value range as (H, W) floats."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise InvalidInput(f"{path}: not a binary PGM")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with optional # comment lines, then one whitespace byte before pixels
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(blob):
            raise InvalidInput(f"{path}: truncated PGM header")
        ch = blob[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            pos = blob.index(b"\n", pos) + 1
        else:
            end = pos
            while end < len(blob) and not blob[end : end + 1].isspace():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
    w, h, maxval = fields
    pos += 1
    if maxval <= 0 or maxval > 255:
        raise InvalidInput(f"{path}: unsupported maxval {maxval}")
    if len(blob) - pos < h * w:
        raise InvalidInput(f"{path}: expected {h * w} pixels")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos)
    gray = pixels.reshape(h, w).astype(np.float64) / maxval
    return gray * (_RENDER_HI - _RENDER_LO) + _RENDER_LO
