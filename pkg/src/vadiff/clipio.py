"""Frame and motion-image containers.

Supported on-disk forms:
  * binary PPM (P6, maxval 255) for individual frames and normalized motion images
  * "VADC" raw clip container: magic, version u16=1, N/H/W u32 LE, N*H*W*3 u8 RGB
  * "VADM" raw motion image: magic, version u16=1, H/W u32 LE, H*W*3 f32 LE
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .motion import FrameClip, MotionImage

CLIP_MAGIC = b"VADC"
MOTION_MAGIC = b"VADM"
_VERSION = 1


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write an (H, W, 3) array with values in [0, 255] as binary PPM."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise InvalidInputError(f"PPM wants (H, W, 3), got {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise InvalidInputError("PPM values must lie in [0, 255]")
    h, w = arr.shape[:2]
    data = np.rint(arr).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    body = raw[m.end():]
    need = h * w * 3
    if len(body) < need:
        raise FormatError(f"{path}: truncated PPM payload")
    pix = np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64)


def read_clip_dir(path, clip_id: str | None = None) -> FrameClip:
    """Load a clip from a directory of PPM frames, lexicographically ordered."""
    files = sorted(Path(path).glob("*.ppm"))
    if not files:
        raise FormatError(f"{path}: no PPM frames found")
    frames = np.stack([read_ppm(f) for f in files])
    return FrameClip(frames=frames, clip_id=clip_id or Path(path).name)


def write_clip(path, clip: FrameClip) -> None:
    n, h, w = clip.frames.shape[:3]
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<HIII", _VERSION, n, h, w))
        fh.write(np.rint(clip.frames).astype(np.uint8).tobytes())


def read_clip(path, clip_id: str | None = None) -> FrameClip:
    raw = Path(path).read_bytes()
    if raw[:4] != CLIP_MAGIC:
        raise FormatError(f"{path}: bad magic, expected VADC")
    (version, n, h, w) = struct.unpack_from("<HIII", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported VADC version {version}")
    need = n * h * w * 3
    body = raw[4 + struct.calcsize("<HIII"):]
    if len(body) < need:
        raise FormatError(f"{path}: truncated VADC payload")
    frames = np.frombuffer(body[:need], dtype=np.uint8).reshape(n, h, w, 3)
    return FrameClip(frames=frames.astype(np.float64), clip_id=clip_id or Path(path).stem)


def write_motion_image(path, img: MotionImage) -> None:
    h, w = img.pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(MOTION_MAGIC)
        fh.write(struct.pack("<HII", _VERSION, h, w))
        fh.write(img.pixels.astype("<f4").tobytes())


def read_motion_image(path, kind: str = "unknown") -> MotionImage:
    raw = Path(path).read_bytes()
    if raw[:4] != MOTION_MAGIC:
        raise FormatError(f"{path}: bad magic, expected VADM")
    (version, h, w) = struct.unpack_from("<HII", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported VADM version {version}")
    body = raw[4 + struct.calcsize("<HII"):]
    need = h * w * 3 * 4
    if len(body) < need:
        raise FormatError(f"{path}: truncated VADM payload")
    pixels = np.frombuffer(body[:need], dtype="<f4").reshape(h, w, 3)
    return MotionImage(pixels=pixels.astype(np.float64), kind=kind, source_clip_id=Path(path).stem)


def moving_square_clip(n: int = 16, h: int = 32, w: int = 32, size: int = 6,
                       seed: int = 0, clip_id: str = "synthetic") -> FrameClip:
    """Procedural test clip: a colored square sweeping left to right over a gray floor."""
    rng = np.random.default_rng(seed)
    color = rng.uniform(100.0, 255.0, size=3)
    bg = rng.uniform(10.0, 60.0)
    frames = np.full((n, h, w, 3), bg)
    top = (h - size) // 2
    for k in range(n):
        left = int(round(k * (w - size) / max(n - 1, 1)))
        frames[k, top:top + size, left:left + size] = color
    return FrameClip(frames=frames, clip_id=clip_id)
