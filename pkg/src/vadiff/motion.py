"""Compact motion representations computed from short RGB clips.

Two single-image summaries of a clip are supported: the "star" image,
which accumulates inter-frame intensity change weighted by RGB-hue
agreement into the three channels (one temporal third per channel), and
the "dynamic" image, a temporally weighted sum whose coefficients encode
frame order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass
class FrameClip:
    """A fixed-length sequence of RGB frames, shape (N, H, W, 3), values in [0, 255]."""

    frames: np.ndarray
    clip_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InvalidInputError(f"clip must be (N, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise InvalidInputError("clip needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise InvalidInputError("clip contains non-finite intensities")
        if self.frames.min() < 0.0 or self.frames.max() > 255.0:
            raise InvalidInputError("intensities must lie in [0, 255]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MotionImage:
    """Single (H, W, 3) real image summarizing a clip; kind is 'star' or 'dynamic'."""

    pixels: np.ndarray
    kind: str
    source_clip_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[-1] != 3:
            raise InvalidInputError(f"motion image must be (H, W, 3), got {self.pixels.shape}")


def compute_dynamic_image(clip: FrameClip) -> MotionImage:
    """Weighted frame sum with coefficients alpha_k = 2k - N - 1, k = 1..N.

    The coefficients sum to zero, so static clips map to the zero image.
    Output is unnormalized and may be negative.
    """
    n = clip.n_frames
    alphas = 2.0 * np.arange(1, n + 1) - n - 1
    pixels = np.tensordot(alphas, clip.frames, axes=1)
    return MotionImage(pixels=pixels, kind="dynamic", source_clip_id=clip.clip_id)


def split_subclips(clip: FrameClip, parts: int) -> list[FrameClip]:
    """Contiguous order-preserving partition; the last piece absorbs the remainder."""
    if parts < 1:
        raise InvalidInputError("parts must be >= 1")
    n = clip.n_frames
    if parts > n:
        raise InvalidInputError(f"cannot split {n} frames into {parts} parts")
    base = n // parts
    out = []
    for p in range(parts):
        lo = p * base
        hi = (p + 1) * base if p < parts - 1 else n
        out.append(FrameClip(frames=clip.frames[lo:hi], clip_id=f"{clip.clip_id}/part{p}"))
    return out


def _star_accumulate(frames: np.ndarray) -> np.ndarray:
    """Per-pixel accumulation over one sub-video: sum_k (1 - lam/2) * |norm_k - norm_{k-1}|.

    lam is the cosine similarity of consecutive RGB vectors at the pixel;
    when either vector is zero, lam := 0 so the intensity change counts fully.
    """
    norms = np.linalg.norm(frames, axis=-1)  # (n, H, W)
    prev, cur = frames[:-1], frames[1:]
    dots = np.einsum("khwc,khwc->khw", prev, cur)
    denom = norms[:-1] * norms[1:]
    lam = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0.0)
    diff = np.abs(norms[1:] - norms[:-1])
    return np.sum((1.0 - lam / 2.0) * diff, axis=0)


def compute_star_image(clip: FrameClip) -> MotionImage:
    """Star RGB image: three temporal thirds map to R, G, B channels.

    Each channel accumulates inter-frame intensity-norm change weighted by
    (1 - lam/2), lam the cosine similarity of consecutive RGB pixel vectors.
    Output is unnormalized; needs N >= 6 so every third holds >= 2 frames.
    """
    if clip.n_frames < 6:
        raise InvalidInputError(f"star image needs N >= 6 frames, got {clip.n_frames}")
    subs = split_subclips(clip, 3)
    channels = [_star_accumulate(s.frames) for s in subs]
    pixels = np.stack(channels, axis=-1)
    return MotionImage(pixels=pixels, kind="star", source_clip_id=clip.clip_id)


def normalize_motion_image(img: MotionImage) -> MotionImage:
    """Per-image min-max rescale to [0, 255]; constant images map to all zeros."""
    if not np.all(np.isfinite(img.pixels)):
        raise InvalidInputError("motion image contains non-finite values")
    lo, hi = img.pixels.min(), img.pixels.max()
    if hi == lo:
        pixels = np.zeros_like(img.pixels)
    else:
        # divide first so the max lands on 255.0 exactly
        pixels = (img.pixels - lo) / (hi - lo) * 255.0
    return MotionImage(pixels=pixels, kind=img.kind, source_clip_id=img.source_clip_id)
