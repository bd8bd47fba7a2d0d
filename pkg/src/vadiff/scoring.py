"""Anomaly decisions from reconstructions: per-clip MSE, batch-statistics
threshold, clip-to-frame broadcasting, and frame-level ROC-AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, InvalidInputError


@dataclass
class ScoreRecord:
    clip_id: str
    video_id: str
    frame_span: tuple[int, int]  # inclusive
    mse: float
    label_pred: int | None = None
    label_true: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.mse) or self.mse < 0:
            raise InvalidInputError(f"{self.clip_id}: mse must be finite and >= 0")


def reconstruction_error(x0, x_rec) -> float:
    """Mean over dimensions of squared differences."""
    a = np.asarray(x0, dtype=np.float64)
    b = np.asarray(x_rec, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"dim mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def batch_reconstruction_errors(x0, x_rec) -> np.ndarray:
    a = np.asarray(x0, dtype=np.float64)
    b = np.asarray(x_rec, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"dim mismatch {a.shape} vs {b.shape}")
    return np.mean((a - b) ** 2, axis=1)


def batch_threshold(errors, k: float) -> float:
    """L_th = mu_p + k * sigma_p over the batch (population std)."""
    err = np.asarray(errors, dtype=np.float64)
    if err.size == 0:
        raise InvalidInputError("empty batch")
    return float(err.mean() + k * err.std())


def classify(errors, l_th: float) -> list[int]:
    """1 iff error > threshold (strict); ties at the threshold are normal."""
    return [1 if e > l_th else 0 for e in np.asarray(errors, dtype=np.float64)]


def frame_scores(records: list[ScoreRecord], video_lengths: dict[str, int]) -> dict[str, np.ndarray]:
    """Broadcast clip scores to frames. Clip spans must tile each video without
    overlap; trailing frames not covered by a full clip inherit the last
    clip's score."""
    out = {}
    by_video: dict[str, list[ScoreRecord]] = {}
    for r in records:
        by_video.setdefault(r.video_id, []).append(r)
    for vid, recs in by_video.items():
        if vid not in video_lengths:
            raise DataError(f"unknown video {vid}")
        length = video_lengths[vid]
        scores = np.full(length, np.nan)
        recs = sorted(recs, key=lambda r: r.frame_span[0])
        for r in recs:
            lo, hi = r.frame_span
            if lo < 0 or hi >= length:
                raise DataError(f"{r.clip_id}: span ({lo},{hi}) outside video of length {length}")
            if np.any(np.isfinite(scores[lo:hi + 1])):
                raise DataError(f"{r.clip_id}: overlapping clip spans in {vid}")
            scores[lo:hi + 1] = r.mse
        last_hi = recs[-1].frame_span[1]
        if last_hi < length - 1:
            scores[last_hi + 1:] = recs[-1].mse
        if np.any(np.isnan(scores)):
            raise DataError(f"{vid}: frames not covered by any clip")
        out[vid] = scores
    return out


def roc_auc(scores, labels) -> float:
    """AUC as the normalized rank-sum statistic, with average ranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape:
        raise DataError("scores/labels length mismatch")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("AUC undefined: both classes must be present")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Score CSV

SCORE_FIELDS = ["clip_id", "video_id", "start_frame", "end_frame", "mse",
                "label_pred", "label_true"]


def write_score_csv(path, records: list[ScoreRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_FIELDS)
        for r in records:
            writer.writerow([
                r.clip_id, r.video_id, r.frame_span[0], r.frame_span[1],
                repr(r.mse),
                "" if r.label_pred is None else r.label_pred,
                "" if r.label_true is None else r.label_true,
            ])


def read_score_csv(path) -> list[ScoreRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORE_FIELDS:
            raise DataError(f"{path}: unexpected score CSV header {reader.fieldnames}")
        for row in reader:
            records.append(ScoreRecord(
                clip_id=row["clip_id"],
                video_id=row["video_id"],
                frame_span=(int(row["start_frame"]), int(row["end_frame"])),
                mse=float(row["mse"]),
                label_pred=int(row["label_pred"]) if row["label_pred"] != "" else None,
                label_true=int(row["label_true"]) if row["label_true"] != "" else None,
            ))
    return records
