"""Feature ingestion and persistence, manifests, standardization, batching,
synthetic data generation, and a deterministic toy condition encoder.

Feature files use the "VADF" container: magic, version u16=1, count u64,
dim u32, count*dim f32 LE row-major, then a JSON index of clip records.
Manifests are JSON documents; paths inside them are resolved against
$VAD_DATA_ROOT when set, else against the manifest's own directory.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InvalidInputError
from .motion import MotionImage

FEATURE_MAGIC = b"VADF"
_VERSION = 1
STD_FLOOR = 1e-6


@dataclass
class ClipFeature:
    """f-dim feature vector for one 16-frame clip of a video."""

    values: np.ndarray
    clip_id: str
    video_id: str = ""
    frame_span: tuple[int, int] = (0, 15)  # inclusive

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InvalidInputError("feature values must be a vector")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError(f"{self.clip_id}: non-finite feature values")


@dataclass
class ConditionVector:
    values: np.ndarray
    clip_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError(f"{self.clip_id}: non-finite condition values")


# ---------------------------------------------------------------------------
# VADF feature container


def write_features(path, features: list[ClipFeature]) -> None:
    if features:
        dim = features[0].values.shape[0]
        for f in features:
            if f.values.shape[0] != dim:
                raise InvalidInputError("inconsistent feature dimensionality")
    else:
        dim = 0
    index = [
        {
            "clip_id": f.clip_id,
            "video_id": f.video_id,
            "start_frame": int(f.frame_span[0]),
            "end_frame": int(f.frame_span[1]),
        }
        for f in features
    ]
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HQI", _VERSION, len(features), dim))
        if features:
            mat = np.stack([f.values for f in features]).astype("<f4")
            fh.write(mat.tobytes())
        fh.write(json.dumps(index, sort_keys=True).encode("utf-8"))


def read_features(path) -> list[ClipFeature]:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic, expected VADF")
    version, count, dim = struct.unpack_from("<HQI", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported VADF version {version}")
    off = 4 + struct.calcsize("<HQI")
    need = count * dim * 4
    if len(raw) < off + need:
        raise FormatError(f"{path}: truncated VADF payload")
    mat = np.frombuffer(raw[off:off + need], dtype="<f4").reshape(count, dim)
    try:
        index = json.loads(raw[off + need:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad VADF index: {exc}") from exc
    if len(index) != count:
        raise FormatError(f"{path}: index length {len(index)} != count {count}")
    return [
        ClipFeature(
            values=mat[i].astype(np.float64),
            clip_id=rec["clip_id"],
            video_id=rec.get("video_id", ""),
            frame_span=(rec["start_frame"], rec["end_frame"]),
        )
        for i, rec in enumerate(index)
    ]


# ---------------------------------------------------------------------------
# Standardization


@dataclass
class FeatureStats:
    """Per-dimension mean/std fit on a training split. std floored at 1e-6."""

    mean: np.ndarray
    std: np.ndarray
    count: int

    def save(self, path) -> None:
        doc = {"mean": self.mean.tolist(), "std": self.std.tolist(), "count": self.count}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "FeatureStats":
        doc = json.loads(Path(path).read_text())
        return cls(mean=np.asarray(doc["mean"]), std=np.asarray(doc["std"]), count=doc["count"])


def fit_standardizer(values: np.ndarray) -> FeatureStats:
    """Population mean/std per dimension over the training split."""
    mat = np.asarray(values, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise InvalidInputError("standardizer fit needs >= 2 feature vectors")
    mean = mat.mean(axis=0)
    std = np.maximum(mat.std(axis=0), STD_FLOOR)
    return FeatureStats(mean=mean, std=std, count=mat.shape[0])


def apply_standardizer(values: np.ndarray, stats: FeatureStats) -> np.ndarray:
    mat = np.asarray(values, dtype=np.float64)
    if mat.shape[-1] != stats.mean.shape[0]:
        raise DataError(f"standardizer dim {stats.mean.shape[0]} != data dim {mat.shape[-1]}")
    return (mat - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class ClipEntry:
    clip_id: str
    start_frame: int
    end_frame: int
    feature_index: int
    condition_index: int | None = None


@dataclass
class VideoEntry:
    video_id: str
    length: int
    clips: list[ClipEntry]
    labels: list[int] | None = None  # per-frame 0/1, test manifests only


@dataclass
class DatasetManifest:
    split_tag: str
    feature_file: str
    videos: list[VideoEntry]
    condition_file: str | None = None

    def all_clips(self) -> list[tuple[VideoEntry, ClipEntry]]:
        return [(v, c) for v in self.videos for c in v.clips]


def resolve_data_path(rel, manifest_path) -> Path:
    root = os.environ.get("VAD_DATA_ROOT")
    base = Path(root) if root else Path(manifest_path).parent
    return base / rel


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "split_tag": manifest.split_tag,
        "feature_file": manifest.feature_file,
        "condition_file": manifest.condition_file,
        "videos": [
            {
                "video_id": v.video_id,
                "length": v.length,
                **({"labels": v.labels} if v.labels is not None else {}),
                "clips": [
                    {
                        "clip_id": c.clip_id,
                        "start_frame": c.start_frame,
                        "end_frame": c.end_frame,
                        "feature_index": c.feature_index,
                        **({"condition_index": c.condition_index}
                           if c.condition_index is not None else {}),
                    }
                    for c in v.clips
                ],
            }
            for v in manifest.videos
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_manifest(path, for_training: bool = False) -> DatasetManifest:
    """Parse a manifest. With for_training=True, label fields are dropped at the
    JSON level before any record object is built, so training code can never
    observe them."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read manifest: {exc}") from exc
    videos = []
    for v in doc["videos"]:
        if for_training:
            v = {k: val for k, val in v.items() if k != "labels"}
        labels = v.get("labels")
        if labels is not None:
            labels = [int(x) for x in labels]
            if len(labels) != v["length"]:
                raise DataError(f"{path}: label array length != video length for {v['video_id']}")
        clips = [
            ClipEntry(
                clip_id=c["clip_id"],
                start_frame=int(c["start_frame"]),
                end_frame=int(c["end_frame"]),
                feature_index=int(c["feature_index"]),
                condition_index=c.get("condition_index"),
            )
            for c in v["clips"]
        ]
        for c in clips:
            if c.start_frame < 0 or c.end_frame >= v["length"]:
                raise DataError(f"{path}: clip {c.clip_id} span exceeds video length")
        videos.append(VideoEntry(video_id=v["video_id"], length=int(v["length"]),
                                 clips=clips, labels=labels))
    return DatasetManifest(
        split_tag=doc.get("split_tag", "train" if for_training else "test"),
        feature_file=doc["feature_file"],
        condition_file=doc.get("condition_file"),
        videos=videos,
    )


# ---------------------------------------------------------------------------
# Batching


def align_conditions(features: list[ClipFeature],
                     conditions: list[ConditionVector]) -> np.ndarray:
    """Stack condition vectors in feature order, keyed by clip_id."""
    by_id = {c.clip_id: c.values for c in conditions}
    rows = []
    for f in features:
        if f.clip_id not in by_id:
            raise DataError(f"missing condition vector for clip {f.clip_id}")
        rows.append(by_id[f.clip_id])
    return np.stack(rows)


def build_batches(n_items: int, batch_size: int, seed: int, epoch: int = 0,
                  drop_last: bool = True) -> list[np.ndarray]:
    """Deterministic shuffled index batches; epoch e reshuffles with seed+e."""
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    rng = np.random.default_rng(seed + epoch)
    perm = rng.permutation(n_items)
    batches = [perm[i:i + batch_size] for i in range(0, n_items, batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SyntheticSpec:
    """Desk-scale generator: features near a d-dim subspace, anomalies offset
    by a fixed vector; conditions either carry the latent (informative) or are
    pure noise. Test-split sizes default to half the train counts."""

    f: int = 128
    c: int = 16
    d: int = 8
    n_normal: int = 7373
    n_anomalous: int = 819
    anomaly_offset_magnitude: float = 2.0
    observation_noise_std: float = 0.1
    condition_noise_std: float = 0.1
    condition_informative: bool = True
    seed: int = 0
    n_normal_test: int | None = None
    n_anomalous_test: int | None = None
    clips_per_video: int = 16
    frames_per_clip: int = 16
    map_perturbation: float = 0.0  # rotates the feature map; models domain shift

    def __post_init__(self):
        if min(self.f, self.c, self.d) < 1:
            raise InvalidInputError("all dims must be >= 1")
        if self.n_normal_test is None:
            self.n_normal_test = self.n_normal // 2
        if self.n_anomalous_test is None:
            self.n_anomalous_test = self.n_anomalous // 2


def _orthonormal_columns(rng, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q[:, :cols]


def synthesize_arrays(spec: SyntheticSpec):
    """Draw both splits. Returns dict with train/test feature matrices,
    condition matrices, and per-clip labels (train labels are sealed by the
    file writer; they never enter a train manifest)."""
    rng = np.random.default_rng(spec.seed)
    a_map = _orthonormal_columns(rng, spec.f, spec.d)
    b_map = rng.standard_normal((spec.c, spec.d)) / math.sqrt(spec.d)
    if spec.map_perturbation > 0.0:
        # separate stream so a shifted domain shares b_map with its source
        prng = np.random.default_rng(spec.seed + 986_131)
        a_map = a_map + spec.map_perturbation * prng.standard_normal(a_map.shape)
        a_map, _ = np.linalg.qr(a_map)

    def draw(n_norm, n_anom):
        n = n_norm + n_anom
        labels = np.concatenate([np.zeros(n_norm, dtype=int), np.ones(n_anom, dtype=int)])
        z = rng.standard_normal((n, spec.d))
        x = z @ a_map.T + spec.observation_noise_std * rng.standard_normal((n, spec.f))
        # per-clip random offset direction with fixed norm: a diffuse anomaly
        # shell the denoiser cannot memorize as a second mode
        dirs = rng.standard_normal((n_anom, spec.f))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        x[labels == 1] += spec.anomaly_offset_magnitude * dirs
        if spec.condition_informative:
            z_cond = z.copy()
            z_cond[labels == 1] = rng.standard_normal((n_anom, spec.d))
            cond = z_cond @ b_map.T
        else:
            cond = rng.standard_normal((n, spec.c))
        cond = cond + spec.condition_noise_std * rng.standard_normal((n, spec.c))
        order = rng.permutation(n)
        return x[order], cond[order], labels[order]

    x_tr, c_tr, y_tr = draw(spec.n_normal, spec.n_anomalous)
    x_te, c_te, y_te = draw(spec.n_normal_test, spec.n_anomalous_test)
    return {
        "train": {"x": x_tr, "cond": c_tr, "labels": y_tr},
        "test": {"x": x_te, "cond": c_te, "labels": y_te},
        "a_map": a_map,
        "b_map": b_map,
    }


def _build_split_files(out_dir: Path, tag: str, x, cond, labels, spec: SyntheticSpec,
                       with_labels: bool):
    fpc = spec.frames_per_clip
    features, conditions = [], []
    videos = []
    n = x.shape[0]
    cpv = spec.clips_per_video
    for v0 in range(0, n, cpv):
        vid = f"{tag}_video_{v0 // cpv:05d}"
        idxs = range(v0, min(v0 + cpv, n))
        clips, frame_labels = [], []
        for j, i in enumerate(idxs):
            cid = f"{tag}_clip_{i:06d}"
            span = (j * fpc, (j + 1) * fpc - 1)
            features.append(ClipFeature(values=x[i], clip_id=cid, video_id=vid, frame_span=span))
            conditions.append(ClipFeature(values=cond[i], clip_id=cid, video_id=vid,
                                          frame_span=span))
            clips.append(ClipEntry(clip_id=cid, start_frame=span[0], end_frame=span[1],
                                   feature_index=len(features) - 1,
                                   condition_index=len(conditions) - 1))
            frame_labels.extend([int(labels[i])] * fpc)
        videos.append(VideoEntry(video_id=vid, length=len(clips) * fpc, clips=clips,
                                 labels=frame_labels if with_labels else None))
    feat_name, cond_name = f"{tag}_features.vadf", f"{tag}_conditions.vadf"
    write_features(out_dir / feat_name, features)
    write_features(out_dir / cond_name, conditions)
    manifest = DatasetManifest(split_tag=tag, feature_file=feat_name,
                               condition_file=cond_name, videos=videos)
    save_manifest(out_dir / f"{tag}_manifest.json", manifest)
    return manifest


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write train/test manifests, VADF files, and the sealed train label
    sidecar under out_dir. Returns the output paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = synthesize_arrays(spec)
    _build_split_files(out_dir, "train", arrays["train"]["x"], arrays["train"]["cond"],
                       arrays["train"]["labels"], spec, with_labels=False)
    _build_split_files(out_dir, "test", arrays["test"]["x"], arrays["test"]["cond"],
                       arrays["test"]["labels"], spec, with_labels=True)
    sealed = [int(l) for l in arrays["train"]["labels"] for _ in range(spec.frames_per_clip)]
    (out_dir / "train_labels_sealed.json").write_text(json.dumps(sealed))
    return {
        "train_manifest": out_dir / "train_manifest.json",
        "test_manifest": out_dir / "test_manifest.json",
        "sealed_labels": out_dir / "train_labels_sealed.json",
    }


# ---------------------------------------------------------------------------
# Toy condition encoder


def motion_image_grid_stats(img: MotionImage, c: int) -> np.ndarray:
    """Raw grid statistics: per-cell per-channel mean and population std over a
    g x g partition with g = ceil(sqrt(c/6)), truncated/zero-padded to c dims."""
    if c < 6:
        raise InvalidInputError("toy encoder needs c >= 6")
    g = math.ceil(math.sqrt(c / 6))
    h, w = img.pixels.shape[:2]
    feats = []
    rows = np.linspace(0, h, g + 1).astype(int)
    cols = np.linspace(0, w, g + 1).astype(int)
    for i in range(g):
        for j in range(g):
            cell = img.pixels[rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            if cell.size == 0:
                feats.extend([0.0] * 6)
                continue
            feats.extend(cell.mean(axis=(0, 1)).tolist())
            feats.extend(cell.std(axis=(0, 1)).tolist())
    vec = np.asarray(feats, dtype=np.float64)
    if vec.shape[0] >= c:
        return vec[:c]
    return np.concatenate([vec, np.zeros(c - vec.shape[0])])


def toy_condition_encoder(img: MotionImage, c: int, stats: FeatureStats | None = None,
                          clip_id: str | None = None) -> ConditionVector:
    """Deterministic stand-in condition encoder: grid statistics scaled to
    zero-mean unit-variance using constants fit on the training corpus."""
    vec = motion_image_grid_stats(img, c)
    if stats is not None:
        vec = apply_standardizer(vec[None, :], stats)[0]
    return ConditionVector(values=vec, clip_id=clip_id or img.source_clip_id)
