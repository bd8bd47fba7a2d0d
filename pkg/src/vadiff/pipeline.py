"""End-to-end runs: training, scoring, evaluation, cross-dataset evaluation,
hyperparameter sweeps, and motion-image extraction."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import clipio, config as cfgmod, diffusion, motion, scoring
from .data import (
    DatasetManifest,
    FeatureStats,
    apply_standardizer,
    build_batches,
    fit_standardizer,
    load_manifest,
    read_features,
    resolve_data_path,
)
from .errors import ConfigError, DataError, NumericError
from .net import (
    AdamOptimizer,
    DenoiserNet,
    NetConfig,
    OptimizerConfig,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("vadiff")


# ---------------------------------------------------------------------------
# Stream loading


def load_streams(manifest_path, cfg: dict, for_training: bool) -> dict:
    """Load feature (and condition) matrices in manifest clip order.

    With role_swap the two streams trade places: the motion/condition stream
    becomes the diffusion input and the spatiotemporal features become the
    condition.
    """
    manifest = load_manifest(manifest_path, for_training=for_training)
    features = read_features(resolve_data_path(manifest.feature_file, manifest_path))
    clips = manifest.all_clips()
    x = np.stack([features[c.feature_index].values for _, c in clips])
    cond = None
    if cfgmod.conditioned(cfg):
        if manifest.condition_file is None:
            raise DataError(f"{manifest_path}: conditioning enabled but manifest has "
                            "no condition file")
        conditions = read_features(resolve_data_path(manifest.condition_file, manifest_path))
        for _, c in clips:
            if c.condition_index is None:
                raise DataError(f"missing condition stream for clip {c.clip_id}")
        cond = np.stack([conditions[c.condition_index].values for _, c in clips])
    if cfg["model.role_swap"]:
        if cond is None:
            raise DataError("role_swap requires both feature streams")
        x, cond = cond, x
    return {"x": x, "cond": cond, "clips": clips, "manifest": manifest}


def _stats_paths(checkpoint_path):
    p = Path(checkpoint_path)
    return p.with_suffix(p.suffix + ".stats.json"), p.with_suffix(p.suffix + ".cond_stats.json")


# ---------------------------------------------------------------------------
# Training


def train(cfg: dict, out_dir) -> Path:
    """Train the denoiser on the (label-stripped) train manifest; writes the
    checkpoint, standardization stats, and a per-epoch training log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = load_streams(cfg["data.train_manifest"], cfg, for_training=True)
    x, cond = streams["x"], streams["cond"]

    stats = fit_standardizer(x)
    x = apply_standardizer(x, stats)
    cond_stats = None
    if cond is not None:
        cond_stats = fit_standardizer(cond)
        cond = apply_standardizer(cond, cond_stats)

    net_cfg = NetConfig(
        f=x.shape[1],
        c=cond.shape[1] if cond is not None else int(cfg["model.condition_dim"]),
        emb_dim=int(cfg["model.emb_dim"]),
        enc_widths=cfgmod.widths(cfg),
        freq_std=float(cfg["model.freq_std"]),
        seed=int(cfg["train.seed"]),
    )
    net = DenoiserNet(net_cfg)
    opt = AdamOptimizer(net, OptimizerConfig(
        lr=float(cfg["train.lr"]),
        weight_decay=float(cfg["train.weight_decay"]),
        inv_gamma=float(cfg["train.inv_gamma"]),
        power=float(cfg["train.power"]),
        ema_decay=float(cfg["train.ema_decay"]),
    ))
    noise = diffusion.NoiseParams(p_mean=float(cfg["noise.p_mean"]),
                                  p_std=float(cfg["noise.p_std"]),
                                  sigma_data=float(cfg["noise.sigma_data"]))
    rng = np.random.default_rng(int(cfg["train.seed"]) + 1)
    epochs = int(cfg["train.epochs"])
    batch_size = int(cfg["train.batch_size"])
    epoch_log = []
    for epoch in range(epochs):
        batches = build_batches(x.shape[0], batch_size, seed=int(cfg["train.seed"]),
                                epoch=epoch, drop_last=True)
        losses = []
        for bi, idx in enumerate(batches):
            sig = diffusion.sample_training_sigma(noise, rng, size=len(idx))
            eps = rng.standard_normal((len(idx), x.shape[1]))
            loss, grads = diffusion.training_loss_and_grads(
                net, x[idx], cond[idx] if cond is not None else None,
                sig, eps, sigma_data=noise.sigma_data)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {bi} "
                    f"(sigma range [{sig.min():.3g}, {sig.max():.3g}])")
            opt.step(grads)
            losses.append(loss)
        epoch_log.append({"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else None,
                          "lr": opt.current_lr()})
        log.info("epoch %d mean_loss %.6f lr %.3g", epoch,
                 epoch_log[-1]["mean_loss"] or float("nan"), opt.current_lr())

    ckpt_path = out_dir / "checkpoint.vadw"
    save_checkpoint(ckpt_path, net, ema=opt.ema, step=opt.step_count,
                    use_ema=bool(cfg["score.use_ema"]),
                    extra={"train_fingerprint": cfgmod.train_fingerprint(cfg),
                           "conditioned": cond is not None})
    stats_path, cond_stats_path = _stats_paths(ckpt_path)
    stats.save(stats_path)
    if cond_stats is not None:
        cond_stats.save(cond_stats_path)
    (out_dir / "training_log.json").write_text(json.dumps(epoch_log))
    return ckpt_path


# ---------------------------------------------------------------------------
# Scoring


def _clip_noise(seed: int, indices, dim: int) -> np.ndarray:
    """Per-clip noise from counter-split rng streams, independent of batching."""
    return np.stack([np.random.default_rng([seed, int(i)]).standard_normal(dim)
                     for i in indices])


def score(checkpoint_path, manifest_path, cfg: dict, out_csv,
          stats_path=None, cond_stats_path=None) -> list[scoring.ScoreRecord]:
    """Reconstruct every clip at the configured start index and emit per-clip
    MSE plus batch-threshold labels as a score CSV."""
    net, ema, header = load_checkpoint(checkpoint_path)
    if bool(cfg["score.use_ema"]):
        net.params = ema
    streams = load_streams(manifest_path, cfg, for_training=False)
    x, cond, clips = streams["x"], streams["cond"], streams["clips"]

    default_stats, default_cond_stats = _stats_paths(checkpoint_path)
    stats_path = Path(stats_path) if stats_path else default_stats
    if not stats_path.exists():
        raise DataError(f"standardization stats not found at {stats_path}; "
                        "refusing to re-fit on the evaluation set")
    stats = FeatureStats.load(stats_path)
    if stats.mean.shape[0] != x.shape[1]:
        raise DataError(f"cross-domain dim mismatch: stats dim {stats.mean.shape[0]} "
                        f"vs feature dim {x.shape[1]}")
    if net.config.f != x.shape[1]:
        raise DataError(f"checkpoint f={net.config.f} but features have dim {x.shape[1]}")
    x = apply_standardizer(x, stats)
    if cond is not None:
        cond_stats_path = Path(cond_stats_path) if cond_stats_path else default_cond_stats
        if not cond_stats_path.exists():
            raise DataError(f"condition stats not found at {cond_stats_path}")
        cond = apply_standardizer(cond, FeatureStats.load(cond_stats_path))
        if net.config.c != cond.shape[1]:
            raise DataError(f"checkpoint c={net.config.c} but conditions have dim {cond.shape[1]}")

    schedule = diffusion.karras_schedule(
        sigma_min=float(cfg["schedule.sigma_min"]), sigma_max=float(cfg["schedule.sigma_max"]),
        T=int(cfg["schedule.steps"]), rho=float(cfg["schedule.rho"]))
    sampler = diffusion.SamplerConfig(start_index=cfgmod.effective_start_t(cfg),
                                      lms_order=int(cfg["sampler.lms_order"]))
    sigma_data = float(cfg["noise.sigma_data"])
    sigma_t = float(schedule.sigmas[sampler.start_index])
    seed = int(cfg["score.seed"])

    n = x.shape[0]
    mses = np.empty(n)
    chunk = 1024
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        z = _clip_noise(seed, range(lo, hi), x.shape[1])
        x_t = x[lo:hi] + sigma_t * z
        if bool(cfg["score.oracle_identity"]):
            denoise_fn = lambda v, s: v
        else:
            denoise_fn = diffusion.make_denoise_fn(
                net, cond=cond[lo:hi] if cond is not None else None, sigma_data=sigma_data)
        x_rec = diffusion.lms_sample(denoise_fn, x_t, schedule, sampler)
        mses[lo:hi] = scoring.batch_reconstruction_errors(x[lo:hi], x_rec)

    # thresholding over evaluation batches, sequential by manifest order
    order = np.arange(n)
    if bool(cfg["score.shuffle"]):
        order = np.random.default_rng(seed).permutation(n)
    preds = np.zeros(n, dtype=int)
    eval_batch = int(cfg["eval.batch"])
    k = float(cfg["threshold.k"])
    for lo in range(0, n, eval_batch):
        idx = order[lo:lo + eval_batch]
        l_th = scoring.batch_threshold(mses[idx], k)
        preds[idx] = scoring.classify(mses[idx], l_th)

    records = []
    for i, (video, clip) in enumerate(clips):
        label_true = None
        if video.labels is not None:
            label_true = int(max(video.labels[clip.start_frame:clip.end_frame + 1]))
        records.append(scoring.ScoreRecord(
            clip_id=clip.clip_id, video_id=video.video_id,
            frame_span=(clip.start_frame, clip.end_frame),
            mse=float(mses[i]), label_pred=int(preds[i]), label_true=label_true))
    scoring.write_score_csv(out_csv, records)
    return records


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(score_csv, manifest_path, cfg: dict, out_json=None,
             roc_csv=None) -> dict:
    """Frame-level ROC-AUC plus summary statistics from a score CSV."""
    t0 = time.time()
    records = scoring.read_score_csv(score_csv)
    manifest = load_manifest(manifest_path, for_training=False)
    lengths = {v.video_id: v.length for v in manifest.videos}
    labels_by_video = {v.video_id: v.labels for v in manifest.videos}
    if any(l is None for l in labels_by_video.values()):
        raise DataError(f"{manifest_path}: evaluation needs frame labels for every video")

    mses = np.array([r.mse for r in records])
    if bool(cfg["score.normalize_per_batch"]):
        eval_batch = int(cfg["eval.batch"])
        for lo in range(0, len(mses), eval_batch):
            seg = mses[lo:lo + eval_batch]
            mses[lo:lo + eval_batch] = (seg - seg.mean()) / max(seg.std(), 1e-12)
        records = [scoring.ScoreRecord(r.clip_id, r.video_id, r.frame_span, float(m - mses.min()),
                                       r.label_pred, r.label_true)
                   for r, m in zip(records, mses)]

    per_video = scoring.frame_scores(records, lengths)
    frame_scores_flat, frame_labels_flat = [], []
    per_video_auc = {}
    for vid, arr in per_video.items():
        lab = np.asarray(labels_by_video[vid], dtype=int)
        frame_scores_flat.append(arr)
        frame_labels_flat.append(lab)
        if 0 < lab.sum() < len(lab):
            per_video_auc[vid] = scoring.roc_auc(arr, lab)
    all_scores = np.concatenate(frame_scores_flat)
    all_labels = np.concatenate(frame_labels_flat)
    auc = scoring.roc_auc(all_scores, all_labels)

    k = float(cfg["threshold.k"])
    mu_p, sigma_p = float(mses.mean()), float(mses.std())
    report = {
        "report_version": 1,
        "frame_auc": auc,
        "per_video_auc": per_video_auc,
        "n_frames": int(all_labels.size),
        "n_clips": len(records),
        "mean_mse_by_class": {
            "normal": float(np.mean([r.mse for r in records if r.label_true == 0]))
            if any(r.label_true == 0 for r in records) else None,
            "anomalous": float(np.mean([r.mse for r in records if r.label_true == 1]))
            if any(r.label_true == 1 for r in records) else None,
        },
        "threshold": {"k": k, "mu_p": mu_p, "sigma_p": sigma_p,
                      "l_th": mu_p + k * sigma_p,
                      "flagged_fraction": float(np.mean([r.label_pred or 0 for r in records]))},
        "config_fingerprint": cfgmod.fingerprint(cfg),
        "wall_clock_s": time.time() - t0,
    }
    if out_json:
        Path(out_json).write_text(json.dumps(report, indent=1, sort_keys=True))
    if roc_csv:
        _write_roc_curve(roc_csv, all_scores, all_labels)
    return report


def _write_roc_curve(path, scores, labels) -> None:
    order = np.argsort(-scores, kind="stable")
    lab = np.asarray(labels)[order]
    n_pos, n_neg = lab.sum(), len(lab) - lab.sum()
    tp = np.concatenate([[0], np.cumsum(lab)])
    fp = np.concatenate([[0], np.cumsum(1 - lab)])
    with open(path, "w") as fh:
        fh.write("fpr,tpr\n")
        for f, t in zip(fp / max(n_neg, 1), tp / max(n_pos, 1)):
            fh.write(f"{f},{t}\n")


# ---------------------------------------------------------------------------
# Cross-dataset evaluation


def cross_eval(checkpoint_path, stats_path, test_manifest, cfg: dict, out_dir) -> dict:
    """Score dataset B with a model (and standardization stats) trained on A."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "cross_scores.csv"
    cond_stats = Path(stats_path).with_name(Path(stats_path).name.replace(
        ".stats.json", ".cond_stats.json"))
    score(checkpoint_path, test_manifest, cfg, csv_path, stats_path=stats_path,
          cond_stats_path=cond_stats if cond_stats.exists() else None)
    return evaluate(csv_path, test_manifest, cfg, out_json=out_dir / "cross_report.json")


# ---------------------------------------------------------------------------
# Sweeps


def sweep(cfg: dict, p_means, p_stds, start_ts, out_dir, cache_dir=None) -> list[dict]:
    """Grid over training noise and start index. Training cells are cached by
    their training-config hash; start_t cells reuse checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir) if cache_dir else out_dir / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for p_mean in p_means:
        for p_std in p_stds:
            cell_cfg = dict(cfg)
            cell_cfg["noise.p_mean"] = float(p_mean)
            cell_cfg["noise.p_std"] = float(p_std)
            tfp = cfgmod.train_fingerprint(cell_cfg)
            ckpt_dir = cache_dir / tfp
            ckpt = ckpt_dir / "checkpoint.vadw"
            if not ckpt.exists():
                train(cell_cfg, ckpt_dir)
            for t in start_ts:
                run_cfg = dict(cell_cfg)
                run_cfg["sampler.start_t"] = int(t)
                csv_path = out_dir / f"scores_{tfp}_t{t}.csv"
                score(ckpt, run_cfg["data.test_manifest"], run_cfg, csv_path)
                report = evaluate(csv_path, run_cfg["data.test_manifest"], run_cfg)
                rows.append({"p_mean": float(p_mean), "p_std": float(p_std),
                             "start_t": int(t), "auc": report["frame_auc"]})
    with open(out_dir / "sweep.csv", "w") as fh:
        fh.write("p_mean,p_std,start_t,auc\n")
        for r in rows:
            fh.write(f"{r['p_mean']},{r['p_std']},{r['start_t']},{r['auc']}\n")
    return rows


# ---------------------------------------------------------------------------
# Motion extraction


def extract_motion(frames_root, kind: str, out_root, window: int = 16) -> int:
    """One motion image per non-overlapping window of frames per video
    directory; emits a normalized PPM and the raw f32 image for each clip."""
    if kind not in ("star", "dynamic"):
        raise ConfigError(f"unknown motion kind {kind!r}")
    frames_root, out_root = Path(frames_root), Path(out_root)
    count = 0
    for video_dir in sorted(p for p in frames_root.iterdir() if p.is_dir()):
        files = sorted(video_dir.glob("*.ppm"))
        if len(files) < window:
            log.warning("%s: only %d frames (< %d), skipped", video_dir.name,
                        len(files), window)
            continue
        dest = out_root / video_dir.name
        dest.mkdir(parents=True, exist_ok=True)
        for w, lo in enumerate(range(0, len(files) - window + 1, window)):
            frames = np.stack([clipio.read_ppm(f) for f in files[lo:lo + window]])
            clip = motion.FrameClip(frames=frames, clip_id=f"{video_dir.name}/clip_{w:06d}")
            img = (motion.compute_star_image(clip) if kind == "star"
                   else motion.compute_dynamic_image(clip))
            clipio.write_motion_image(dest / f"clip_{w:06d}.vadm", img)
            clipio.write_ppm(dest / f"clip_{w:06d}.ppm",
                             motion.normalize_motion_image(img).pixels)
            count += 1
    return count
