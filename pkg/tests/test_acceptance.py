"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The detection criteria train
six full models (unconditional and conditioned, three seeds); expect roughly
ten minutes on a laptop CPU.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as sps

from vadiff import config as cfgmod
from vadiff import diffusion, pipeline, scoring
from vadiff.data import (
    ClipEntry,
    ClipFeature,
    DatasetManifest,
    FeatureStats,
    SyntheticSpec,
    VideoEntry,
    apply_standardizer,
    generate_synthetic,
    save_manifest,
    write_features,
)
from vadiff.motion import FrameClip, compute_dynamic_image, compute_star_image
from vadiff.net import DenoiserNet, NetConfig, load_checkpoint

SEEDS = (0, 1, 2)
SHIFT = 0.05
BENCH_KW = dict(f=128, c=16, d=8, n_normal=7373, n_anomalous=819,
                n_normal_test=3686, n_anomalous_test=410,
                anomaly_offset_magnitude=2.0, condition_informative=True)


def report(cid, desc, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE [{cid:>2}] {desc}: {status}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {cid} failed: {desc} {detail}"


# ---------------------------------------------------------------------------
# Shared trained models for the detection criteria


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    out = {}
    for seed in SEEDS:
        paths = generate_synthetic(SyntheticSpec(seed=seed, **BENCH_KW),
                                   root / f"A{seed}")
        paths_b = generate_synthetic(
            SyntheticSpec(seed=seed, map_perturbation=SHIFT, **BENCH_KW),
            root / f"B{seed}")
        entry = {"paths": paths, "paths_b": paths_b}
        for tag, src in (("uncond", "none"), ("cond", "external")):
            cfg = cfgmod.build_config(overrides={
                "data.train_manifest": str(paths["train_manifest"]),
                "data.test_manifest": str(paths["test_manifest"]),
                "model.condition_source": src,
                "train.seed": str(seed),
            })
            run = root / f"{tag}{seed}"
            ckpt = pipeline.train(cfg, run)
            csv = run / "scores.csv"
            pipeline.score(ckpt, cfg["data.test_manifest"], cfg, csv)
            rep = pipeline.evaluate(csv, cfg["data.test_manifest"], cfg)
            # cross-domain protocol: both models scored at the same start
            # index so the comparison isolates the condition stream
            cross_cfg = dict(cfg)
            cross_cfg["sampler.start_t"] = 6
            cross = pipeline.cross_eval(ckpt, str(ckpt) + ".stats.json",
                                        paths_b["test_manifest"], cross_cfg,
                                        run / "cross")
            entry[tag] = {"cfg": cfg, "ckpt": ckpt, "csv": csv,
                          "auc": rep["frame_auc"],
                          "cross_auc": cross["frame_auc"]}
        out[seed] = entry
    return out


# ---------------------------------------------------------------------------
# 1. EDM identities


def test_criterion_01_edm_identities():
    t0 = time.time()
    sig = np.logspace(-4, 4, 1000)
    worst = 0.0
    for sd in (0.5, 1.0, 2.0):
        co = diffusion.precondition_coeffs(sig, sd)
        var = sig ** 2 + sd ** 2
        worst = max(worst,
                    np.max(np.abs(co.c_in ** 2 * var - 1.0)),
                    np.max(np.abs(co.c_skip * var - sd ** 2)),
                    np.max(np.abs(co.c_out ** 2 - sig ** 2 * sd ** 2 / var)))
    elapsed = time.time() - t0
    report(1, "EDM precondition identities to 1e-12 over 10^3 sigmas",
           worst < 1e-12 and elapsed < 1.0,
           f"worst={worst:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. Gradient correctness


def test_criterion_02_gradient_check():
    t0 = time.time()
    rng = np.random.default_rng(0)
    net = DenoiserNet(NetConfig(f=8, c=4, emb_dim=8, enc_widths=(8, 6), seed=0),
                      dtype=np.float64)
    for k in net.params:
        net.params[k] = rng.normal(0, 0.3, size=net.params[k].shape)
    x0 = rng.normal(size=(4, 8))
    cond = rng.normal(size=(4, 4))
    sig = rng.uniform(0.2, 2.0, 4)
    eps = rng.normal(size=(4, 8))
    _, grads = diffusion.training_loss_and_grads(net, x0, cond, sig, eps)

    def total_loss():
        return float(np.mean(diffusion.training_loss(net, x0, cond, sig, eps)))

    h = 1e-4
    worst = 0.0
    for k in net.params:
        flat = net.params[k].reshape(-1)
        idxs = range(len(flat)) if len(flat) <= 64 else \
            rng.choice(len(flat), 64, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = total_loss()
            flat[i] = orig - h
            dn = total_loss()
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            an = grads[k].reshape(-1)[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    elapsed = time.time() - t0
    report(2, "analytic gradients vs central differences < 1e-4",
           worst < 1e-4 and elapsed < 10.0,
           f"max_rel_err={worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. Sampler oracle


def test_criterion_03_sampler_oracle():
    t0 = time.time()
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(4, 6))
    sch = diffusion.karras_schedule()
    worst = 0.0
    for t in range(10):
        got = diffusion.reconstruct(lambda x, s: x0, x0, sch,
                                    diffusion.SamplerConfig(start_index=t),
                                    np.random.default_rng(t))
        worst = max(worst, float(np.max(np.abs(got - x0))))
    # order-1 LMS must reduce to the explicit Euler update
    net = DenoiserNet(NetConfig(f=6, c=4, emb_dim=8, enc_widths=(8, 6), seed=1),
                      dtype=np.float64)
    fn = diffusion.make_denoise_fn(net)
    x = rng.normal(size=(2, 6))
    lms = diffusion.lms_sample(fn, x, sch, diffusion.SamplerConfig(0, lms_order=1))
    xe = np.array(x)
    for i in range(10):
        d = (xe - fn(xe, sch.sigmas[i])) / sch.sigmas[i]
        xe = xe + (sch.sigmas[i + 1] - sch.sigmas[i]) * d
    euler_gap = float(np.max(np.abs(lms - xe)))
    elapsed = time.time() - t0
    report(3, "oracle denoiser recovers x0 to 1e-6 from every start; order-1 = Euler",
           worst < 1e-6 and euler_gap < 1e-9 and elapsed < 5.0,
           f"oracle_err={worst:.2e}, euler_gap={euler_gap:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. Motion-representation oracles


def _dyn_oracle(frames):
    n = frames.shape[0]
    out = np.zeros(frames.shape[1:])
    for k in range(1, n + 1):
        out += (2 * k - n - 1) * frames[k - 1]
    return out


def _star_oracle(frames):
    n, h, w, _ = frames.shape
    base = n // 3
    bounds = [(0, base), (base, 2 * base), (2 * base, n)]
    out = np.zeros((h, w, 3))
    for ch, (lo, hi) in enumerate(bounds):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for k in range(lo + 1, hi):
                    a, b = frames[k - 1, i, j], frames[k, i, j]
                    na, nb = np.linalg.norm(a), np.linalg.norm(b)
                    lam = 0.0 if na == 0 or nb == 0 else float(a @ b) / (na * nb)
                    acc += (1 - lam / 2) * abs(nb - na)
                out[i, j, ch] = acc
    return out


def test_criterion_04_motion_oracles():
    t0 = time.time()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10):
        clip = FrameClip(frames=rng.uniform(0, 255, (16, 8, 8, 3)))
        dyn = compute_dynamic_image(clip).pixels
        star = compute_star_image(clip).pixels
        dw, sw = _dyn_oracle(clip.frames), _star_oracle(clip.frames)
        worst = max(worst,
                    float(np.max(np.abs(dyn - dw) / (np.abs(dw) + 1e-9))),
                    float(np.max(np.abs(star - sw) / (np.abs(sw) + 1e-9))))
    const = FrameClip(frames=np.full((16, 4, 4, 3), 120.0))
    zeros_ok = (np.all(compute_dynamic_image(const).pixels == 0.0)
                and np.all(compute_star_image(const).pixels == 0.0))
    elapsed = time.time() - t0
    report(4, "motion images match scalar-loop oracles to 1e-5; constant clip -> 0",
           worst < 1e-5 and zeros_ok and elapsed < 5.0,
           f"worst_rel={worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. Noise distribution


def test_criterion_05_noise_distribution():
    t0 = time.time()
    rng = np.random.default_rng(3)
    sig = diffusion.sample_training_sigma(diffusion.NoiseParams(), rng, size=100_000)
    ks = sps.kstest(np.log(sig), "norm", args=(-1.2, 1.2)).statistic
    elapsed = time.time() - t0
    report(5, "ln(sigma) matches N(-1.2, 1.2^2), KS < 0.01",
           ks < 0.01 and elapsed < 5.0, f"ks={ks:.4f}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 6. Unconditional detection on the synthetic benchmark


def test_criterion_06_unconditional_detection(bench, tmp_path):
    entry = bench[0]["uncond"]
    auc = entry["auc"]
    # permuted-clip-score control: break the score/label pairing
    records = scoring.read_score_csv(entry["csv"])
    mses = np.array([r.mse for r in records])
    perm = np.random.default_rng(123).permutation(len(mses))
    shuffled = [scoring.ScoreRecord(r.clip_id, r.video_id, r.frame_span,
                                    float(mses[perm[i]]), r.label_pred, r.label_true)
                for i, r in enumerate(records)]
    shuf_csv = tmp_path / "shuffled.csv"
    scoring.write_score_csv(shuf_csv, shuffled)
    cfg = entry["cfg"]
    control = pipeline.evaluate(shuf_csv, cfg["data.test_manifest"], cfg)["frame_auc"]
    report(6, "unconditional synthetic AUC >= 0.85 with 0.5 +/- 0.05 control",
           auc >= 0.85 and abs(control - 0.5) <= 0.05,
           f"auc={auc:.4f}, control={control:.4f}")


# ---------------------------------------------------------------------------
# 7. Conditioning benefit


def test_criterion_07_conditioning_benefit(bench):
    margins = [bench[s]["cond"]["auc"] - bench[s]["uncond"]["auc"] for s in SEEDS]
    med = float(np.median(margins))
    report(7, "conditioned beats unconditional by >= 0.02 (median of 3 seeds)",
           med >= 0.02,
           "margins=" + ",".join(f"{m:.4f}" for m in margins) + f", median={med:.4f}")


# ---------------------------------------------------------------------------
# 8. Start-index monotonicity


def test_criterion_08_start_t_monotonicity(bench):
    entry = bench[0]["uncond"]
    net, ema, header = load_checkpoint(entry["ckpt"])
    net.params = ema
    cfg = entry["cfg"]
    streams = pipeline.load_streams(cfg["data.test_manifest"], cfg, for_training=False)
    stats = FeatureStats.load(str(entry["ckpt"]) + ".stats.json")
    x = apply_standardizer(streams["x"], stats)[:1024]
    sch = diffusion.karras_schedule()
    fn = diffusion.make_denoise_fn(net)
    ts = list(range(1, 10))
    means = []
    for t in ts:
        z = np.stack([np.random.default_rng([0, i]).standard_normal(x.shape[1])
                      for i in range(x.shape[0])])
        x_t = x + float(sch.sigmas[t]) * z
        x_rec = diffusion.lms_sample(fn, x_t, sch, diffusion.SamplerConfig(start_index=t))
        means.append(float(np.mean((x_rec - x) ** 2)))
    rho = sps.spearmanr([10 - t for t in ts], means).statistic
    report(8, "mean MSE rises as start index falls, Spearman >= 0.9",
           rho >= 0.9, f"rho={rho:.3f}, means={['%.3g' % m for m in means]}")


# ---------------------------------------------------------------------------
# 9. Cross-domain robustness


def test_criterion_09_cross_domain(bench):
    margins = [bench[s]["cond"]["cross_auc"] - bench[s]["uncond"]["cross_auc"]
               for s in SEEDS]
    med = float(np.median(margins))
    detail = ("cond=" + ",".join(f"{bench[s]['cond']['cross_auc']:.4f}" for s in SEEDS)
              + " uncond=" + ",".join(f"{bench[s]['uncond']['cross_auc']:.4f}"
                                      for s in SEEDS))
    report(9, "conditioned >= unconditional on the shifted domain (median of 3 seeds)",
           med >= 0.0, detail + f", median_margin={med:.4f}")


# ---------------------------------------------------------------------------
# 10. Threshold arithmetic


def test_criterion_10_threshold_arithmetic():
    ok = (scoring.batch_threshold([0.0, 2.0], k=0.0) == 1.0
          and scoring.batch_threshold([3.5, 3.5, 3.5], k=9.0) == 3.5
          and scoring.batch_threshold([1.0, 2.0, 3.0, 4.0], k=1.0) == 2.5 + np.sqrt(1.25)
          and scoring.classify([1.0, 1.0], l_th=1.0) == [0, 0]
          and scoring.classify([0.0, 2.0], l_th=1.0) == [0, 1])
    report(10, "batch threshold and classify match hand-computed cases exactly", ok)


# ---------------------------------------------------------------------------
# 11. AUC oracle


def test_criterion_11_auc_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = 60
        scores = np.round(rng.normal(size=n), 1)
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        pos = scores[labels == 1][:, None]
        neg = scores[labels == 0][None, :]
        oracle = float(np.mean((pos > neg) + 0.5 * (pos == neg)))
        worst = max(worst, abs(scoring.roc_auc(scores, labels) - oracle))
    report(11, "rank AUC equals O(n^2) pair oracle to 1e-12 on 100 instances",
           worst < 1e-12, f"worst={worst:.2e}")


# ---------------------------------------------------------------------------
# 12. Documented real-data path


def test_criterion_12_real_data_path(tmp_path):
    readme = Path(__file__).resolve().parents[1] / "README.md"
    documented = readme.exists() and "## Using real datasets" in readme.read_text()

    # exercise the documented flow end to end with stand-in "real" features:
    # user-supplied VADF files plus a hand-written manifest
    rng = np.random.default_rng(5)
    f, c, n = 24, 8, 64
    feats, conds, videos = [], [], []
    for v in range(4):
        clips = []
        labels = []
        for j in range(16):
            i = v * 16 + j
            cid = f"vid{v}_clip{j}"
            span = (j * 16, j * 16 + 15)
            anomalous = int(i % 11 == 0)
            vec = rng.normal(size=f) + 3.0 * anomalous
            feats.append(ClipFeature(values=vec, clip_id=cid, video_id=f"vid{v}",
                                     frame_span=span))
            conds.append(ClipFeature(values=rng.normal(size=c), clip_id=cid,
                                     video_id=f"vid{v}", frame_span=span))
            clips.append(ClipEntry(clip_id=cid, start_frame=span[0], end_frame=span[1],
                                   feature_index=i, condition_index=i))
            labels.extend([anomalous] * 16)
        videos.append(VideoEntry(video_id=f"vid{v}", length=256, clips=clips,
                                 labels=labels))
    write_features(tmp_path / "features.vadf", feats)
    write_features(tmp_path / "conditions.vadf", conds)
    save_manifest(tmp_path / "manifest.json",
                  DatasetManifest(split_tag="test", feature_file="features.vadf",
                                  condition_file="conditions.vadf", videos=videos))
    cfg = cfgmod.build_config(overrides={
        "data.train_manifest": str(tmp_path / "manifest.json"),
        "data.test_manifest": str(tmp_path / "manifest.json"),
        "model.condition_source": "external",
        "model.widths": "32,16", "model.emb_dim": "16",
        "train.epochs": "1", "train.batch_size": "16",
    })
    ckpt = pipeline.train(cfg, tmp_path / "run")
    pipeline.score(ckpt, cfg["data.test_manifest"], cfg, tmp_path / "s.csv")
    rep = pipeline.evaluate(tmp_path / "s.csv", cfg["data.test_manifest"], cfg,
                            out_json=tmp_path / "r.json")
    # the path is documented and runs; no numeric tolerance asserted
    report(12, "user-supplied feature files run the full pipeline (documented)",
           documented and 0.0 <= rep["frame_auc"] <= 1.0,
           f"auc={rep['frame_auc']:.3f} (not gated)")
