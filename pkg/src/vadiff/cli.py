"""Command-line entry point.

Subcommands: extract-motion, gen-synth, train, score, eval, sweep,
cross-eval, report. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import pipeline
from .data import SyntheticSpec, generate_synthetic
from .errors import ConfigError, DataError, FormatError, InvalidInputError, NumericError


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")


def _load_cfg(args) -> dict:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    return cfgmod.build_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vadiff",
                                     description="Diffusion-based unsupervised video "
                                                 "anomaly detection toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-motion", help="compute motion images from PPM frame dirs")
    p.add_argument("frames_root")
    p.add_argument("out_root")
    p.add_argument("--kind", choices=["star", "dynamic"], required=True)
    p.add_argument("--window", type=int, default=16)

    p = sub.add_parser("gen-synth", help="generate the synthetic benchmark")
    p.add_argument("out_dir")
    for name, typ, default in [
        ("f", int, 128), ("c", int, 16), ("d", int, 8),
        ("n-normal", int, 7373), ("n-anomalous", int, 819),
        ("anomaly-offset", float, 2.0), ("obs-noise", float, 0.1),
        ("cond-noise", float, 0.1), ("seed", int, 0),
        ("map-perturbation", float, 0.0),
    ]:
        p.add_argument(f"--{name}", type=typ, default=default)
    p.add_argument("--condition-informative", action="store_true", default=True)
    p.add_argument("--condition-uninformative", dest="condition_informative",
                   action="store_false")

    p = sub.add_parser("train", help="train the denoiser on a train manifest")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory for the checkpoint")

    p = sub.add_parser("score", help="reconstruct and score clips of a manifest")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output score CSV")

    p = sub.add_parser("eval", help="frame-level AUC report from a score CSV")
    _add_config_args(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--roc-csv", help="also dump the ROC curve data table")

    p = sub.add_parser("sweep", help="grid over (p_mean, p_std, start_t)")
    _add_config_args(p)
    p.add_argument("--p-mean", required=True, help="comma-separated list")
    p.add_argument("--p-std", required=True, help="comma-separated list")
    p.add_argument("--start-t", required=True, help="comma-separated list")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("cross-eval", help="evaluate a checkpoint on a foreign test set")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", required=True, help="training-domain standardization stats")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("report", help="render plots and a summary from run outputs")
    p.add_argument("--eval-json", help="report JSON from the eval command")
    p.add_argument("--roc-csv", help="ROC curve data table")
    p.add_argument("--sweep-csv", help="sweep table from the sweep command")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _cmd_report(args) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Run report", ""]
    if args.eval_json:
        report = json.loads(Path(args.eval_json).read_text())
        lines += [f"- frame AUC: {report['frame_auc']:.4f}",
                  f"- clips: {report['n_clips']}, frames: {report['n_frames']}",
                  f"- threshold: {json.dumps(report['threshold'])}",
                  f"- fingerprint: {report['config_fingerprint']}"]
    if args.roc_csv:
        import csv as _csv
        with open(args.roc_csv) as fh:
            rows = list(_csv.DictReader(fh))
        fpr = [float(r["fpr"]) for r in rows]
        tpr = [float(r["tpr"]) for r in rows]
        fig, ax = plt.subplots()
        ax.plot(fpr, tpr)
        ax.plot([0, 1], [0, 1], "k--", lw=0.5)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        fig.savefig(out / "roc.png", dpi=120)
        plt.close(fig)
        lines.append("- ROC curve: roc.png")
    if args.sweep_csv:
        import csv as _csv
        with open(args.sweep_csv) as fh:
            rows = list(_csv.DictReader(fh))
        fig, ax = plt.subplots()
        ts = sorted({int(r["start_t"]) for r in rows})
        for key in sorted({(r["p_mean"], r["p_std"]) for r in rows}):
            ys = [float(r["auc"]) for r in rows
                  if (r["p_mean"], r["p_std"]) == key and int(r["start_t"]) in ts]
            xs = [int(r["start_t"]) for r in rows if (r["p_mean"], r["p_std"]) == key]
            ax.plot(xs, ys, marker="o", label=f"p_mean={key[0]}, p_std={key[1]}")
        ax.set_xlabel("start index t")
        ax.set_ylabel("frame AUC")
        ax.legend(fontsize=7)
        fig.savefig(out / "sweep.png", dpi=120)
        plt.close(fig)
        lines.append("- sweep plot: sweep.png")
    (out / "summary.md").write_text("\n".join(lines) + "\n")


def run(args) -> None:
    if args.command == "extract-motion":
        n = pipeline.extract_motion(args.frames_root, args.kind, args.out_root,
                                    window=args.window)
        print(f"wrote {n} motion images")
    elif args.command == "gen-synth":
        spec = SyntheticSpec(
            f=args.f, c=args.c, d=args.d,
            n_normal=args.n_normal, n_anomalous=args.n_anomalous,
            anomaly_offset_magnitude=args.anomaly_offset,
            observation_noise_std=args.obs_noise,
            condition_noise_std=args.cond_noise,
            condition_informative=args.condition_informative,
            seed=args.seed, map_perturbation=args.map_perturbation)
        paths = generate_synthetic(spec, args.out_dir)
        print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    elif args.command == "train":
        ckpt = pipeline.train(_load_cfg(args), args.out)
        print(str(ckpt))
    elif args.command == "score":
        pipeline.score(args.checkpoint, args.manifest, _load_cfg(args), args.out)
        print(args.out)
    elif args.command == "eval":
        report = pipeline.evaluate(args.scores, args.manifest, _load_cfg(args),
                                   out_json=args.out, roc_csv=args.roc_csv)
        print(f"frame AUC: {report['frame_auc']:.4f}")
    elif args.command == "sweep":
        cfg = _load_cfg(args)
        rows = pipeline.sweep(cfg,
                              [float(v) for v in args.p_mean.split(",")],
                              [float(v) for v in args.p_std.split(",")],
                              [int(v) for v in args.start_t.split(",")],
                              args.out)
        print(f"{len(rows)} sweep cells -> {args.out}/sweep.csv")
    elif args.command == "cross-eval":
        report = pipeline.cross_eval(args.checkpoint, args.stats, args.manifest,
                                     _load_cfg(args), args.out)
        print(f"cross-domain frame AUC: {report['frame_auc']:.4f}")
    elif args.command == "report":
        _cmd_report(args)
        print(f"report written to {args.out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, InvalidInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
