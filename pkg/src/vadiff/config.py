"""Run configuration: flat dotted keys with defaults, a key=value config file,
command-line overrides (flags > file > defaults), and a stable fingerprint."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict[str, object] = {
    "data.train_manifest": "",
    "data.test_manifest": "",
    "model.feature_dim": 128,
    "model.condition_dim": 16,
    "model.condition_source": "none",  # none | star | dynamic | external
    "model.role_swap": False,
    "model.emb_dim": 256,
    "model.widths": "1024,512,256",
    "model.freq_std": 0.2,
    "noise.p_mean": -1.2,
    "noise.p_std": 1.2,
    "noise.sigma_data": 1.0,
    "schedule.sigma_min": 0.01,
    "schedule.sigma_max": 80.0,
    "schedule.steps": 10,
    "schedule.rho": 7.0,
    "sampler.lms_order": 4,
    "sampler.start_t": -1,  # -1: auto (1 when conditioned, 6 otherwise)
    "train.epochs": 30,
    "train.batch_size": 256,
    "train.lr": 2e-4,
    "train.weight_decay": 1e-4,
    "train.ema_decay": 0.99,  # desk-scale EMA window; must fit a ~10^3-step run
    "train.inv_gamma": 2000.0,
    "train.power": 1.0,
    "train.seed": 0,
    "threshold.k": 1.0,
    "eval.batch": 8192,
    "score.use_ema": True,
    "score.seed": 0,
    "score.shuffle": False,
    "score.normalize_per_batch": False,
    "score.oracle_identity": False,  # test hook: identity denoiser at all sigma
}

# Fields that parameterize training; checkpoints are cached by their hash.
TRAIN_KEYS = (
    "data.train_manifest", "model.feature_dim", "model.condition_dim",
    "model.condition_source", "model.role_swap", "model.emb_dim", "model.widths",
    "model.freq_std", "noise.p_mean", "noise.p_std", "noise.sigma_data",
    "train.epochs", "train.batch_size", "train.lr", "train.weight_decay",
    "train.ema_decay", "train.inv_gamma", "train.power", "train.seed",
)


def _coerce(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key}")
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return raw


def parse_config_file(path) -> dict[str, object]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, raw)
    return out


def build_config(file_path=None, overrides: dict[str, str] | None = None) -> dict[str, object]:
    """Precedence: overrides > file > defaults."""
    cfg = dict(DEFAULTS)
    if file_path:
        cfg.update(parse_config_file(file_path))
    for key, raw in (overrides or {}).items():
        cfg[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return cfg


def effective_start_t(cfg: dict) -> int:
    t = int(cfg["sampler.start_t"])
    if t >= 0:
        return t
    return 1 if conditioned(cfg) else 6


def conditioned(cfg: dict) -> bool:
    return cfg["model.condition_source"] != "none"


def widths(cfg: dict) -> tuple[int, ...]:
    try:
        return tuple(int(w) for w in str(cfg["model.widths"]).split(","))
    except ValueError as exc:
        raise ConfigError(f"model.widths: {exc}") from exc


def fingerprint(cfg: dict, keys=None) -> str:
    """Order-independent hash over the semantically meaningful fields."""
    subset = {k: cfg[k] for k in (keys or sorted(DEFAULTS))}
    blob = json.dumps(subset, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def train_fingerprint(cfg: dict) -> str:
    return fingerprint(cfg, keys=sorted(TRAIN_KEYS))
