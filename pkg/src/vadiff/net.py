"""Trainable denoiser: an encoder-decoder MLP over clip features.

The noise level enters through a fixed random Fourier embedding feeding
per-layer FiLM scale/shift generators; an optional condition vector is
added to the encoder input and to the bottleneck through two linear
projections (zero-initialized, so conditioning starts as a no-op).
Forward/backward are hand-written over numpy so gradients can be checked
against finite differences in f64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DataError, FormatError, InvalidInputError, NumericError

CHECKPOINT_MAGIC = b"VADW"
_VERSION = 1


@dataclass
class NetConfig:
    f: int
    c: int
    emb_dim: int = 256
    enc_widths: tuple = (1024, 512, 256)
    freq_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.f < 1 or self.c < 1:
            raise InvalidInputError("f and c must be >= 1")
        if self.emb_dim % 2 != 0:
            raise InvalidInputError("emb_dim must be even")
        self.enc_widths = tuple(int(w) for w in self.enc_widths)


def _silu(x):
    sig = expit(x)
    return x * sig, sig


class DenoiserNet:
    """Holds parameters plus the fixed Fourier frequency vector."""

    def __init__(self, config: NetConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        k = len(config.enc_widths)
        enc_dims = [config.f, *config.enc_widths]
        dec_dims = [config.enc_widths[-1], *reversed(config.enc_widths)]
        self.layers = []  # (name, d_in, d_out)
        for i in range(k):
            self.layers.append((f"enc{i}", enc_dims[i], enc_dims[i + 1]))
        for i in range(k):
            self.layers.append((f"dec{i}", dec_dims[i], dec_dims[i + 1]))
        self.n_encoder_layers = k
        self.bottleneck = config.enc_widths[-1]
        self.out_dim_in = dec_dims[-1]

        rng = np.random.default_rng(config.seed)
        self.freqs = rng.normal(0.0, config.freq_std, config.emb_dim // 2).astype(dtype)
        self.params: dict[str, np.ndarray] = {}
        for name, d_in, d_out in self.layers:
            s = np.sqrt(1.0 / d_in)
            self.params[f"{name}.w"] = rng.uniform(-s, s, (d_out, d_in)).astype(dtype)
            self.params[f"{name}.b"] = np.zeros(d_out, dtype=dtype)
            # FiLM generator zero-init: scale = 1 + delta starts as identity
            self.params[f"{name}.film_w"] = np.zeros((2 * d_out, config.emb_dim), dtype=dtype)
            self.params[f"{name}.film_b"] = np.zeros(2 * d_out, dtype=dtype)
        s = np.sqrt(1.0 / self.out_dim_in)
        self.params["out.w"] = rng.uniform(-s, s, (config.f, self.out_dim_in)).astype(dtype)
        self.params["out.b"] = np.zeros(config.f, dtype=dtype)
        self.params["p_enc"] = np.zeros((config.f, config.c), dtype=dtype)
        self.params["p_dec"] = np.zeros((self.bottleneck, config.c), dtype=dtype)
        self.param_order = list(self.params.keys())

    # -- forward / backward ------------------------------------------------

    def embed_timestep(self, c_noise) -> np.ndarray:
        """[cos(2*pi*F*c), sin(2*pi*F*c)] over the fixed frequencies F."""
        c = np.atleast_1d(np.asarray(c_noise, dtype=self.dtype))
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("c_noise must be finite")
        phase = 2.0 * np.pi * c[:, None] * self.freqs[None, :]
        return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)

    def forward(self, x, c_noise, cond=None, cache=None):
        """x: (B, f) or (f,); c_noise scalar or (B,). Returns same leading shape.

        Pass a dict as `cache` to collect intermediates for backward().
        """
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.config.f:
            raise DataError(f"expected input dim {self.config.f}, got {x.shape[1]}")
        b = x.shape[0]
        c_arr = np.broadcast_to(np.atleast_1d(np.asarray(c_noise, dtype=self.dtype)), (b,))
        emb = self.embed_timestep(c_arr)
        if cond is not None:
            cond = np.asarray(cond, dtype=self.dtype)
            if cond.ndim == 1:
                cond = np.broadcast_to(cond[None, :], (b, cond.shape[0]))
            if cond.shape[1] != self.config.c:
                raise DataError(f"expected condition dim {self.config.c}, got {cond.shape[1]}")

        a = x
        if cond is not None:
            a = a + cond @ self.params["p_enc"].T
        layer_caches = []
        for li, (name, _, d_out) in enumerate(self.layers):
            if li == self.n_encoder_layers and cond is not None:
                a = a + cond @ self.params["p_dec"].T
            pre = a @ self.params[f"{name}.w"].T + self.params[f"{name}.b"]
            film = emb @ self.params[f"{name}.film_w"].T + self.params[f"{name}.film_b"]
            delta, shift = film[:, :d_out], film[:, d_out:]
            mod = (1.0 + delta) * pre + shift
            act, sig = _silu(mod)
            layer_caches.append((a, pre, delta, mod, sig))
            a = act
        out = a @ self.params["out.w"].T + self.params["out.b"]
        if cache is not None:
            cache.update(x=x, emb=emb, cond=cond, layers=layer_caches, last_act=a)
        return out[0] if squeeze else out

    def backward(self, cache, dout) -> dict[str, np.ndarray]:
        """Gradients of sum(dout * forward) w.r.t. every parameter."""
        dout = np.asarray(dout, dtype=self.dtype)
        if dout.ndim == 1:
            dout = dout[None, :]
        grads = {}
        emb, cond = cache["emb"], cache["cond"]
        grads["out.w"] = dout.T @ cache["last_act"]
        grads["out.b"] = dout.sum(axis=0)
        da = dout @ self.params["out.w"]
        grads["p_dec"] = np.zeros_like(self.params["p_dec"])
        grads["p_enc"] = np.zeros_like(self.params["p_enc"])
        for li in range(len(self.layers) - 1, -1, -1):
            name, _, d_out = self.layers[li]
            a_in, pre, delta, mod, sig = cache["layers"][li]
            dmod = da * (sig * (1.0 + mod * (1.0 - sig)))
            dpre = dmod * (1.0 + delta)
            dfilm = np.concatenate([dmod * pre, dmod], axis=1)
            grads[f"{name}.film_w"] = dfilm.T @ emb
            grads[f"{name}.film_b"] = dfilm.sum(axis=0)
            grads[f"{name}.w"] = dpre.T @ a_in
            grads[f"{name}.b"] = dpre.sum(axis=0)
            da = dpre @ self.params[f"{name}.w"]
            if li == self.n_encoder_layers and cond is not None:
                grads["p_dec"] = da.T @ cond
        if cond is not None:
            grads["p_enc"] = da.T @ cond
        return grads


# ---------------------------------------------------------------------------
# Optimizer: Adam with decoupled weight decay, inverse-LR schedule, EMA


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    inv_gamma: float = 2000.0
    power: float = 1.0
    ema_decay: float = 0.999


class AdamOptimizer:
    def __init__(self, net: DenoiserNet, config: OptimizerConfig = OptimizerConfig()):
        self.net = net
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in net.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in net.params.items()}
        self.ema = {k: v.copy() for k, v in net.params.items()}
        self.step_count = 0

    def current_lr(self) -> float:
        c = self.config
        return c.lr / (1.0 + self.step_count / c.inv_gamma) ** c.power

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k} at step {self.step_count}")
        c = self.config
        lr = self.current_lr()
        t = self.step_count + 1
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for k, p in self.net.params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p -= (lr * (m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * p)).astype(p.dtype)
            self.ema[k] = (c.ema_decay * self.ema[k]
                           + (1.0 - c.ema_decay) * p).astype(p.dtype)
        self.step_count = t


# ---------------------------------------------------------------------------
# Checkpoint I/O


def save_checkpoint(path, net: DenoiserNet, ema: dict[str, np.ndarray] | None = None,
                    step: int = 0, use_ema: bool = True, extra: dict | None = None) -> None:
    cfg = net.config
    header = {
        "f": cfg.f, "c": cfg.c, "emb_dim": cfg.emb_dim,
        "enc_widths": list(cfg.enc_widths), "freq_std": cfg.freq_std,
        "seed": cfg.seed, "step": step, "use_ema": use_ema and ema is not None,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    if ema is None:
        ema = net.params
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(net.freqs.astype("<f4").tobytes())
        for k in net.param_order:
            fh.write(net.params[k].astype("<f4").tobytes())
        for k in net.param_order:
            fh.write(ema[k].astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns (net, ema_params, header). net.params holds the raw weights."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, expected VADW")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported VADW version {version}")
    off = 4 + struct.calcsize("<HI")
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    cfg = NetConfig(f=header["f"], c=header["c"], emb_dim=header["emb_dim"],
                    enc_widths=tuple(header["enc_widths"]), freq_std=header["freq_std"],
                    seed=header["seed"])
    net = DenoiserNet(cfg, dtype=dtype)

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        if len(raw) < off + 4 * n:
            raise FormatError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(raw[off:off + 4 * n], dtype="<f4").reshape(shape)
        off += 4 * n
        return arr.astype(dtype)

    net.freqs = take(net.freqs.shape)
    for k in net.param_order:
        net.params[k] = take(net.params[k].shape)
    ema = {k: take(net.params[k].shape) for k in net.param_order}
    return net, ema, header


def scoring_params(net: DenoiserNet, ema: dict, header: dict) -> dict:
    """Parameter set scoring should use, honoring the checkpoint's EMA flag."""
    return ema if header.get("use_ema", True) else net.params
