"""Diffusion core: preconditioning, training noise and loss, the warped
sigma schedule, the linear-multistep reverse sampler, and partial-noising
reconstruction.

The denoiser is the composite D(x; sigma) = c_skip*x + c_out*G(c_in*x; c_noise),
so the inner network can interpolate between noise- and clean-prediction
across noise scales. Training minimizes a weighted squared error between D
and the clean vector; the weight puts the objective on the network's output
scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import InvalidInputError, NumericError
from .net import DenoiserNet


@dataclass
class PreconditionCoeffs:
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray
    c_noise: np.ndarray | None  # None when sigma == 0 was allowed


@dataclass
class NoiseParams:
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 1.0

    def __post_init__(self):
        if self.p_std < 0 or self.sigma_data <= 0:
            raise InvalidInputError("p_std must be >= 0 and sigma_data > 0")


@dataclass
class SigmaSchedule:
    sigmas: np.ndarray  # length T+1, strictly decreasing, last entry exactly 0
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1


@dataclass
class SamplerConfig:
    start_index: int = 0
    lms_order: int = 4

    def __post_init__(self):
        if not 1 <= self.lms_order <= 4:
            raise InvalidInputError("lms_order must be in [1, 4]")
        if self.start_index < 0:
            raise InvalidInputError("start_index must be >= 0")


def precondition_coeffs(sigma, sigma_data: float, allow_zero: bool = False) -> PreconditionCoeffs:
    """c_skip, c_out, c_in, c_noise as functions of (sigma, sigma_data).

    c_noise = ln(sigma)/4 and is defined only for sigma > 0; requesting it at
    sigma = 0 is an error unless allow_zero (which returns c_noise=None).
    """
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < 0):
        raise InvalidInputError("sigma must be >= 0")
    var = sig ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / var
    c_out = sig * sigma_data / np.sqrt(var)
    c_in = 1.0 / np.sqrt(var)
    if np.any(sig == 0):
        if not allow_zero:
            raise InvalidInputError("c_noise undefined at sigma = 0")
        c_noise = None
    else:
        c_noise = np.log(sig) / 4.0
    return PreconditionCoeffs(c_skip=c_skip, c_out=c_out, c_in=c_in, c_noise=c_noise)


def denoise(net: DenoiserNet, x, sigma, cond=None, sigma_data: float = 1.0):
    """The composite denoiser D(x; sigma). x: (f,) or (B, f); sigma scalar or (B,)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    sig = np.broadcast_to(np.atleast_1d(np.asarray(sigma, dtype=np.float64)), (x.shape[0],))
    if np.any(sig <= 0):
        raise InvalidInputError("denoise requires sigma > 0")
    co = precondition_coeffs(sig, sigma_data)
    g = net.forward(co.c_in[:, None] * x, co.c_noise, cond=cond)
    out = co.c_skip[:, None] * x + co.c_out[:, None] * np.asarray(g, dtype=np.float64)
    return out[0] if squeeze else out


def sample_training_sigma(noise: NoiseParams, rng: np.random.Generator, size=None):
    """sigma = exp(p_mean + p_std * z), z standard normal."""
    z = rng.standard_normal(size)
    return np.exp(noise.p_mean + noise.p_std * z)


def training_loss(net: DenoiserNet, x0, cond, sigma, eps, sigma_data: float = 1.0):
    """Per-sample weighted reconstruction loss at noise level sigma.

    loss = lam(sigma) * ||D(x0 + sigma*eps) - x0||^2 with
    lam = (sigma^2 + sd^2) / (sigma * sd)^2, i.e. unit weight on the network
    output scale.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    squeeze = x0.ndim == 1
    if squeeze:
        x0 = x0[None, :]
    eps = np.asarray(eps, dtype=np.float64).reshape(x0.shape)
    sig = np.broadcast_to(np.atleast_1d(np.asarray(sigma, dtype=np.float64)), (x0.shape[0],))
    if np.any(sig <= 0):
        raise InvalidInputError("training loss requires sigma > 0")
    d = denoise(net, x0 + sig[:, None] * eps, sig, cond=cond, sigma_data=sigma_data)
    lam = (sig ** 2 + sigma_data ** 2) / (sig * sigma_data) ** 2
    loss = lam * np.sum((d - x0) ** 2, axis=1)
    return loss[0] if squeeze else loss


def training_loss_and_grads(net: DenoiserNet, x0, cond, sigma, eps,
                            sigma_data: float = 1.0):
    """Batch-mean loss and its gradients w.r.t. every network parameter."""
    x0 = np.asarray(x0, dtype=np.float64)
    b = x0.shape[0]
    sig = np.broadcast_to(np.atleast_1d(np.asarray(sigma, dtype=np.float64)), (b,))
    co = precondition_coeffs(sig, sigma_data)
    xn = x0 + sig[:, None] * np.asarray(eps, dtype=np.float64)
    cache = {}
    g = net.forward(co.c_in[:, None] * xn, co.c_noise, cond=cond, cache=cache)
    d = co.c_skip[:, None] * xn + co.c_out[:, None] * np.asarray(g, dtype=np.float64)
    lam = (sig ** 2 + sigma_data ** 2) / (sig * sigma_data) ** 2
    resid = d - x0
    loss = float(np.mean(lam * np.sum(resid ** 2, axis=1)))
    dg = (2.0 / b) * (lam * co.c_out)[:, None] * resid
    grads = net.backward(cache, dg)
    return loss, grads


def karras_schedule(sigma_min: float = 0.01, sigma_max: float = 80.0,
                    T: int = 10, rho: float = 7.0) -> SigmaSchedule:
    """Warped noise-level spacing from sigma_max down to sigma_min, then 0."""
    if not 0 < sigma_min < sigma_max:
        raise InvalidInputError("need 0 < sigma_min < sigma_max")
    if T < 1:
        raise InvalidInputError("T must be >= 1")
    if T == 1:
        sigmas = np.array([sigma_max, 0.0])
    else:
        ramp = np.arange(T) / (T - 1)
        inv = sigma_max ** (1.0 / rho) + ramp * (sigma_min ** (1.0 / rho)
                                                 - sigma_max ** (1.0 / rho))
        sigmas = np.append(inv ** rho, 0.0)
    return SigmaSchedule(sigmas=sigmas, sigma_min=sigma_min, sigma_max=sigma_max, rho=rho)


def lms_coefficients(sigmas, i: int, order: int) -> list[float]:
    """Integrated Lagrange basis over [sigma_i, sigma_{i+1}] with nodes at
    sigma_{i-j}, j < order (Adams-Bashforth style)."""
    nodes = [float(sigmas[i - m]) for m in range(order)]

    def basis(s, j):
        out = 1.0
        for m in range(order):
            if m != j:
                out *= (s - nodes[m]) / (nodes[j] - nodes[m])
        return out

    coeffs = []
    for j in range(order):
        val, _ = quad(basis, float(sigmas[i]), float(sigmas[i + 1]), args=(j,),
                      epsabs=1e-10, epsrel=1e-10)
        coeffs.append(val)
    return coeffs


def lms_sample(denoise_fn, x_start, schedule: SigmaSchedule, config: SamplerConfig):
    """Reverse process from schedule index start_index down to sigma = 0.

    denoise_fn(x, sigma) -> x0 estimate; the derivative of the probability-flow
    trajectory is d = (x - denoise_fn(x, sigma)) / sigma and the update
    combines the most recent derivatives with integrated-Lagrange weights.
    """
    sig = schedule.sigmas
    t_max = schedule.steps
    t = config.start_index
    if not 0 <= t < t_max:
        raise InvalidInputError(f"start_index {t} outside [0, {t_max})")
    x = np.array(x_start, dtype=np.float64)
    derivs: list[np.ndarray] = []
    for i in range(t, t_max):
        if sig[i] <= 0:
            raise NumericError(f"sigma[{i}] = 0 before the final step")
        d = (x - denoise_fn(x, sig[i])) / sig[i]
        derivs.append(d)
        order_i = min(config.lms_order, i - t + 1)
        coeffs = lms_coefficients(sig, i, order_i)
        for j, cj in enumerate(coeffs):
            x = x + cj * derivs[len(derivs) - 1 - j]
    return x


def partial_noise(x0, sigma_t: float, rng: np.random.Generator):
    """x_t = x0 + sigma_t * z; sigma_t = 0 returns x0 unchanged."""
    if sigma_t < 0:
        raise InvalidInputError("sigma_t must be >= 0")
    x0 = np.asarray(x0, dtype=np.float64)
    if sigma_t == 0:
        return x0.copy()
    return x0 + sigma_t * rng.standard_normal(x0.shape)


def reconstruct(denoise_fn, x0, schedule: SigmaSchedule, config: SamplerConfig,
                rng: np.random.Generator):
    """Partial-noise x0 at the start index's level, then run the tail of the
    reverse process back to sigma = 0."""
    x_t = partial_noise(x0, float(schedule.sigmas[config.start_index]), rng)
    return lms_sample(denoise_fn, x_t, schedule, config)


def make_denoise_fn(net: DenoiserNet, cond=None, sigma_data: float = 1.0):
    """Bind a network (and optional condition batch) into an (x, sigma) callable."""
    return lambda x, sigma: denoise(net, x, sigma, cond=cond, sigma_data=sigma_data)
