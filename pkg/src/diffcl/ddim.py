"""Noise schedule, label encoding, forward noising and the DDIM reverse step.

Timesteps are 1-based (1..T); ``alpha_bar_at(0)`` is 1, the clean endpoint.
All functions accept numpy arrays or torch tensors.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t):
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t - 1])


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule with its running product of alphas."""
    if int(T) < 1:
        raise ConfigError("T", f"need at least one step, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            "beta_start", f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def onehot_encode(labels, num_classes):
    """Integer grid (..., H, L, D) -> (..., C, H, L, D) in {-1, +1}.

    A leading batch axis is kept in front of the channel axis.
    """
    as_numpy = isinstance(labels, np.ndarray)
    lab = torch.as_tensor(labels).long()
    if lab.numel() and (int(lab.min()) < 0 or int(lab.max()) >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes - 1}]")
    oh = torch.nn.functional.one_hot(lab, num_classes).movedim(-1, -4).float()
    out = 2.0 * oh - 1.0
    return out.numpy() if as_numpy else out


def onehot_decode(encoded):
    """Channel argmax over axis -4."""
    if isinstance(encoded, np.ndarray):
        return np.argmax(encoded, axis=-4)
    return torch.argmax(encoded, dim=-4)


@dataclass
class NoisyLabelField:
    values: object
    t: int
    noise: object


def _gaussian_like(y0, seed, generator):
    if isinstance(y0, np.ndarray):
        return np.random.default_rng(seed).standard_normal(y0.shape).astype(y0.dtype)
    if generator is None:
        generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(y0.shape, generator=generator, dtype=y0.dtype)


def forward_noise(y0, t, schedule, seed=0, noise=None, generator=None):
    """Y_t = sqrt(abar_t) Y_0 + sqrt(1 - abar_t) eps.

    ``noise`` overrides the draw (tests use this to pin eps); ``generator``
    lets the trainer thread one torch RNG through the epoch.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    if noise is None:
        noise = _gaussian_like(y0, seed, generator)
    ab = schedule.alpha_bar_at(t)
    values = math.sqrt(ab) * y0 + math.sqrt(1.0 - ab) * noise
    return NoisyLabelField(values=values, t=t, noise=noise)


def predict_x0_from_eps(x_t, eps_pred, t, schedule):
    ab = schedule.alpha_bar_at(t)
    if ab <= 0.0:
        raise NumericError(f"alpha_bar is zero at t={t}")
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def ddim_reverse_step(x_tau, x0_pred, tau, tau_prev, schedule):
    """Deterministic DDIM update from step ``tau`` to ``tau_prev`` (< tau)."""
    if not 0 <= tau_prev < tau:
        raise ValueError(f"need 0 <= tau_prev < tau, got {tau_prev}, {tau}")
    ab = schedule.alpha_bar_at(tau)
    ab_prev = schedule.alpha_bar_at(tau_prev)
    if ab >= 1.0:
        raise NumericError(f"alpha_bar is 1 at tau={tau}; the noise direction is undefined")
    eps_dir = (x_tau - math.sqrt(ab) * x0_pred) / math.sqrt(1.0 - ab)
    return math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps_dir


def ddim_sample(predict_x0, x_T, taus, schedule):
    """Walk ``taus`` (increasing, ending at T) backwards to a clean estimate.

    ``predict_x0(x, t)`` returns the clean-label estimate at step t.
    """
    taus = list(taus)
    x = x_T
    for i in range(len(taus) - 1, -1, -1):
        tau = taus[i]
        tau_prev = taus[i - 1] if i > 0 else 0
        x = ddim_reverse_step(x, predict_x0(x, tau), tau, tau_prev, schedule)
    return x
