"""Diffusion schedule and the closed-form single-step latent enhancement math.

All functions are pure and work on numpy arrays or torch tensors alike (the
arithmetic only uses ``*``, ``-``, ``/`` and scalar square roots), so the same
code path serves the numerical property tests and the autograd training loop.

Timestep indices are 0-based: ``t`` in ``[0, num_steps)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "NoiseSchedule",
    "DaeRange",
    "build_schedule",
    "default_dae_range",
    "forward_noise",
    "one_step_denoise",
    "gle_fda",
    "eta_from_score",
    "gle_dae",
]

Denoiser = Callable[..., object]


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray

    def check_index(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.num_steps:
            raise IndexError(f"timestep {t} outside [0, {self.num_steps})")
        return t


@dataclass(frozen=True)
class DaeRange:
    """Noise-level interval and scaling used by the enhancement step.

    ``beta_bar_min``/``beta_bar_max`` bound the adaptive noise ratio, ``gamma``
    is the feature scaling weight and ``t_step`` the timestep fed to the
    denoiser.
    """

    beta_bar_min: float
    beta_bar_max: float
    gamma: float = 5.0
    t_step: int = 500

    def __post_init__(self):
        if not 0.0 < self.beta_bar_min < self.beta_bar_max < 1.0:
            raise ValueError(
                f"need 0 < beta_bar_min < beta_bar_max < 1, got "
                f"{self.beta_bar_min}, {self.beta_bar_max}"
            )
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    def validate_against(self, sched: NoiseSchedule) -> None:
        lo, hi = sched.beta_bar[0], sched.beta_bar[-1]
        if not (lo <= self.beta_bar_min and self.beta_bar_max <= hi):
            raise ValueError(
                f"DAE range [{self.beta_bar_min}, {self.beta_bar_max}] outside "
                f"schedule range [{lo}, {hi}]"
            )
        sched.check_index(self.t_step)


def build_schedule(num_steps: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp with cumulative products, in float64."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    beta_bar = 1.0 - alpha_bar
    for arr in (beta, alpha, alpha_bar, beta_bar):
        arr.flags.writeable = False
    return NoiseSchedule(num_steps, beta, alpha, alpha_bar, beta_bar)


def default_dae_range(sched: NoiseSchedule, t_min: int = 100, t_max: int = 900,
                      gamma: float = 5.0, t_step: int = 500) -> DaeRange:
    dae = DaeRange(float(sched.beta_bar[sched.check_index(t_min)]),
                   float(sched.beta_bar[sched.check_index(t_max)]),
                   gamma=gamma, t_step=t_step)
    dae.validate_against(sched)
    return dae


def _same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(z, t: int, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) * z + sqrt(1 - abar_t) * eps``."""
    _same_shape(z, eps, "forward_noise")
    ab = float(sched.alpha_bar[sched.check_index(t)])
    return math.sqrt(ab) * z + math.sqrt(1.0 - ab) * eps


def one_step_denoise(z_t, eps_hat, t: int, sched: NoiseSchedule):
    """Clean-latent estimate from a single noise prediction."""
    _same_shape(z_t, eps_hat, "one_step_denoise")
    ab = float(sched.alpha_bar[sched.check_index(t)])
    return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def gle_fda(z_l, dae: DaeRange, denoiser: Denoiser, sched: NoiseSchedule):
    """Fixed-timestep enhancement with feature scaling by ``dae.gamma``.

    ``denoiser(u, t)`` is called once on ``u = gamma * z_l``; with gamma=1
    this is the unscaled single-step reconstruction.
    """
    gamma = float(dae.gamma)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    ab = float(sched.alpha_bar[sched.check_index(dae.t_step)])
    u = gamma * z_l
    eps_hat = denoiser(u, dae.t_step)
    _same_shape(u, eps_hat, "gle_fda denoiser output")
    return (u - math.sqrt(1.0 - ab) * eps_hat) / (gamma * math.sqrt(ab))


def eta_from_score(s, dae: DaeRange):
    """Map a degradation score in [0, 1] linearly onto the noise-ratio range.

    Accepts a python float, numpy array or torch tensor. Scores outside [0, 1]
    raise instead of being clamped.
    """
    lo = np.min(_to_numpy(s))
    hi = np.max(_to_numpy(s))
    if lo < 0.0 or hi > 1.0 or np.isnan(lo) or np.isnan(hi):
        raise ValueError(f"score outside [0, 1]: min={lo}, max={hi}")
    return dae.beta_bar_min + s * (dae.beta_bar_max - dae.beta_bar_min)


def _to_numpy(x):
    if hasattr(x, "detach"):
        return x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _broadcast_eta(eta, z):
    """Per-sample eta (shape ``(B,)``) broadcast against a ``(B, C, H, W)`` latent."""
    if hasattr(eta, "ndim") and eta.ndim == 1 and z.ndim > 1:
        return eta.reshape((-1,) + (1,) * (z.ndim - 1))
    return eta


def gle_dae(z_l, eta, dae: DaeRange, denoiser: Denoiser):
    """Degradation-adaptive enhancement.

    ``(gamma*z_l - sqrt(eta) * eps_hat) / (gamma * sqrt(1 - eta))`` with
    ``eps_hat = denoiser(gamma*z_l, dae.t_step)``. ``eta`` may be a scalar or
    one value per batch item. The timestep embedding stays at ``t_step``.
    """
    gamma = float(dae.gamma)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    e = _to_numpy(eta)
    if np.any(e >= 1.0) or np.any(e < 0.0) or np.any(np.isnan(e)):
        raise ValueError(f"eta must lie in [0, 1), got {e}")
    u = gamma * z_l
    eps_hat = denoiser(u, dae.t_step)
    _same_shape(u, eps_hat, "gle_dae denoiser output")
    eta_b = _broadcast_eta(eta, z_l)
    if hasattr(eta_b, "sqrt"):
        root_eta, root_keep = eta_b.sqrt(), (1.0 - eta_b).sqrt()
    else:
        root_eta, root_keep = np.sqrt(eta_b), np.sqrt(1.0 - eta_b)
    return (u - root_eta * eps_hat) / (gamma * root_keep)
