"""Conditional latent DDPM with v-prediction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, NumericError
from .nn import Module, parameter
from .rng import RngStream
from .tensor import Tensor, as_tensor, exp, no_grad


@dataclass(frozen=True)
class DiffusionSchedule:
    """Arrays indexed ``0..T``; index 0 holds the ``alpha_bar_0 = 1`` convention."""

    T: int
    s: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variance: np.ndarray

    def check_step(self, k) -> np.ndarray:
        k = np.asarray(k)
        if np.any((k < 1) | (k > self.T)) or np.any(k != np.round(k)):
            raise DomainError(f"diffusion step must lie in 1..{self.T}, got {np.ravel(k).tolist()}")
        return k.astype(int)


def cosine_alpha_bar(k, T: int, s: float):
    f = np.cos((np.asarray(k) / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
    f0 = np.cos(s / (1.0 + s) * np.pi / 2.0) ** 2
    return f / f0


def build_cosine_schedule(T: int = 15, s: float = 0.008, beta_max: float = 0.999) -> DiffusionSchedule:
    """Improved-DDPM cosine schedule with betas clipped at ``beta_max``.

    ``alpha_bar`` is recomputed from the clipped betas, so the final value is
    small but positive rather than exactly zero.
    """
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not s > 0:
        raise ConfigError(f"offset s must be positive, got {s}")
    k = np.arange(T + 1)
    ab = cosine_alpha_bar(k, T, s)
    betas = np.zeros(T + 1)
    betas[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], beta_max)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    post = np.zeros(T + 1)
    post[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    for arr in (betas, alphas, alpha_bars, post):
        arr.setflags(write=False)
    return DiffusionSchedule(int(T), float(s), betas, alphas, alpha_bars, post)


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape((-1,) + (1,) * (ndim - 1))


def noise_and_target(y0, k, eps, sched: DiffusionSchedule) -> tuple[Tensor, Tensor]:
    """Forward-noised latent ``y_k`` and v-target for steps ``k`` (scalar or per sample)."""
    y0, eps = as_tensor(y0), as_tensor(eps)
    k = sched.check_step(k)
    ab = sched.alpha_bars[k]
    if ab.ndim:
        ab = _per_sample(ab, y0.ndim)
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    return a * y0 + b * eps, a * eps - b * y0


def v_to_eps(v_hat, y_k, alpha_bar) -> Tensor:
    return np.sqrt(alpha_bar) * as_tensor(v_hat) + np.sqrt(1.0 - alpha_bar) * as_tensor(y_k)


class LatentNormalizer(Module):
    """Learned scalar centring and scaling; ``sigma_p = exp(rho)``."""

    def __init__(self, mu: float = 0.0, sigma: float = 1.0):
        if sigma <= 0:
            raise ConfigError("sigma_p must be positive")
        self.mu_p = parameter(np.array(float(mu)))
        self.rho = parameter(np.array(np.log(sigma)))

    @property
    def sigma_p(self) -> Tensor:
        return exp(self.rho)

    def norm(self, z) -> Tensor:
        return (as_tensor(z) - self.mu_p) / self.sigma_p

    def unnorm(self, z) -> Tensor:
        return as_tensor(z) * self.sigma_p + self.mu_p


def latent_norm(z, normalizer: LatentNormalizer) -> Tensor:
    return normalizer.norm(z)


def latent_unnorm(z, normalizer: LatentNormalizer) -> Tensor:
    return normalizer.unnorm(z)


def _draw(rngs: Sequence[RngStream], shape: tuple) -> np.ndarray:
    return np.stack([r.normal(shape[1:]) for r in rngs])


VPredictor = Callable[[Tensor, Tensor, Tensor, float], Tensor]


def ddpm_sample(z_t, c_down, predictor: VPredictor, sched: DiffusionSchedule,
                normalizer: LatentNormalizer, rngs: Sequence[RngStream]) -> Tensor:
    """Draw the next posterior mean by running the reverse chain ``T -> 0``.

    ``predictor(z_norm, y_k, c_down, k_over_T)`` returns the v estimate.
    ``rngs`` holds one stream per batch element, so batching members
    together or one at a time consumes identical noise.
    """
    z_t = as_tensor(z_t)
    if len(rngs) != z_t.shape[0]:
        raise ConfigError(f"{len(rngs)} random streams for batch of {z_t.shape[0]}")
    with no_grad():
        z_norm = normalizer.norm(z_t)
        y = _draw(rngs, z_t.shape)
        for k in range(sched.T, 0, -1):
            v_hat = predictor(z_norm, Tensor._wrap(y), c_down, k / sched.T).data
            ab, a, b = sched.alpha_bars[k], sched.alphas[k], sched.betas[k]
            eps_hat = np.sqrt(ab) * v_hat + np.sqrt(1.0 - ab) * y
            mean = (y - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
            if k > 1:
                y = mean + np.sqrt(sched.posterior_variance[k]) * _draw(rngs, z_t.shape)
            else:
                y = mean
            if not np.all(np.isfinite(y)):
                raise NumericError(f"non-finite latent at diffusion step {k}")
        return normalizer.unnorm(Tensor._wrap(y))
