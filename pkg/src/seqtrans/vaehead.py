"""Per-step Gaussian latent: split a hidden state, sample, and regularize."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from seqtrans import neuralcore as nc
from seqtrans.neuralcore import Tensor

VARIANCE_FLOOR = 1e-8
LOG_VARIANCE_FLOOR = float(np.log(VARIANCE_FLOOR))


@dataclass
class GaussianPosterior:
    mu: Tensor
    sigma2: Tensor
    # ln sigma2 taken straight from the pre-activation, clamped to the same floor
    log_sigma2: Tensor


@dataclass
class LatentSample:
    z: Tensor
    eps: np.ndarray


def split_posterior(h: Tensor) -> GaussianPosterior:
    """The first half of ``h`` is log-variance, the second half is the mean."""
    d = h.shape[-1]
    if d % 2:
        raise ValueError(f"hidden size must be even to split into mean/variance, got {d}")
    half = d // 2
    log_var = nc.clamp_min(nc.take_cols(h, 0, half), LOG_VARIANCE_FLOOR)
    return GaussianPosterior(
        mu=nc.take_cols(h, half, d),
        sigma2=nc.exp(log_var),
        log_sigma2=log_var,
    )


def reparameterize(p: GaussianPosterior, eps=None, rng: np.random.Generator | None = None) -> LatentSample:
    """``z = mu + sqrt(sigma2) * eps``; eps is a constant, gradients reach mu and sigma2.

    Pass ``eps`` explicitly, or an ``rng`` to draw it; with neither the mean is used.
    """
    shape = p.mu.shape
    if eps is None:
        eps = rng.standard_normal(shape) if rng is not None else np.zeros(shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != shape:
        raise nc.DimensionError(f"eps shape {eps.shape} does not match posterior {shape}")
    z = p.mu + nc.sqrt(p.sigma2) * Tensor(eps)
    return LatentSample(z=z, eps=eps)


def kl_standard_normal(p: GaussianPosterior) -> Tensor:
    """KL(q || N(0, I)) summed over the latent axis; one value per batch row."""
    terms = p.mu * p.mu + p.sigma2 - p.log_sigma2 - 1.0
    return nc.tensor_sum(terms, axis=-1) * 0.5


def kl_value(mu, sigma2) -> float:
    """Plain-numpy closed form, for reporting and tests."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("variance must be positive")
    return float(0.5 * np.sum(mu * mu + sigma2 - np.log(sigma2) - 1.0))
