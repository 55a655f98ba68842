"""Diagonal Gaussian posteriors, reparameterized sampling and closed-form KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True, eq=False)
class DiagonalGaussian:
    """N(mu, diag(exp(log_var))) over the last axis; leading axes are batch."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ in shape")

    @property
    def size(self) -> int:
        return self.mu.shape[-1]

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var.data)

    def __getitem__(self, index) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mu[index], self.log_var[index])

    @classmethod
    def standard(cls, size: int, batch: tuple[int, ...] = ()) -> "DiagonalGaussian":
        zeros = np.zeros(batch + (size,))
        return cls(Tensor(zeros), Tensor(zeros))

    @classmethod
    def concatenate(cls, parts: list["DiagonalGaussian"]) -> "DiagonalGaussian":
        return cls(ad.concat([p.mu for p in parts], axis=-1),
                   ad.concat([p.log_var for p in parts], axis=-1))


def sample_latent(q: DiagonalGaussian, noise) -> Tensor:
    """z = mu + exp(log_var / 2) * noise."""
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    if noise.shape[-1:] != q.mu.shape[-1:]:
        raise ValueError(f"noise length {noise.shape[-1:]} does not match latent length {q.size}")
    return q.mu + ad.exp(0.5 * q.log_var) * noise


def kl_to_standard_normal(q: DiagonalGaussian) -> Tensor:
    """KL(q || N(0, I)), summed over the latent axis."""
    terms = 1.0 + q.log_var - ad.square(q.mu) - ad.exp(q.log_var)
    return -0.5 * terms.sum(axis=-1)


def kl_between(qa: DiagonalGaussian, qb: DiagonalGaussian) -> Tensor:
    """KL(qa || qb) for diagonal Gaussians, summed over the latent axis."""
    if qa.mu.shape[-1] != qb.mu.shape[-1]:
        raise ValueError(f"latent lengths differ: {qa.size} vs {qb.size}")
    var_ratio = ad.exp(qa.log_var - qb.log_var)
    mean_term = ad.square(qa.mu - qb.mu) * ad.exp(-qb.log_var)
    terms = qb.log_var - qa.log_var + var_ratio + mean_term - 1.0
    return 0.5 * terms.sum(axis=-1)
