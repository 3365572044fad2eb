"""Diagonal Gaussians parameterised by mean and log-variance."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise DimensionError(f"mean {self.mean.shape} and logvar {self.logvar.shape} differ")

    @property
    def shape(self):
        return self.mean.shape

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.logvar.detach())

    @classmethod
    def standard(cls, shape) -> "DiagGaussian":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def sample_reparam(d: DiagGaussian, rng=None, eps: np.ndarray | None = None) -> Tensor:
    """mean + exp(logvar / 2) * eps, with eps drawn from ``rng`` unless given."""
    if eps is None:
        eps = rng.normal(d.shape)
    std = ad.exp(ad.mul(d.logvar, 0.5))
    return ad.add(d.mean, ad.mul(std, Tensor(eps)))


def log_prob(d: DiagGaussian, x: Tensor) -> Tensor:
    """Log-density summed over the last axis."""
    x = ad.as_tensor(x)
    if x.shape != d.shape:
        raise DimensionError(f"log_prob: x {x.shape} vs distribution {d.shape}")
    diff = ad.sub(x, d.mean)
    inv_var = ad.exp(ad.negate(d.logvar))
    per_dim = ad.add(ad.mul(ad.add(d.logvar, ad.mul(ad.square(diff), inv_var)), -0.5), -HALF_LOG_2PI)
    return ad.sum(per_dim, axis=-1)


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) in closed form, summed over the last axis."""
    if q.shape != p.shape:
        raise DimensionError(f"kl: shapes {q.shape} and {p.shape} differ")
    inv_var_p = ad.exp(ad.negate(p.logvar))
    num = ad.add(ad.exp(q.logvar), ad.square(ad.sub(q.mean, p.mean)))
    per_dim = ad.add(
        ad.mul(ad.sub(p.logvar, q.logvar), 0.5),
        ad.add(ad.mul(ad.mul(num, inv_var_p), 0.5), -0.5),
    )
    return ad.sum(per_dim, axis=-1)
