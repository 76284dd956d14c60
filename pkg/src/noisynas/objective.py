"""Training objective: cross-entropy plus a weighted Gaussian KL penalty.

The label likelihood is marginalized with a single reparameterized noise
draw per forward pass (the one-sample Monte-Carlo estimator), so the
loss is simply cross-entropy on the stochastic logits plus beta times
the closed-form KL between each injection site's diagonal Gaussian and
the standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .operators import SiteStats
from .tensor import Tensor

MU_MODES = ("pooled", "zero")
KL_AGGREGATES = ("mean", "sum")


@dataclass
class LossReport:
    """Scalar loss with its decomposition. `total` stays on the tape."""

    total: Tensor
    nll: float
    kl: float
    beta: float
    site_count: int


def kl_diag_gaussian(mu, sigma) -> Tensor:
    """KL( N(mu, diag(sigma^2)) || N(0, I) ) for a vector of components:
    sum_j 0.5 * (sigma_j^2 + mu_j^2 - 1 - ln sigma_j^2). Always >= 0."""
    mu = mu if isinstance(mu, Tensor) else Tensor(np.asarray(mu, dtype=np.float64))
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma, dtype=np.float64))
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    s2 = sigma * sigma
    return (0.5 * (s2 + mu * mu - 1.0 - T.log(s2))).sum()


def _site_kl(site: SiteStats, mu_mode: str) -> Tensor:
    """Channel-summed KL, averaged over the batch dimension when present."""
    sigma = site.sigma
    if np.any(sigma.data <= 0):
        raise ValueError(f"site {site.name}: sigma must be strictly positive")
    if mu_mode == "pooled":
        mu_sq = site.mu * site.mu
    elif mu_mode == "zero":
        mu_sq = Tensor(np.zeros(sigma.shape))
    else:
        raise ValueError(f"unknown mu_mode {mu_mode!r}")
    s2 = sigma * sigma
    per = 0.5 * (s2 + mu_sq - 1.0 - T.log(s2))
    return per.sum(axis=-1).mean() if per.ndim > 1 else per.sum()


def nas_loss(logits: Tensor, onehot, sites: list[SiteStats], beta: float,
             mu_mode: str = "pooled", kl_aggregate: str = "mean") -> LossReport:
    """total = cross_entropy + beta * KL over the injection sites.

    With an empty site list (or a vanilla operator set) the KL term is
    identically zero and the loss degenerates to plain cross-entropy.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if kl_aggregate not in KL_AGGREGATES:
        raise ValueError(f"unknown kl aggregate {kl_aggregate!r}")
    nll = T.softmax_cross_entropy(logits, onehot)
    sites = [s for s in sites if s is not None]
    if sites:
        acc = _site_kl(sites[0], mu_mode)
        for site in sites[1:]:
            acc = acc + _site_kl(site, mu_mode)
        kl = acc / len(sites) if kl_aggregate == "mean" else acc
    else:
        kl = Tensor(np.float64(0.0))
    total = nll + beta * kl
    return LossReport(total=total, nll=float(nll.data), kl=float(kl.data),
                      beta=float(beta), site_count=len(sites))
