"""Regularization terms for the VAE variants, and the FactorVAE discriminator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, DomainError
from .vae import EncoderOutput, kl_to_prior

KINDS = ("beta", "annealed", "factor", "dip_i", "dip_ii", "btc")

# Per-kind defaults for hyper-parameters; anything not listed falls back to the
# dataclass default and is ignored by that kind.
KIND_DEFAULTS = {
    "beta": {"beta": 4.0},
    "annealed": {"gamma": 1000.0, "c_max": 25.0, "anneal_steps": 100000},
    "factor": {"gamma": 20.0},
    "dip_i": {"lambda_od": 10.0, "lambda_d": 100.0},
    "dip_ii": {"lambda_od": 10.0, "lambda_d": 10.0},
    "btc": {"beta": 6.0},
}


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "beta"
    beta: float = 1.0
    gamma: float = 0.0
    c_max: float = 0.0
    anneal_steps: int = 100000
    lambda_od: float = 0.0
    lambda_d: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown regularizer kind {self.kind!r}; expected one of {KINDS}")
        for f in fields(self):
            if f.name != "kind" and getattr(self, f.name) < 0:
                raise ConfigurationError(f"{f.name} must be non-negative")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "RegularizerConfig":
        if kind not in KINDS:
            raise ConfigurationError(f"unknown regularizer kind {kind!r}")
        params = dict(KIND_DEFAULTS[kind])
        params.update(overrides)
        return cls(kind=kind, **params)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    hidden_width: int = 1000
    num_layers: int = 6
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9

    def __post_init__(self):
        if self.num_layers < 2:
            raise ConfigurationError("discriminator needs at least 2 layers")

    def to_dict(self) -> dict:
        return asdict(self)


class Discriminator(nn.Module):
    """MLP classifying latent codes as joint (class 0) or permuted (class 1)."""

    def __init__(self, latent_dim: int, cfg: DiscriminatorConfig, slope: float = 0.2):
        super().__init__()
        widths = [latent_dim] + [cfg.hidden_width] * (cfg.num_layers - 1)
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(a, b), nn.LeakyReLU(slope)]
        layers.append(nn.Linear(widths[-1], 2))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


def beta_reg(kl, beta):
    return beta * kl


def capacity_at(t, c_max, anneal_steps):
    """Linearly increasing KL target, saturating at ``c_max`` after ``anneal_steps``."""
    if anneal_steps <= 0:
        raise ConfigurationError("anneal_steps must be positive")
    if t < 0:
        raise DomainError("step must be non-negative")
    return c_max * min(1.0, t / anneal_steps)


def annealed_reg(kl, gamma, capacity):
    return gamma * torch.abs(kl - capacity) if torch.is_tensor(kl) else gamma * abs(kl - capacity)


def permute_dims(z, rng: np.random.Generator):
    """Shuffle each latent column independently across the batch.

    Draws one ``rng.permutation(n)`` per column, in column order.
    """
    n, d = z.shape
    if n < 1:
        raise DomainError("batch must be non-empty")
    idx = np.stack([rng.permutation(n) for _ in range(d)], axis=1)
    if torch.is_tensor(z):
        return torch.gather(z, 0, torch.from_numpy(idx).to(z.device))
    return np.take_along_axis(np.asarray(z), idx, axis=0)


def tc_estimate(logits):
    """Density-ratio estimate of total correlation from joint-sample logits."""
    return (logits[:, 0] - logits[:, 1]).mean()


def factor_vae_reg(kl, gamma, tc):
    return kl + gamma * tc


def discriminator_loss(logits_real, logits_perm):
    """Two-class cross-entropy: real joint samples are class 0, permuted are class 1."""
    zeros = torch.zeros(logits_real.shape[0], dtype=torch.long, device=logits_real.device)
    ones = torch.ones(logits_perm.shape[0], dtype=torch.long, device=logits_perm.device)
    return 0.5 * (F.cross_entropy(logits_real, zeros) + F.cross_entropy(logits_perm, ones))


def latent_covariance(samples, mode="mu"):
    """Population covariance of an (n, d) batch.

    ``mode`` only labels the source: ``"mu"`` for posterior means (DIP-VAE-I) and
    ``"z"`` for posterior samples (DIP-VAE-II).
    """
    if mode not in ("mu", "z"):
        raise DomainError(f"mode must be 'mu' or 'z', got {mode!r}")
    if samples.shape[0] < 2:
        raise DomainError("covariance needs at least 2 samples")
    centered = samples - samples.mean(dim=0, keepdim=True)
    cov = centered.T @ centered / samples.shape[0]
    return 0.5 * (cov + cov.T)


def dip_penalty(cov, lambda_od, lambda_d):
    diag = torch.diagonal(cov)
    off = cov - torch.diag(diag)
    return lambda_od * off.pow(2).sum() + lambda_d * (diag - 1.0).pow(2).sum()


def _log_density_gaussian(z, mu, logvar):
    return -0.5 * (math.log(2 * math.pi) + logvar + (z - mu).pow(2) * torch.exp(-logvar))


def btc_decomposition(enc: EncoderOutput, z, dataset_size):
    """Minibatch-weighted-sampling estimates of (index-code MI, TC, dimension-wise KL).

    At the sample level the three terms sum to mean(log q(z|x) - log p(z)),
    a single-sample estimate of the KL to the prior.
    """
    n = z.shape[0]
    if n < 2:
        raise DomainError("total-correlation estimate needs a batch of at least 2")
    if dataset_size < n:
        raise DomainError("dataset_size must be >= batch size")
    mu, logvar = enc
    # log q(z_i | x_j) per dimension: (n, n, d)
    log_qz_pairs = _log_density_gaussian(z[:, None, :], mu[None, :, :], logvar[None, :, :])
    log_nm = math.log(dataset_size * n)
    log_qz = torch.logsumexp(log_qz_pairs.sum(dim=2), dim=1) - log_nm
    log_qz_marginals = (torch.logsumexp(log_qz_pairs, dim=1) - log_nm).sum(dim=1)
    log_qz_x = _log_density_gaussian(z, mu, logvar).sum(dim=1)
    log_pz = _log_density_gaussian(z, torch.zeros_like(z), torch.zeros_like(z)).sum(dim=1)
    mi = (log_qz_x - log_qz).mean()
    tc = (log_qz - log_qz_marginals).mean()
    dwkl = (log_qz_marginals - log_pz).mean()
    return mi, tc, dwkl


def total_correlation(enc: EncoderOutput, z, dataset_size):
    return btc_decomposition(enc, z, dataset_size)[1]


def btc_reg(enc: EncoderOutput, z, beta, dataset_size):
    """Closed-form KL plus (beta - 1) times the estimated total correlation.

    Equivalent to weighting only the TC component of the KL decomposition by beta.
    """
    tc = total_correlation(enc, z, dataset_size)
    return kl_to_prior(enc) + (beta - 1.0) * tc
