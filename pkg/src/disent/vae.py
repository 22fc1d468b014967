"""Convolutional encoder/decoder and the two terms of the variational bound."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 10
    activation_slope: float = 0.2
    conv_widths: Optional[Tuple[int, ...]] = None
    fc_width: int = 256
    image_size: int = 32

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ConfigurationError("latent_dim must be >= 2")
        if not 0.0 < self.activation_slope < 1.0:
            raise ConfigurationError("activation_slope must lie in (0, 1)")
        if self.conv_widths is None:
            widths = (32, 32, 64) if self.image_size == 32 else (32, 32, 64, 64)
            object.__setattr__(self, "conv_widths", widths)
        else:
            object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        if self.image_size % (2 ** len(self.conv_widths)):
            raise ConfigurationError("image_size must be divisible by 2**len(conv_widths)")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("conv_widths") is not None:
            d["conv_widths"] = tuple(d["conv_widths"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        return d


class EncoderOutput(NamedTuple):
    mu: torch.Tensor
    logvar: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        act = lambda: nn.LeakyReLU(cfg.activation_slope)
        layers, c_in = [], 1
        for w in cfg.conv_widths:
            layers += [nn.Conv2d(c_in, w, 4, stride=2, padding=1), act()]
            c_in = w
        self.conv = nn.Sequential(*layers)
        side = cfg.image_size // 2 ** len(cfg.conv_widths)
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(c_in * side * side, cfg.fc_width), act())
        self.mu = nn.Linear(cfg.fc_width, cfg.latent_dim)
        self.logvar = nn.Linear(cfg.fc_width, cfg.latent_dim)

    def forward(self, x):
        h = self.fc(self.conv(x.unsqueeze(1)))
        return EncoderOutput(self.mu(h), self.logvar(h))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        act = lambda: nn.LeakyReLU(cfg.activation_slope)
        widths = cfg.conv_widths
        self._side = cfg.image_size // 2 ** len(widths)
        self._c0 = widths[-1]
        self.fc = nn.Sequential(
            nn.Linear(cfg.latent_dim, cfg.fc_width), act(),
            nn.Linear(cfg.fc_width, self._c0 * self._side ** 2), act(),
        )
        layers = []
        chans = list(reversed(widths)) + [1]
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            layers.append(nn.ConvTranspose2d(a, b, 4, stride=2, padding=1))
            if i < len(chans) - 2:
                layers.append(act())
        self.deconv = nn.Sequential(*layers)

    def forward(self, z):
        h = self.fc(z).view(-1, self._c0, self._side, self._side)
        return self.deconv(h).squeeze(1)


class VAE(nn.Module):
    """Encoder q(z|x) and Bernoulli decoder p(x|z) with a N(0, I) prior."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x, eps):
        enc = encode(self, x)
        z = reparameterize(enc, eps)
        return enc, z, decode(self, z)


def build_model(cfg: ModelConfig, generator: Optional[torch.Generator] = None) -> VAE:
    """Construct a VAE with parameters drawn from ``generator``."""
    if generator is None:
        return VAE(cfg)
    # nn.Module init draws from the global RNG; fork it so callers stay isolated.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2 ** 62, (1,), generator=generator)))
        return VAE(cfg)


def encode(model: VAE, x: torch.Tensor) -> EncoderOutput:
    size = model.config.image_size
    if x.ndim != 3 or x.shape[0] == 0 or tuple(x.shape[1:]) != (size, size):
        raise DomainError(f"expected a non-empty (n, {size}, {size}) batch, got {tuple(x.shape)}")
    return model.encoder(x)


def reparameterize(enc: EncoderOutput, eps: torch.Tensor) -> torch.Tensor:
    if eps.shape != enc.mu.shape:
        raise DomainError(f"eps shape {tuple(eps.shape)} != mu shape {tuple(enc.mu.shape)}")
    return enc.mu + torch.exp(0.5 * enc.logvar) * eps


def decode(model: VAE, z: torch.Tensor) -> torch.Tensor:
    if z.ndim != 2 or z.shape[1] != model.config.latent_dim:
        raise DomainError(f"expected latent width {model.config.latent_dim}, got {tuple(z.shape)}")
    return model.decoder(z)


def reconstruction_loss(logits: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Negative Bernoulli log-likelihood, summed over pixels and averaged over the batch."""
    if logits.shape != x.shape:
        raise DomainError(f"logits {tuple(logits.shape)} and x {tuple(x.shape)} differ")
    if torch.any(x < 0) or torch.any(x > 1):
        raise DomainError("pixel intensities must lie in [0, 1]")
    return F.binary_cross_entropy_with_logits(logits, x, reduction="sum") / x.shape[0]


def kl_to_prior(enc: EncoderOutput) -> torch.Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)), summed over dims, averaged over batch."""
    mu, logvar = enc
    kl = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)
    return kl.sum(dim=1).mean()


def elbo_loss(recon, kl):
    return recon + kl
