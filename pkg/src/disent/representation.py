"""Representation functions and the (codes, factors) matrix the metrics consume."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .data import FactorSpace, GroundTruthDataset
from .errors import DomainError
from .vae import VAE, encode

RepresentationFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class RepresentationMatrix:
    codes: np.ndarray
    factors: np.ndarray
    factor_space: FactorSpace

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        self.factors = np.asarray(self.factors, dtype=np.int64)
        if self.codes.ndim != 2 or self.factors.ndim != 2:
            raise DomainError("codes and factors must be 2-D")
        if self.codes.shape[0] != self.factors.shape[0]:
            raise DomainError("codes and factors have different row counts")
        if self.factors.shape[1] != self.factor_space.num_factors:
            raise DomainError("factor columns do not match the factor space")
        card = np.asarray(self.factor_space.cardinalities)
        if np.any(self.factors < 0) or np.any(self.factors >= card):
            raise DomainError("factor value out of range")
        if not np.all(np.isfinite(self.codes)):
            raise DomainError("codes must be finite")

    @property
    def num_codes(self):
        return self.codes.shape[1]

    def __len__(self):
        return self.codes.shape[0]


def identity_representation(factors: np.ndarray) -> np.ndarray:
    """Oracle representation whose code is the factor tuple itself."""
    return np.asarray(factors, dtype=np.float64)


def model_representation(model: VAE, dataset: GroundTruthDataset, batch_size: int = 512) -> RepresentationFn:
    """Posterior-mean representation of a trained model, as a function of factors."""

    def represent(factors):
        model.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(factors), batch_size):
                x = torch.from_numpy(dataset.render_batch(factors[start:start + batch_size]))
                out.append(encode(model, x).mu.double().numpy())
        return np.concatenate(out, axis=0)

    return represent


def as_representation_fn(model_or_fn, dataset) -> RepresentationFn:
    if isinstance(model_or_fn, VAE):
        return model_representation(model_or_fn, dataset)
    if callable(model_or_fn):
        return model_or_fn
    raise TypeError(f"cannot build a representation from {type(model_or_fn).__name__}")


def encode_dataset(model, dataset: GroundTruthDataset, n: int, rng: np.random.Generator) -> RepresentationMatrix:
    """Sample ``n`` factor tuples and pair them with their posterior-mean codes."""
    if n < 1:
        raise DomainError("n must be >= 1")
    fn = as_representation_fn(model, dataset)
    factors = dataset.sample_factors(n, rng)
    return RepresentationMatrix(fn(factors), factors, dataset.factor_space)
