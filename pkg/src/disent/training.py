"""Seeded training loop, FactorVAE alternating updates, and checkpoints."""
from __future__ import annotations

import base64
import csv
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from . import regularizers as R
from .data import DatasetSpec, GroundTruthDataset
from .errors import ConfigurationError, IntegrityError, NonFiniteLossError
from .representation import encode_dataset  # noqa: F401  (re-exported)
from .vae import ModelConfig, build_model, decode, encode, kl_to_prior, reconstruction_loss, reparameterize

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "recon", "kl", "reg", "tc", "disc_loss")
BATCHED_KINDS = ("factor", "btc", "dip_i", "dip_ii")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    regularizer: R.RegularizerConfig = field(default_factory=R.RegularizerConfig)
    discriminator: R.DiscriminatorConfig = field(default_factory=lambda: R.DiscriminatorConfig(hidden_width=256))

    def validate(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.regularizer.kind in BATCHED_KINDS and self.batch_size < 2:
            raise ConfigurationError(f"kind {self.regularizer.kind!r} needs batch_size >= 2")
        return self

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "regularizer": self.regularizer.to_dict(),
            "discriminator": self.discriminator.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["regularizer"] = R.RegularizerConfig(**d.get("regularizer", {}))
        d["discriminator"] = R.DiscriminatorConfig(**d.get("discriminator", {}))
        return cls(**d)


class LossTrace(list):
    """Per-step loss records; optionally mirrored to an append-only CSV."""

    def __init__(self, path=None):
        super().__init__()
        self.path = path
        if path is not None and not os.path.exists(path):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(TRACE_COLUMNS)

    def append(self, record):
        super().append(record)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(record.get(c)) for c in TRACE_COLUMNS])

    def column(self, name):
        return np.array([r[name] for r in self], dtype=np.float64)


def _fmt(v):
    if v is None:
        return ""
    return repr(int(v)) if isinstance(v, (int, np.integer)) else format(float(v), ".17g")


def read_trace(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else (float(v) if v != "" else None)) for k, v in r.items()}
            for r in rows]


class _ImageBank:
    """Renders training batches, from a pre-rendered grid when it fits in memory."""

    _cache: Dict[DatasetSpec, np.ndarray] = {}
    max_bytes = 256 * 2 ** 20

    def __init__(self, dataset: GroundTruthDataset):
        self.dataset = dataset
        self.grid = None
        h, w = dataset.image_shape
        if len(dataset) * h * w * 4 <= self.max_bytes:
            grid = self._cache.get(dataset.spec)
            if grid is None:
                grid = np.concatenate([dataset.render_batch(c) for c in
                                       np.array_split(dataset.all_factors(), max(1, len(dataset) // 4096))])
                self._cache[dataset.spec] = grid
            self.grid = grid

    def __call__(self, factors):
        if self.grid is None:
            return torch.from_numpy(self.dataset.render_batch(factors))
        idx = np.ravel_multi_index(factors.T, self.dataset.cardinalities)
        return torch.from_numpy(self.grid[idx])


class RunState:
    """Everything needed to continue a run exactly: parameters, moments, rngs, step."""

    def __init__(self, config: TrainConfig, dataset_spec: Optional[DatasetSpec] = None):
        self.config = config
        self.dataset_spec = dataset_spec
        self.step = 0
        seeds = np.random.SeedSequence(config.seed).spawn(6)
        model_seed, disc_seed, data_seed, disc_data_seed, eps_seed, disc_eps_seed = (
            int(s.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for s in seeds)
        self.model = build_model(config.model, torch.Generator().manual_seed(model_seed))
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate,
                                          betas=(config.beta1, config.beta2))
        self.discriminator = None
        self.disc_optimizer = None
        if config.regularizer.kind == "factor":
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(disc_seed)
                self.discriminator = R.Discriminator(config.model.latent_dim, config.discriminator,
                                                     config.model.activation_slope)
            dc = config.discriminator
            self.disc_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=dc.learning_rate,
                                                   betas=(dc.beta1, dc.beta2))
        self.data_rng = np.random.default_rng(data_seed)
        self.disc_rng = np.random.default_rng(disc_data_seed)
        self.eps_gen = torch.Generator().manual_seed(eps_seed)
        self.disc_eps_gen = torch.Generator().manual_seed(disc_eps_seed)


def init_state(config: TrainConfig, dataset: Optional[GroundTruthDataset] = None) -> RunState:
    config.validate()
    return RunState(config, dataset.spec if dataset is not None else None)


def _vae_terms(state: RunState, x, eps):
    enc = encode(state.model, x)
    z = reparameterize(enc, eps)
    logits = decode(state.model, z)
    return enc, z, reconstruction_loss(logits, x), kl_to_prior(enc)


def _check_finite(state, record):
    if not all(math.isfinite(v) for k, v in record.items() if v is not None and k != "step"):
        raise NonFiniteLossError(record)


def _draw_batch(state: RunState, bank, rng, gen):
    cfg = state.config
    factors = bank.dataset.sample_factors(cfg.batch_size, rng)
    eps = torch.randn(cfg.batch_size, cfg.model.latent_dim, generator=gen)
    return bank(factors), eps


def vae_step(state: RunState, batch, dataset_size: int) -> dict:
    """One update of encoder/decoder for every kind except ``factor``."""
    reg_cfg = state.config.regularizer
    x, eps = batch
    state.model.train()
    enc, z, recon, kl = _vae_terms(state, x, eps)
    tc = torch.zeros(())
    kind = reg_cfg.kind
    if kind == "beta":
        reg = R.beta_reg(kl, reg_cfg.beta)
    elif kind == "annealed":
        cap = R.capacity_at(state.step, reg_cfg.c_max, reg_cfg.anneal_steps)
        reg = R.annealed_reg(kl, reg_cfg.gamma, cap)
    elif kind in ("dip_i", "dip_ii"):
        samples = enc.mu if kind == "dip_i" else z
        tc = R.dip_penalty(R.latent_covariance(samples, "mu" if kind == "dip_i" else "z"),
                           reg_cfg.lambda_od, reg_cfg.lambda_d)
        reg = kl + tc
    elif kind == "btc":
        tc = R.total_correlation(enc, z, dataset_size)
        reg = kl + (reg_cfg.beta - 1.0) * tc
    else:
        raise ConfigurationError(f"vae_step does not handle kind {kind!r}")
    loss = recon + reg
    record = {"step": state.step, "recon": recon.item(), "kl": kl.item(), "reg": reg.item(),
              "tc": tc.item(), "disc_loss": None}
    _check_finite(state, record)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return record


def factorvae_step(state: RunState, vae_batch, disc_batch) -> dict:
    """Alternating FactorVAE update.

    A: encoder/decoder on recon + kl + gamma * tc using ``vae_batch``; the
    discriminator is frozen, so gradients reach it only through z.
    B: discriminator on z of ``disc_batch`` against its dimension-wise permutation.
    """
    if state.discriminator is None:
        raise ConfigurationError("factorvae_step needs a run configured with kind='factor'")
    if vae_batch[0].shape[0] < 2 or disc_batch[0].shape[0] < 2:
        raise ConfigurationError("FactorVAE updates need batch_size >= 2")
    gamma = state.config.regularizer.gamma
    disc = state.discriminator
    state.model.train()
    x, eps = vae_batch
    enc, z, recon, kl = _vae_terms(state, x, eps)
    disc.requires_grad_(False)
    try:
        tc = R.tc_estimate(disc(z))
        reg = R.factor_vae_reg(kl, gamma, tc)
        loss = recon + reg
        record = {"step": state.step, "recon": recon.item(), "kl": kl.item(), "reg": reg.item(),
                  "tc": tc.item(), "disc_loss": None}
        _check_finite(state, record)
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
    finally:
        disc.requires_grad_(True)

    x2, eps2 = disc_batch
    with torch.no_grad():
        z2 = reparameterize(encode(state.model, x2), eps2)
    z_perm = R.permute_dims(z2, state.disc_rng)
    d_loss = R.discriminator_loss(disc(z2), disc(z_perm))
    record["disc_loss"] = d_loss.item()
    _check_finite(state, record)
    state.disc_optimizer.zero_grad(set_to_none=True)
    d_loss.backward()
    state.disc_optimizer.step()
    state.step += 1
    return record


def run_steps(state: RunState, dataset: GroundTruthDataset, until: int, trace: Optional[LossTrace] = None,
              bank=None) -> LossTrace:
    """Advance ``state`` until ``state.step == until``, appending one record per step."""
    trace = LossTrace() if trace is None else trace
    bank = _ImageBank(dataset) if bank is None else bank
    dataset_size = len(dataset)
    factor = state.config.regularizer.kind == "factor"
    while state.step < until:
        batch = _draw_batch(state, bank, state.data_rng, state.eps_gen)
        if factor:
            disc_batch = _draw_batch(state, bank, state.disc_rng, state.disc_eps_gen)
            trace.append(factorvae_step(state, batch, disc_batch))
        else:
            trace.append(vae_step(state, batch, dataset_size))
    return trace


def train(dataset: GroundTruthDataset, config: TrainConfig, trace_path=None):
    """Train from scratch for ``config.steps`` updates. Returns (model, trace)."""
    state = init_state(config, dataset)
    trace = run_steps(state, dataset, config.steps, LossTrace(trace_path))
    return state.model, trace


# ---------------------------------------------------------------------------
# Checkpoints: magic, little-endian u64 manifest length, JSON manifest, then
# raw little-endian float32 tensor payloads.

_MAGIC = b"DISENTCK\x01"


def _named_tensors(state: RunState):
    out = [(f"model.{k}", v) for k, v in state.model.state_dict().items()]
    out += _optimizer_tensors("opt", state.optimizer)
    if state.discriminator is not None:
        out += [(f"disc.{k}", v) for k, v in state.discriminator.state_dict().items()]
        out += _optimizer_tensors("disc_opt", state.disc_optimizer)
    return out


def _optimizer_tensors(prefix, opt):
    sd = opt.state_dict()
    out = []
    for idx in sorted(sd["state"]):
        for key, v in sorted(sd["state"][idx].items()):
            out.append((f"{prefix}.state.{idx}.{key}", torch.as_tensor(v, dtype=torch.float32)))
    return out


def _rng_state(state: RunState):
    return {
        "data_rng": state.data_rng.bit_generator.state,
        "disc_rng": state.disc_rng.bit_generator.state,
        "eps_gen": base64.b64encode(state.eps_gen.get_state().numpy().tobytes()).decode(),
        "disc_eps_gen": base64.b64encode(state.disc_eps_gen.get_state().numpy().tobytes()).decode(),
    }


def save_checkpoint(state: RunState, path, run_id: str = "") -> None:
    tensors = []
    chunks = []
    offset = 0
    for name, t in _named_tensors(state):
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
                        "sha256": hashlib.sha256(raw).hexdigest()})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": "disent-checkpoint",
        "version": 1,
        "run_id": run_id,
        "step": state.step,
        "config": state.config.to_dict(),
        "dataset": state.dataset_spec.to_dict() if state.dataset_spec is not None else None,
        "optimizer_groups": {
            "opt": state.optimizer.state_dict()["param_groups"],
            "disc_opt": state.disc_optimizer.state_dict()["param_groups"] if state.disc_optimizer else None,
        },
        "rng": _rng_state(state),
        "tensors": tensors,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


def _read_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    head = len(_MAGIC) + 8
    if len(data) < head or not data.startswith(_MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint (bad magic or truncated header)")
    (mlen,) = struct.unpack("<Q", data[len(_MAGIC):head])
    if len(data) < head + mlen:
        raise IntegrityError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[head:head + mlen])
    except ValueError as e:
        raise IntegrityError(f"{path}: unreadable manifest") from e
    payload = data[head + mlen:]
    if len(payload) != manifest.get("payload_bytes"):
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    tensors = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"{path}: checksum mismatch for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    return manifest, tensors


def _load_optimizer(opt, prefix, groups, tensors):
    state = {}
    for name, t in tensors.items():
        if name.startswith(prefix + ".state."):
            _, _, idx, key = name.split(".", 3)
            state.setdefault(int(idx), {})[key] = t.reshape(()) if key == "step" else t
    opt.load_state_dict({"state": state, "param_groups": groups})


def load_checkpoint(path) -> RunState:
    manifest, tensors = _read_checkpoint(path)
    config = TrainConfig.from_dict(manifest["config"])
    spec = None
    if manifest.get("dataset"):
        spec = DatasetSpec.from_dict(manifest["dataset"])
    state = RunState(config, spec)
    state.step = int(manifest["step"])
    state.model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    groups = manifest["optimizer_groups"]
    _load_optimizer(state.optimizer, "opt", groups["opt"], tensors)
    if state.discriminator is not None:
        state.discriminator.load_state_dict(
            {k[len("disc."):]: v for k, v in tensors.items() if k.startswith("disc.")})
        _load_optimizer(state.disc_optimizer, "disc_opt", groups["disc_opt"], tensors)
    rng = manifest["rng"]
    state.data_rng.bit_generator.state = rng["data_rng"]
    state.disc_rng.bit_generator.state = rng["disc_rng"]
    for key, gen in (("eps_gen", state.eps_gen), ("disc_eps_gen", state.disc_eps_gen)):
        raw = np.frombuffer(base64.b64decode(rng[key]), dtype=np.uint8).copy()
        gen.set_state(torch.from_numpy(raw))
    return state
