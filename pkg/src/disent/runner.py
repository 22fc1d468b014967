"""Config-driven sweeps, run records, across-seed aggregation and ranking."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import multiprocessing
import os
import re
import time
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import DatasetSpec, build_dataset
from .errors import ConfigurationError, SchemaError
from .metrics import METRIC_NAMES, MetricConfig, evaluate_all
from .regularizers import DiscriminatorConfig, RegularizerConfig
from .training import LossTrace, TrainConfig, init_state, run_steps, save_checkpoint
from .vae import ModelConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("run_id", "kind", "latent_dim", "steps", "seed", "factor_vae", "sap", "dci", "irs",
                  "mig", "recon", "wall_time")
AGG_METRICS = METRIC_NAMES + ("recon",)
LONG_RUN_STEPS = 100_000
RECON_WINDOW = 100


@dataclass
class SweepSpec:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    kinds: List[str] = field(default_factory=lambda: ["beta", "factor"])
    latent_dims: List[int] = field(default_factory=lambda: [8, 16, 32])
    steps: List[int] = field(default_factory=lambda: [5000, 20000])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    regularizer_overrides: List[dict] = field(default_factory=lambda: [{}])
    kind_params: Dict[str, dict] = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    discriminator: dict = field(default_factory=lambda: {"hidden_width": 256})
    metrics: MetricConfig = field(default_factory=MetricConfig)
    output_dir: str = "runs"
    default_kind: Optional[str] = None


def load_config(path) -> SweepSpec:
    """Read a TOML experiment config with [dataset], [model], [regularizer], [train], [sweep], [metrics]."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - {"dataset", "model", "regularizer", "train", "sweep", "metrics"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    reg = dict(raw.get("regularizer", {}))
    kind_params = {k: reg.pop(k) for k in list(reg) if isinstance(reg[k], dict)}
    default_kind = reg.pop("kind", None)
    # Scalar entries under [regularizer] apply to every kind.
    for k in kind_params:
        kind_params[k] = {**reg, **kind_params[k]}
    kind_params.setdefault("__all__", reg)
    train = dict(raw.get("train", {}))
    disc = dict(train.pop("discriminator", {"hidden_width": 256}))
    sweep = dict(raw.get("sweep", {}))
    spec = SweepSpec(
        dataset=DatasetSpec.from_dict(raw.get("dataset", {})),
        model=dict(raw.get("model", {})),
        train=train,
        discriminator=disc,
        kind_params=kind_params,
        metrics=MetricConfig(**raw.get("metrics", {})),
        default_kind=default_kind,
    )
    for name in ("kinds", "latent_dims", "steps", "seeds", "regularizer_overrides"):
        if name in sweep:
            setattr(spec, name, list(sweep.pop(name)))
    if "output_dir" in sweep:
        out = sweep.pop("output_dir")
        spec.output_dir = out if os.path.isabs(out) else os.path.join(os.path.dirname(os.path.abspath(path)), out)
    if sweep:
        raise ConfigurationError(f"unknown [sweep] keys: {sorted(sweep)}")
    return spec


def regularizer_for(spec: SweepSpec, kind: str, overrides: Optional[dict] = None) -> RegularizerConfig:
    params = dict(spec.kind_params.get("__all__", {}))
    params.update(spec.kind_params.get(kind, {}))
    params.update(overrides or {})
    return RegularizerConfig.for_kind(kind, **params)


def make_train_config(spec: SweepSpec, kind: str, latent_dim: int, steps: int, seed: int,
                      overrides: Optional[dict] = None) -> TrainConfig:
    model = ModelConfig.from_dict({**spec.model, "latent_dim": latent_dim,
                                   "image_size": spec.dataset.image_size})
    train = {k: v for k, v in spec.train.items() if k not in ("steps", "seed")}
    return TrainConfig(steps=steps, seed=seed, model=model, regularizer=regularizer_for(spec, kind, overrides),
                       discriminator=DiscriminatorConfig(**spec.discriminator), **train)


def expand_sweep(spec: SweepSpec) -> List[TrainConfig]:
    """Cartesian product kinds x latent_dims x steps x overrides x seeds, in that order."""
    for name in ("kinds", "latent_dims", "steps", "seeds", "regularizer_overrides"):
        if not getattr(spec, name):
            raise ConfigurationError(f"sweep axis {name!r} is empty")
    if len(set(spec.seeds)) != len(spec.seeds):
        raise ConfigurationError(f"duplicate seeds in {spec.seeds}")
    if any(s > LONG_RUN_STEPS for s in spec.steps):
        warnings.warn("step counts above 100k requested; expect very long CPU runtimes", RuntimeWarning)
    return [make_train_config(spec, kind, d, s, seed, ov)
            for kind, d, s, ov, seed in itertools.product(spec.kinds, spec.latent_dims, spec.steps,
                                                          spec.regularizer_overrides, spec.seeds)]


def config_hash(config: TrainConfig, dataset: DatasetSpec, metrics: MetricConfig) -> str:
    """Stable digest of the canonicalized run configuration."""
    canonical = json.dumps({"train": config.to_dict(), "dataset": dataset.to_dict(),
                            "metrics": metrics.to_dict()}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def make_run_id(config: TrainConfig, digest: str) -> str:
    return (f"{config.regularizer.kind}_d{config.model.latent_dim}_s{config.steps}"
            f"_seed{config.seed}_{digest[:8]}")


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    kind: str
    latent_dim: int
    steps: int
    seed: int
    factor_vae: Optional[float] = None
    sap: Optional[float] = None
    dci: Optional[float] = None
    irs: Optional[float] = None
    mig: Optional[float] = None
    recon: Optional[float] = None
    wall_time: Optional[float] = None
    dci_completeness: Optional[float] = None
    dci_informativeness: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self):
        return self.error is None and all(getattr(self, m) is not None for m in METRIC_NAMES)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _error_record(config, digest, message) -> RunRecord:
    return RunRecord(run_id=make_run_id(config, digest), config_hash=digest, kind=config.regularizer.kind,
                     latent_dim=config.model.latent_dim, steps=config.steps, seed=config.seed, error=message)


def _prefix_key(config: TrainConfig) -> str:
    return json.dumps(replace(config, steps=0).to_dict(), sort_keys=True)


def _run_group(dataset_dict, metrics_dict, base_dict, step_list, out_dir):
    """Train once to the largest step count, evaluating at every requested prefix.

    Training is prefix-consistent (nothing depends on the total budget), so the
    state after s steps equals that of a standalone s-step run with the same seed.
    """
    import torch

    torch.set_num_threads(1)
    dataset_spec = DatasetSpec.from_dict(dataset_dict)
    metrics = MetricConfig(**metrics_dict)
    base = TrainConfig.from_dict(base_dict)
    dataset = build_dataset(dataset_spec)
    records = []
    configs = [replace(base, steps=s) for s in sorted(step_list)]
    digests = [config_hash(c, dataset_spec, metrics) for c in configs]
    group_dir = os.path.join(out_dir, "runs", make_run_id(configs[-1], digests[-1]))
    os.makedirs(group_dir, exist_ok=True)
    trace_path = os.path.join(group_dir, "trace.csv")
    if os.path.exists(trace_path):
        os.remove(trace_path)
    start = time.perf_counter()
    try:
        state = init_state(configs[-1], dataset)
        trace = LossTrace(trace_path)
    except Exception as e:  # noqa: BLE001 - recorded, never raised past the sweep
        return [_error_record(c, h, f"{type(e).__name__}: {e}") for c, h in zip(configs, digests)]
    for i, (config, digest) in enumerate(zip(configs, digests)):
        run_id = make_run_id(config, digest)
        try:
            run_steps(state, dataset, config.steps, trace)
            save_checkpoint(state, os.path.join(group_dir, f"step{config.steps}.ckpt"), run_id)
        except Exception as e:  # noqa: BLE001
            # The shared state is unusable past this point, so every longer prefix fails too.
            msg = f"{type(e).__name__}: {e}"
            records += [_error_record(c, h, msg) for c, h in zip(configs[i:], digests[i:])]
            break
        recon = float(np.mean([r["recon"] for r in trace[max(0, config.steps - RECON_WINDOW):config.steps]]))
        record = RunRecord(run_id=run_id, config_hash=digest, kind=config.regularizer.kind,
                           latent_dim=config.model.latent_dim, steps=config.steps, seed=config.seed,
                           recon=recon, wall_time=time.perf_counter() - start)
        try:
            for k, v in evaluate_all(state.model, dataset, metrics).to_dict().items():
                setattr(record, k, v)
        except Exception as e:  # noqa: BLE001 - a failed evaluation does not stop training
            record.error = f"{type(e).__name__}: {e}"
        records.append(record)
    return records


def load_records(path) -> List[RunRecord]:
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        return [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def run_sweep(spec: SweepSpec, workers: int = 1) -> List[RunRecord]:
    """Run every config not already recorded in ``<output_dir>/results.jsonl``.

    Returns one record per expanded config, in expansion order.
    """
    configs = expand_sweep(spec)
    os.makedirs(spec.output_dir, exist_ok=True)
    results_path = os.path.join(spec.output_dir, "results.jsonl")
    with open(results_path, "a"):
        pass
    done = {r.config_hash: r for r in load_records(results_path)}
    digests = [config_hash(c, spec.dataset, spec.metrics) for c in configs]

    groups: Dict[str, dict] = {}
    new_records = []
    for c, h in zip(configs, digests):
        if h in done:
            continue
        if c.steps < 1:
            new_records.append(_error_record(c, h, f"ConfigurationError: steps must be >= 1, got {c.steps}"))
            continue
        g = groups.setdefault(_prefix_key(c), {"base": c, "steps": set()})
        g["steps"].add(c.steps)
        if c.steps > g["base"].steps:
            g["base"] = c

    def persist(recs):
        with open(results_path, "a") as fh:
            for r in recs:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
                done[r.config_hash] = r

    persist(new_records)
    jobs = [(spec.dataset.to_dict(), spec.metrics.to_dict(), g["base"].to_dict(), sorted(g["steps"]),
             spec.output_dir) for g in groups.values()]
    if jobs:
        log.info("running %d training groups (%d configs) on %d workers", len(jobs),
                 sum(len(j[3]) for j in jobs), workers)
    if workers <= 1:
        for job in jobs:
            persist(_run_group(*job))
    elif jobs:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = {pool.submit(_run_group, *job): job for job in jobs}
            for fut in as_completed(futures):
                job = futures[fut]
                try:
                    persist(fut.result())
                except Exception as e:  # noqa: BLE001 - a crashed worker becomes error rows
                    base = TrainConfig.from_dict(job[2])
                    recs = []
                    for s in job[3]:
                        c = replace(base, steps=s)
                        recs.append(_error_record(c, config_hash(c, spec.dataset, spec.metrics),
                                                  f"{type(e).__name__}: {e}"))
                    persist(recs)
    return [done[h] for h in digests]


# ---------------------------------------------------------------------------
# Aggregation and ranking


@dataclass
class AggregateRow:
    key: dict
    mean: dict
    std: Optional[dict]
    n_seeds: int

    def label(self):
        parts = [f"{k}={v}" for k, v in self.key.items() if v is not None]
        return ", ".join(parts)


def aggregate(records: Sequence[RunRecord], group_by=("kind", "latent_dim", "steps")) -> List[AggregateRow]:
    """Per-group mean and (sample) std across seeds; error rows are skipped."""
    groups: Dict[tuple, list] = {}
    for r in records:
        if not r.ok:
            continue
        groups.setdefault(tuple(getattr(r, g) for g in group_by), []).append(r)
    rows = []
    for key, recs in groups.items():
        mean, std = {}, {}
        for m in AGG_METRICS:
            vals = np.array([getattr(r, m) for r in recs], dtype=np.float64)
            mean[m] = float(vals.mean())
            std[m] = float(vals.std(ddof=1)) if len(vals) >= 2 else None
        rows.append(AggregateRow(dict(zip(group_by, key)), mean, std if len(recs) >= 2 else None, len(recs)))
    return rows


def _size_key(row: AggregateRow):
    return tuple(v if isinstance(v, (int, float)) else 0 for v in
                 (row.key.get("latent_dim"), row.key.get("steps")))


def row_score(row: AggregateRow) -> float:
    missing = [m for m in METRIC_NAMES if row.mean.get(m) is None]
    if missing:
        raise SchemaError(f"row {row.label()} lacks metrics {missing}")
    return float(sum(row.mean[m] for m in METRIC_NAMES) / len(METRIC_NAMES))


def rank_rows(rows: Sequence[AggregateRow]):
    """Order rows by the unweighted mean of the five metrics, best first.

    Ties go to the smaller configuration (latent_dim, then steps). Returns
    (ordered_rows, winner).
    """
    if not rows:
        raise SchemaError("nothing to rank")
    scored = [(row_score(r), r) for r in rows]
    ordered = [r for _, r in sorted(scored, key=lambda t: (-t[0], _size_key(t[1])))]
    return ordered, ordered[0]


# ---------------------------------------------------------------------------
# CSV and report output


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (bool, str)):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _atomic_write(path, write):
    tmp = f"{path}.partial"
    try:
        with open(tmp, "w", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def aggregate_columns(group_by=("kind", "latent_dim", "steps")):
    cols = list(group_by) + ["n_seeds"]
    for m in AGG_METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    return cols


def emit_csv(items, path, group_by=("kind", "latent_dim", "steps")) -> None:
    """Write RunRecords (results schema) or AggregateRows (aggregate schema)."""
    items = list(items)
    if items and isinstance(items[0], AggregateRow):
        group_by = tuple(items[0].key)
        columns = aggregate_columns(group_by)

        def rows():
            for a in items:
                row = [a.key.get(g) for g in group_by] + [a.n_seeds]
                for m in AGG_METRICS:
                    row += [a.mean.get(m), (a.std or {}).get(m)]
                yield row
    elif items:
        columns = list(RESULT_COLUMNS)

        def rows():
            for r in items:
                yield [getattr(r, c) for c in RESULT_COLUMNS]
    else:
        columns = list(RESULT_COLUMNS)

        def rows():
            return iter(())

    def write(fh):
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows():
            w.writerow([_fmt(v) for v in row])

    _atomic_write(path, write)


def _parse_num(v, integer=False):
    if v is None or v == "":
        return None
    return int(v) if integer else float(v)


def read_results_csv(path) -> List[RunRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for row in reader:
            out.append(RunRecord(
                run_id=row["run_id"], config_hash="", kind=row["kind"],
                latent_dim=_parse_num(row["latent_dim"], True), steps=_parse_num(row["steps"], True),
                seed=_parse_num(row["seed"], True),
                **{m: _parse_num(row[m]) for m in ("factor_vae", "sap", "dci", "irs", "mig", "recon", "wall_time")},
            ))
    return out


_HEADER_ALIASES = {
    "factorvae": "factor_vae", "factor_vae": "factor_vae", "factorvae score": "factor_vae",
    "sap score": "sap", "sap": "sap", "dci": "dci", "irs": "irs", "mig": "mig",
    "num. of latent": "latent_dim", "latent_dim": "latent_dim", "latent": "latent_dim",
    "training step": "steps", "steps": "steps", "step": "steps",
    "vae variation": "kind", "kind": "kind", "model": "kind",
}


def _parse_count(text):
    """'1000k' -> 1000000, 'FactorVAE (500k)' -> 500000, '512' -> 512."""
    m = re.search(r"(\d+(?:\.\d+)?)\s*([kKmM]?)\)?\s*$", str(text).strip())
    if not m:
        raise SchemaError(f"cannot read a count from {text!r}")
    mult = {"": 1, "k": 1000, "m": 1000000}[m.group(2).lower()]
    return int(round(float(m.group(1)) * mult))


def read_table_csv(path) -> List[AggregateRow]:
    """Read a results CSV (aggregated across seeds) or a table-shaped CSV with one row per setting."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if set(RESULT_COLUMNS) <= set(header):
            return aggregate([r for r in read_results_csv(path)])
        mapping = {h: _HEADER_ALIASES.get(h.strip().lower()) for h in header}
        present = set(mapping.values())
        missing = [m for m in METRIC_NAMES if m not in present]
        if missing:
            raise SchemaError(f"{path}: missing metric columns {missing}")
        rows = []
        for raw in reader:
            key, mean = {}, {}
            for h, v in raw.items():
                name = mapping.get(h)
                if name in METRIC_NAMES:
                    mean[name] = _parse_num(v.strip())
                elif name in ("latent_dim", "steps"):
                    key[name] = _parse_count(v)
                elif name == "kind":
                    key[name] = v.strip()
            rows.append(AggregateRow(key, mean, None, 1))
    return rows


def format_table(rows: Sequence[AggregateRow], winner: Optional[AggregateRow] = None) -> str:
    """Markdown table with one row per setting and the winner in bold."""
    header = "| setting | FactorVAE | sap score | dci | irs | mig | mean |"
    lines = [header, "|" + "---|" * 7]
    for row in rows:
        cells = []
        for m in METRIC_NAMES:
            v = row.mean.get(m)
            s = "" if v is None else f"{v:.4f}"
            if row.std and row.std.get(m) is not None:
                s += f" ± {row.std[m]:.4f}"
            cells.append(s)
        cells.append(f"{row_score(row):.4f}")
        if row is winner:
            cells = [f"**{c}**" for c in cells]
        lines.append(f"| {row.label()} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(rows: Sequence[AggregateRow], out_dir) -> str:
    """Write report.md (ranked table, winner bold) and one bar chart per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    rows = list(rows)
    path = os.path.join(out_dir, "report.md")
    if not rows:
        _atomic_write(path, lambda fh: fh.write("# Results\n\nNo completed runs.\n"))
        return path
    ordered, winner = rank_rows(rows)
    display = sorted(rows, key=lambda r: (str(r.key.get("kind")), _size_key(r)))
    text = ["# Results", "", format_table(display, winner),
            f"Winner (unweighted mean of the five metrics): **{winner.label()}**", ""]
    for m in METRIC_NAMES:
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(display)), 3))
        ax.bar(range(len(display)), [r.mean[m] for r in display],
               yerr=[(r.std or {}).get(m) or 0 for r in display], color="tab:blue")
        ax.set_xticks(range(len(display)))
        ax.set_xticklabels([r.label() for r in display], rotation=45, ha="right", fontsize=7)
        ax.set_ylabel(m)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, f"bar_{m}.png"), dpi=100)
        plt.close(fig)
        text.append(f"![{m}](bar_{m}.png)")
    _atomic_write(path, lambda fh: fh.write("\n".join(text) + "\n"))
    return path
