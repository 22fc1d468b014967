"""Command-line entry point: ``disent {data dump,train,eval,sweep,report,rank}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import runner
from .data import build_dataset, dump_dataset
from .metrics import MetricConfig, dci, factor_vae_score, irs, mig, sap
from .representation import RepresentationMatrix, encode_dataset, model_representation
from .training import LossTrace, init_state, run_steps, save_checkpoint


def _spec_from(path):
    return runner.load_config(path) if path else runner.SweepSpec()


def cmd_data_dump(args):
    spec = _spec_from(args.spec)
    dataset = build_dataset(spec.dataset)
    factors = None
    if args.limit is not None:
        factors = dataset.sample_factors(args.limit, np.random.default_rng(args.seed))
    names = dump_dataset(dataset, args.out, factors)
    print(f"wrote {len(names)} images and factors.csv to {args.out}")


def cmd_train(args):
    spec = _spec_from(args.config)
    kind = args.kind or spec.default_kind or spec.kinds[0]
    latent_dim = args.latent_dim or spec.model.get("latent_dim") or spec.latent_dims[0]
    steps = args.steps or spec.train.get("steps") or max(spec.steps)
    config = runner.make_train_config(spec, kind, latent_dim, steps, args.seed)
    dataset = build_dataset(spec.dataset)
    out = args.out or os.path.join(spec.output_dir, "train", f"{kind}_d{latent_dim}_s{steps}_seed{args.seed}")
    os.makedirs(out, exist_ok=True)
    trace_path = os.path.join(out, "trace.csv")
    if os.path.exists(trace_path):
        os.remove(trace_path)
    state = init_state(config, dataset)
    run_steps(state, dataset, steps, LossTrace(trace_path))
    save_checkpoint(state, os.path.join(out, "final.ckpt"), run_id=os.path.basename(out))
    print(f"trained {kind} d={latent_dim} for {steps} steps; outputs in {out}")
    if not args.no_eval:
        from .metrics import evaluate_all

        report = evaluate_all(state.model, dataset, spec.metrics)
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        rep = encode_dataset(model_representation(state.model, dataset), dataset, spec.metrics.mig_samples,
                             np.random.default_rng(spec.metrics.seed))
        write_rep_csv(rep, os.path.join(out, "rep.csv"))
        print(json.dumps(report.to_dict(), indent=2))


def write_rep_csv(rep: RepresentationMatrix, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{j}" for j in range(rep.num_codes)] + [f"f{k}" for k in range(rep.factors.shape[1])])
        for z, f in zip(rep.codes, rep.factors):
            w.writerow([format(v, ".17g") for v in z] + [int(v) for v in f])


def read_rep_csv(path, factor_space=None) -> RepresentationMatrix:
    from .data import FactorSpace

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    zi = [i for i, h in enumerate(header) if h.startswith("z")]
    fi = [i for i, h in enumerate(header) if h.startswith("f")]
    data = np.array(rows, dtype=np.float64)
    factors = data[:, fi].astype(np.int64)
    if factor_space is None:
        card = tuple(int(max(2, factors[:, k].max() + 1)) for k in range(len(fi)))
        factor_space = FactorSpace(names=tuple(header[i] for i in fi), cardinalities=card)
    return RepresentationMatrix(data[:, zi], factors, factor_space)


def cmd_eval(args):
    cfg = runner.load_config(args.config).metrics if args.config else MetricConfig()
    rep = read_rep_csv(args.rep)
    rng = np.random.default_rng(cfg.seed)
    fv_rng, dci_rng = rng.spawn(2)
    d_score, completeness, informativeness = dci(rep, cfg, dci_rng)
    result = {
        "factor_vae": factor_vae_score(rep, None, cfg, fv_rng),
        "sap": sap(rep, cfg),
        "dci": d_score,
        "irs": irs(rep, cfg),
        "mig": mig(rep, cfg),
        "dci_completeness": completeness,
        "dci_informativeness": informativeness,
        "config": cfg.to_dict(),
    }
    text = json.dumps(result, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_sweep(args):
    spec = runner.load_config(args.config)
    records = runner.run_sweep(spec, workers=args.workers)
    runner.emit_csv(records, os.path.join(spec.output_dir, "results.csv"))
    rows = runner.aggregate(records)
    runner.emit_csv(rows, os.path.join(spec.output_dir, "aggregate.csv"))
    failed = [r for r in records if not r.ok]
    print(f"{len(records)} runs, {len(failed)} failed; results in {spec.output_dir}")
    for r in failed:
        print(f"  {r.run_id}: {r.error}")


def cmd_report(args):
    records = runner.load_records(args.inp)
    os.makedirs(args.out, exist_ok=True)
    runner.emit_csv(records, os.path.join(args.out, "results.csv"))
    rows = runner.aggregate(records)
    runner.emit_csv(rows, os.path.join(args.out, "aggregate.csv"))
    path = runner.emit_report(rows, args.out)
    print(f"report written to {path}")


def cmd_rank(args):
    rows = runner.read_table_csv(args.inp)
    ordered, winner = runner.rank_rows(rows)
    print(runner.format_table(ordered, winner), end="")
    print(f"winner: {winner.label()}")


def build_parser():
    p = argparse.ArgumentParser(prog="disent", description="Disentangled representation learning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset utilities")
    data_sub = data.add_subparsers(dest="data_command", required=True)
    dump = data_sub.add_parser("dump", help="write PNGs and factors.csv")
    dump.add_argument("--spec", help="experiment config (TOML); [dataset] section is used")
    dump.add_argument("--out", required=True)
    dump.add_argument("--limit", type=int, help="dump a random sample of this size instead of the full grid")
    dump.add_argument("--seed", type=int, default=0)
    dump.set_defaults(func=cmd_data_dump)

    train = sub.add_parser("train", help="train one model")
    train.add_argument("--config")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--kind")
    train.add_argument("--latent-dim", type=int)
    train.add_argument("--steps", type=int)
    train.add_argument("--out")
    train.add_argument("--no-eval", action="store_true")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a representation CSV")
    ev.add_argument("--rep", required=True, help="CSV with columns z0..z{d-1}, f0..f{K-1}")
    ev.add_argument("--out")
    ev.add_argument("--config", help="experiment config supplying [metrics]")
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="run a config-driven sweep")
    sw.add_argument("--config", required=True)
    sw.add_argument("--workers", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="aggregate a results.jsonl into tables and charts")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    rank = sub.add_parser("rank", help="rank rows of a results or table-shaped CSV")
    rank.add_argument("--in", dest="inp", required=True)
    rank.set_defaults(func=cmd_rank)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
