"""Command-line entry point: gen, train, eval, sweep, explain.

Exit codes: 0 ok, 2 usage, 3 io, 4 schema, 5 divergence. Failures print one
JSON line ``{"error": kind, "code": n, "message": ...}`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attention import ABLATIONS, DECAYS, ablation
from .data import (DatasetConfig, SchemaError, SynthConfig, dump_jsonl, generate_synthetic,
                   load_jsonl, read_json, split_records, group_by_visits)
from .features import LabScaler
from .sequence import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .trainer import DivergenceError, OptimizerState, evaluate, explain, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SCHEMA, EXIT_DIVERGENCE = 0, 2, 3, 4, 5

MODEL_KEYS = ("d", "d_u", "d_v", "c1", "k1", "k2", "pool", "d_o")


@dataclass
class RunConfig:
    synthetic: SynthConfig = field(default_factory=SynthConfig)
    dataset: DatasetConfig | None = None
    model: dict = field(default_factory=dict)
    ablation: str = "tghoa"
    decay: str = "g2"
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    ratio: float = 0.8
    patience: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"run config: unknown keys {sorted(unknown)}")
        synth = SynthConfig.from_dict(d.pop("synthetic", {}))
        ds = d.pop("dataset", None)
        model = d.pop("model", {}) or {}
        bad = set(model) - set(MODEL_KEYS)
        if bad:
            raise SchemaError(f"run config: unknown model keys {sorted(bad)}")
        cfg = cls(synthetic=synth, dataset=DatasetConfig.from_dict(ds) if ds else None,
                  model=model, **d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise SchemaError(f"ablation must be one of {sorted(ABLATIONS)}")
        if self.decay not in DECAYS:
            raise SchemaError(f"decay must be one of {list(DECAYS)}")
        if self.epochs < 1 or self.batch_size < 1 or not 0 < self.ratio < 1:
            raise SchemaError("epochs, batch_size must be >= 1 and ratio in (0, 1)")

    def dataset_config(self) -> DatasetConfig:
        return self.dataset or self.synthetic.dataset_config()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dataset"] = self.dataset.to_dict() if self.dataset else None
        return out


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = read_json(path)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(raw)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for key in ("ablation", "decay", "epochs", "learning_rate", "batch_size", "ratio", "patience"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    cfg.validate()
    return cfg


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def train_run(records, cfg: RunConfig, seed: int, progress=None):
    """Split, fit the scaler, train; returns everything needed for a checkpoint."""
    ds = cfg.dataset_config()
    train_recs, test_recs = split_records(records, cfg.ratio, seed)
    scaler = LabScaler.fit(train_recs, ds.n_indicators)
    mcfg = ModelConfig.for_dataset(ds, **cfg.model)
    abl = ablation(cfg.ablation, cfg.decay)
    params = init_params(mcfg, seed)
    opt = OptimizerState(cfg.learning_rate, cfg.rho, cfg.epsilon)
    result = train(group_by_visits(train_recs, cfg.batch_size), params, mcfg, abl, scaler,
                   opt, epochs=cfg.epochs, seed=seed, patience=cfg.patience, progress=progress)
    return params, mcfg, abl, scaler, ds, result, train_recs, test_recs


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    synth = cfg.synthetic
    if args.n_patients is not None:
        synth.n_patients = args.n_patients
        synth.validate()
    records = generate_synthetic(synth, args.seed)
    dump_jsonl(records, args.out)
    if args.dataset_out:
        _write_json(args.dataset_out, synth.dataset_config().to_dict())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    records = load_jsonl(args.data, cfg.dataset_config())
    params, mcfg, abl, scaler, ds, result, _, test_recs = train_run(records, cfg, args.seed)
    extra = {"seed": args.seed, "run": cfg.to_dict(),
             "test_ids": [r.patient_id for r in test_recs], "curve": result.curve}
    save_checkpoint(args.out, params, mcfg, abl, scaler, ds, extra)
    if args.curve:
        with open(args.curve, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss"])
            for i, v in enumerate(result.curve, 1):
                w.writerow([i, repr(v)])
    return EXIT_OK


def _load_for_model(args):
    params, mcfg, abl, scaler, ds, doc = load_checkpoint(args.model)
    if ds is None:
        raise SchemaError(f"{args.model}: checkpoint lacks a dataset config")
    records = load_jsonl(args.data, ds)
    return params, mcfg, abl, scaler, ds, doc, records


def cmd_eval(args) -> int:
    params, mcfg, abl, scaler, ds, doc, records = _load_for_model(args)
    test_ids = doc.get("extra", {}).get("test_ids")
    if test_ids and not args.all:
        wanted = set(test_ids)
        records = [r for r in records if r.patient_id in wanted]
    if not records:
        raise SchemaError("no records to evaluate")
    report = evaluate(records, params, mcfg, abl, scaler, seed=doc.get("extra", {}).get("seed"))
    _write_json(args.report, report.to_dict())
    return EXIT_OK


def cmd_explain(args) -> int:
    params, mcfg, abl, scaler, ds, doc, records = _load_for_model(args)
    match = [r for r in records if r.patient_id == args.patient]
    if not match:
        raise SchemaError(f"patient {args.patient!r} not found in {args.data}")
    _write_json(args.out, explain(match[0], params, mcfg, abl, scaler, ds.indicators))
    return EXIT_OK


SWEEP_FIELDS = ["ablation", "decay", "seed", "accuracy", "auc_roc", "auc_pr", "final_loss"]


def _sweep_cell(records, cfg_dict: dict, name: str, decay: str, seed: int) -> dict:
    cfg = RunConfig.from_dict(cfg_dict)
    cfg.ablation, cfg.decay = name, decay
    params, mcfg, abl, scaler, _, result, _, test_recs = train_run(records, cfg, seed)
    rep = evaluate(test_recs, params, mcfg, abl, scaler, seed=seed)
    return {"ablation": name, "decay": decay, "seed": seed, "accuracy": rep.accuracy,
            "auc_roc": rep.auc_roc, "auc_pr": rep.auc_pr, "final_loss": result.curve[-1]}


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    records = load_jsonl(args.data, cfg.dataset_config())
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise SchemaError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    names = args.ablations.split(",") if args.ablations else list(ABLATIONS)
    decays = args.decays.split(",") if args.decays else list(DECAYS)
    for n in names:
        if n not in ABLATIONS:
            raise SchemaError(f"unknown ablation {n!r}")
    for g in decays:
        if g not in DECAYS:
            raise SchemaError(f"unknown decay {g!r}")
    cells = [(n, g, s) for n in names for g in decays for s in seeds]
    cfg_dict = cfg.to_dict()
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(_sweep_cell, *zip(*[(records, cfg_dict, n, g, s)
                                                     for n, g, s in cells])))
    else:
        rows = [_sweep_cell(records, cfg_dict, n, g, s) for n, g, s in cells]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else (repr(row[k]) if isinstance(row[k], float)
                                                       else row[k])) for k in SWEEP_FIELDS})
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    """Usage errors become the same one-line JSON as every other failure."""

    def error(self, message):
        self.exit(EXIT_USAGE, json.dumps({"error": "usage", "code": EXIT_USAGE,
                                          "message": f"{self.prog}: {message}"}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tghoa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def train_flags(sp):
        sp.add_argument("--ablation", choices=sorted(ABLATIONS), help="model variant")
        sp.add_argument("--decay", choices=DECAYS, help="time-decay function of the query")
        sp.add_argument("--epochs", type=int, help="training epochs (default 30)")
        sp.add_argument("--learning-rate", dest="learning_rate", type=float,
                        help="RMSProp learning rate (default 0.001)")
        sp.add_argument("--batch-size", dest="batch_size", type=int,
                        help="max patients per equal-visit-count batch (default 32)")
        sp.add_argument("--ratio", type=float, help="train fraction of the split (default 0.8)")
        sp.add_argument("--patience", type=int,
                        help="stop after this many epochs without training-loss improvement")

    g = sub.add_parser("gen", help="generate a synthetic cohort as JSONL")
    g.add_argument("--config", help="run config JSON (uses its 'synthetic' section)")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--n-patients", dest="n_patients", type=int, help="override cohort size")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.add_argument("--dataset-out", dest="dataset_out", help="also write the dataset config JSON")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True, help="patient JSONL")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--seed", type=int, default=0, help="split/init/shuffle seed")
    train_flags(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--curve", help="write the per-epoch loss curve CSV here")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its held-out split")
    e.add_argument("--data", required=True, help="patient JSONL")
    e.add_argument("--model", required=True, help="checkpoint path")
    e.add_argument("--report", required=True, help="output report JSON")
    e.add_argument("--all", action="store_true", help="evaluate on every record, not the test split")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="ablation x decay x seed grid to CSV")
    s.add_argument("--data", required=True, help="patient JSONL")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    s.add_argument("--ablations", help="comma-separated subset (default: all six)")
    s.add_argument("--decays", help="comma-separated subset (default: g1,g2,g3,g4)")
    s.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    train_flags(s)
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("explain", help="rank codes and indicators by attention for one patient")
    x.add_argument("--data", required=True, help="patient JSONL")
    x.add_argument("--model", required=True, help="checkpoint path")
    x.add_argument("--patient", required=True, help="patient_id")
    x.add_argument("--out", required=True, help="output JSON")
    x.set_defaults(func=cmd_explain)
    return p


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DivergenceError, FloatingPointError) as exc:
        return _fail("divergence", EXIT_DIVERGENCE, str(exc))
    except (SchemaError, KeyError, TypeError, ValueError) as exc:
        return _fail("schema", EXIT_SCHEMA, str(exc))
    except OSError as exc:
        return _fail("io", EXIT_IO, str(exc))


if __name__ == "__main__":
    sys.exit(main())
