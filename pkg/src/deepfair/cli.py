"""``dfl`` command-line interface.

Machine-readable JSON goes to stdout, human-readable notes to stderr.

Exit codes: 0 success, 2 config/input error, 3 numerical divergence,
4 undefined metric or insufficient samples, 5 alpha sweep with no candidate
passing the accuracy filter.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data, network, training
from .config import RunConfig
from .config import load_config as _load_config_file
from .autodiff import DimensionError
from .data import ConfigError, LabeledDataset, MatrixFormatError, SchemaError
from .dependence import InsufficientSamplesError, dc_conditional, dc_fast, dc_naive
from .metrics import MetricUndefinedError, PredictionSet, audit, evaluate
from .network import ModelFormatError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_METRIC, EXIT_FLAGGED = 0, 2, 3, 4, 5

log = logging.getLogger("deepfair")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _limit_threads(deterministic: bool) -> None:
    if not deterministic:
        return
    # a single BLAS thread fixes the reduction order of matrix products
    threadpool_limits(1)


def load_config(path: str) -> RunConfig:
    """Read a config file; a bare name such as ``biased`` selects a bundled config."""
    if not Path(path).exists():
        bundled = resources.files("deepfair").joinpath("configs", f"{path}.cfg")
        if bundled.is_file():
            return _load_config_file(bundled)
    return _load_config_file(path)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DFL_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# data plumbing shared by commands


def load_dataset(cfg: RunConfig) -> tuple[LabeledDataset, list[np.ndarray]]:
    """Full dataset plus split indices; CSV numerics are standardized on the train part."""
    fractions = cfg.split_fractions()
    if cfg.data_format == "synthetic":
        if cfg.generator == "toy":
            ds = data.gen_toy_sdr(cfg.n, cfg.noise_sd, cfg.data_seed)
        elif cfg.generator == "biased":
            ds = data.gen_biased_classification(cfg.n, cfg.p, cfg.bias_strength, cfg.data_seed,
                                                signal=cfg.signal)
        else:
            raise ConfigError(f"unknown generator {cfg.generator!r}")
        return ds, data.split_indices(ds, fractions, cfg.split_seed, cfg.stratify_split)
    if not cfg.data_path:
        raise ConfigError("data_path is required for matrix and csv data")
    if cfg.data_format == "matrix":
        ds = data.ingest_matrix(cfg.data_path)
        return ds, data.split_indices(ds, fractions, cfg.split_seed, cfg.stratify_split)
    if cfg.data_format == "csv":
        if not cfg.schema_path:
            raise ConfigError("schema_path is required for csv data")
        schema = data.Schema.load(cfg.schema_path)
        raw = data.ingest_csv(cfg.data_path, schema, standardize=False)
        parts = data.split_indices(raw, fractions, cfg.split_seed, cfg.stratify_split)
        if cfg.standardize:
            raw = data.ingest_csv(cfg.data_path, schema, standardize=True, stats_rows=parts[0])
        return raw, parts
    raise ConfigError(f"unknown data_format {cfg.data_format!r}")


def load_splits(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Train, validation and test sets.

    With ``test_n`` set, ``split`` names only train and validation fractions
    and the test set is drawn afresh from the biased generator with the same
    directions but ``test_composition`` cell shares.
    """
    ds, parts = load_dataset(cfg)
    if cfg.test_n > 0:
        if cfg.data_format != "synthetic" or cfg.generator != "biased":
            raise ConfigError("test_n applies only to the synthetic biased generator")
        if len(parts) != 2:
            raise ConfigError("with test_n, split must have two fractions (train, val)")
        test = data.gen_biased_classification(
            cfg.test_n, cfg.p, cfg.bias_strength, cfg.data_seed + 1000, composition=cfg.test_cells(),
            signal=cfg.signal, directions_seed=cfg.data_seed)
        return ds.subset(parts[0], "train"), ds.subset(parts[1], "val"), test
    if len(parts) != 3:
        raise ConfigError("split must have three fractions (train, val, test)")
    return tuple(ds.subset(idx, name) for idx, name in zip(parts, ("train", "val", "test")))


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _read_matrix_arg(path: str) -> np.ndarray:
    p = Path(path)
    try:
        if p.suffix == ".npy":
            arr = np.load(p)
        else:
            arr = np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None, ndmin=2)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read {path}: {exc}", EXIT_CONFIG) from None
    return np.asarray(arr, dtype=np.float64)


def _load_data_arg(path: str) -> LabeledDataset:
    try:
        return data.ingest_matrix(path)
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc}", EXIT_CONFIG) from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    _limit_threads(cfg.deterministic)
    train_set, _, test_set = load_splits(cfg)
    spec = cfg.network_spec(train_set.p, train_set.num_classes)
    tcfg = cfg.train_config()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    (out / "config.resolved").write_text(resolved, encoding="utf-8")
    _note(f"training {spec} for {tcfg.epochs} epochs on {train_set.n} rows")
    try:
        model, records = training.train(train_set, spec, tcfg, test_set, checkpoint_dir=out)
    except training.TrainingDiverged as exc:
        raise CommandError(f"{exc}; last good checkpoint: {exc.checkpoint}", EXIT_DIVERGED) from None
    network.save(model, out / "model.dflm")
    (out / "trajectory.csv").write_text(training.trajectory_csv(records), encoding="utf-8")
    report = evaluate(model, test_set, with_dc=True, require=False)
    report.config_hash = cfg.digest()
    metrics = report.to_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    _emit(metrics)
    _note(f"wrote model.dflm, trajectory.csv, metrics.json, config.resolved to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = network.load(args.model)
    ds = _load_data_arg(args.data)
    attrs = [int(a) for a in args.attributes.split(",")] if args.attributes else None
    report = evaluate(model, ds, attrs, with_dc=args.dc)
    _emit(report.to_dict())
    return EXIT_OK


def read_predictions(path, sensitive: list[str] | None = None) -> tuple[PredictionSet, list[str]]:
    """Prediction CSV: ``prob_0..prob_{K-1}``, ``label``, then sensitive columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CommandError(f"{path} is empty", EXIT_CONFIG)
    header = [h.strip() for h in rows[0]]
    prob_cols = [i for i, h in enumerate(header) if h.startswith("prob_")]
    if "label" not in header or len(prob_cols) < 2:
        raise CommandError("prediction CSV needs prob_0..prob_{K-1} and label columns", EXIT_CONFIG)
    label_col = header.index("label")
    if sensitive:
        missing = [s for s in sensitive if s not in header]
        if missing:
            raise CommandError(f"sensitive columns {missing} not in {path}", EXIT_CONFIG)
        sens_cols = [header.index(s) for s in sensitive]
    else:
        sens_cols = [i for i in range(len(header)) if i not in prob_cols and i != label_col]
    if not sens_cols:
        raise CommandError("prediction CSV has no sensitive column", EXIT_CONFIG)
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise CommandError(f"non-numeric value in {path}: {exc}", EXIT_CONFIG) from None
    order = sorted(prob_cols, key=lambda i: int(header[i][5:]))
    body = body.reshape(-1, len(header))
    preds = PredictionSet(body[:, order], body[:, label_col].astype(np.int64), body[:, sens_cols])
    return preds, [header[i] for i in sens_cols]


def cmd_audit(args) -> int:
    names = args.sensitive.split(",") if args.sensitive else None
    try:
        preds, names = read_predictions(args.predictions, names)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    report = audit(preds, list(range(len(names))))
    out = report.to_dict()
    for entry, name in zip(out["per_attribute"], names):
        entry["name"] = name
    _emit(out)
    return EXIT_OK


def cmd_dcov(args) -> int:
    x = _read_matrix_arg(args.x)
    z = _read_matrix_arg(args.z)
    if x.shape[0] != z.shape[0]:
        raise CommandError(f"x has {x.shape[0]} rows but z has {z.shape[0]}", EXIT_CONFIG)
    out: dict = {"n": int(x.shape[0])}
    if args.conditional:
        if not args.y:
            raise CommandError("--conditional needs --y", EXIT_CONFIG)
        y = _read_matrix_arg(args.y).reshape(-1).astype(np.int64)
        est = dc_conditional(z, x, y)
        out.update(method="conditional", value=est.value,
                   per_class=[{"class": t.label, "n": t.n, "weight": t.weight, "value": t.value}
                              for t in est.per_class],
                   skipped_classes=est.skipped_classes)
        _emit(out)
        return EXIT_OK
    want_naive = args.naive
    want_fast = args.fast or not args.naive
    if want_naive:
        if x.shape[0] > 64:
            raise CommandError("--naive is limited to n <= 64", EXIT_CONFIG)
        out["naive"] = dc_naive(z, x).value
    if want_fast:
        out["fast"] = dc_fast(z, x).value
    if want_naive and want_fast:
        out["method"] = "naive+fast"
        out["difference"] = out["fast"] - out["naive"]
    else:
        out["method"] = "naive" if want_naive else "fast"
        out["value"] = out[out["method"]]
    _emit(out)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.generator == "toy":
        ds = data.gen_toy_sdr(args.n, args.noise_sd, args.seed)
    elif args.generator == "biased":
        comp = tuple(float(v) for v in args.composition.split(","))
        try:
            ds = data.gen_biased_classification(args.n, args.p, args.bias_strength, args.seed,
                                                composition=comp, signal=args.signal)
        except ConfigError as exc:
            raise CommandError(str(exc), EXIT_CONFIG) from None
    else:
        raise CommandError(f"unknown generator {args.generator!r}", EXIT_CONFIG)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_matrix(ds, out)
    prov_path = out.with_name(out.name + ".provenance.json")
    prov_path.write_text(json.dumps(ds.provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit({"matrix": str(out), "provenance": str(prov_path), "n": ds.n, "p": ds.p, "d": ds.d})
    return EXIT_OK


def run_probe(model: network.ModelParams, train_set: LabeledDataset, test_set: LabeledDataset,
              hidden: int, cfg: training.TrainConfig):
    """Train a fresh one-hidden-layer classifier on the frozen latent and audit it."""
    lat_train = network.represent(model, train_set.X, "eval").value
    lat_test = network.represent(model, test_set.X, "eval").value
    probe, _ = training.train_standard(train_set.with_features(lat_train), cfg, hidden)
    return evaluate(probe, test_set.with_features(lat_test), require=False), probe


def cmd_probe(args) -> int:
    model = network.load(args.model)
    if args.config:
        cfg = _apply_overrides(load_config(args.config), args)
        train_set, _, test_set = load_splits(cfg)
        tcfg = cfg.train_config()
        hidden = args.hidden or cfg.probe_hidden
    else:
        if not args.data:
            raise CommandError("probe needs a data file or --config", EXIT_CONFIG)
        ds = _load_data_arg(args.data)
        parts = data.split_indices(ds, (0.8, 0.2), args.split_seed)
        train_set, test_set = ds.subset(parts[0], "train"), ds.subset(parts[1], "test")
        tcfg = training.TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                                    seed=args.seed or 0)
        hidden = args.hidden or 64
    report, _ = run_probe(model, train_set, test_set, hidden, tcfg)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    _limit_threads(cfg.deterministic)
    alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    if not alphas:
        raise CommandError("empty alpha list", EXIT_CONFIG)
    train_set, val_set, _ = load_splits(cfg)
    spec = cfg.network_spec(train_set.p, train_set.num_classes)
    tcfg = replace(cfg.train_config(), lambda_mu_form=False)
    report = training.select_alpha(alphas, train_set, val_set, spec, tcfg, cfg.probe_hidden,
                                   workers=worker_count())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(report.table_csv(), encoding="utf-8")
    (out / "sweep.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    _emit(report.to_dict())
    if report.flagged:
        _note("warning: no alpha reached 95% of the Standard accuracy")
        return EXIT_FLAGGED
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfl", description="Fair representation fine-tuning and auditing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--out")

    p = sub.add_parser("train", help="fine-tune a fair representation")
    common(p, config_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="audit a trained model on a matrix file")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--attributes", help="comma-separated sensitive column indices")
    p.add_argument("--dc", action="store_true", help="attach DC(Z, latent) estimates")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("audit", help="fairness report for a prediction CSV")
    p.add_argument("predictions")
    p.add_argument("--sensitive", help="comma-separated sensitive column names")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("dcov", help="distance covariance between two matrices")
    p.add_argument("x")
    p.add_argument("z")
    p.add_argument("--naive", action="store_true")
    p.add_argument("--fast", action="store_true")
    p.add_argument("--conditional", action="store_true")
    p.add_argument("--y", help="label vector file for --conditional")
    p.set_defaults(func=cmd_dcov)

    p = sub.add_parser("synth", help="write a synthetic matrix file")
    p.add_argument("generator", help="toy | biased")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--bias-strength", type=float, default=3.0)
    p.add_argument("--signal", type=float, default=1.5)
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--composition", default="0.4,0.1,0.1,0.4")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("probe", help="train a plain classifier on a frozen fair representation")
    p.add_argument("model")
    p.add_argument("data", nargs="?")
    common(p)
    p.add_argument("--hidden", type=int)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="select alpha on the validation split")
    common(p, config_required=True)
    p.add_argument("--alphas", required=True, help="comma-separated candidates")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CommandError as exc:
        _note(f"error: {exc}")
        return exc.code
    except (ConfigError, SchemaError, MatrixFormatError, ModelFormatError, DimensionError,
            FileNotFoundError) as exc:
        _note(f"error: {exc}")
        return EXIT_CONFIG
    except (MetricUndefinedError, InsufficientSamplesError, training.BatchError) as exc:
        _note(f"error: {exc}")
        return EXIT_METRIC


if __name__ == "__main__":
    sys.exit(main())
