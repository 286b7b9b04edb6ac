"""Command-line entry point.

Subcommands: simulate, preprocess, train, evaluate, predict, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, literal_lr_other, load_config
from .datapipe import (
    DataError,
    InsufficientHistory,
    exposure_channels,
    fit_alpha,
    load_dataset,
    make_samples,
    query_sample,
    save_cache,
    split_days,
    train_power,
)
from .datapipe.io import iso_utc, parse_iso
from .evaluation import evaluate, predicted_watts, write_predictions_csv, write_report_json
from .models import ModelConfig, ModelKind, build_model, make_batch, predict_variation
from .tensor import precision
from .training import NumericError, TrainConfig, train

log = logging.getLogger("pvnowcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "validation", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 means a data error here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _lambda(text: str):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    return name.strip(), float(value)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pvnowcast", description="Sky-image PV power nowcasting.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", type=Path, help="JSON run configuration; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--threads", type=_positive, default=1, help="BLAS threads (default 1, deterministic)")
    p.add_argument("--out", type=Path, help="output root (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic sky-camera dataset")
    s.add_argument("--dataset", type=Path, help="output directory (default: OUT/dataset)")
    s.add_argument("--days", type=_positive, default=10)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--regimes", help="comma-separated clear/partly/overcast cycle (default: desk mix)")
    s.add_argument("--start-date", default="2021-06-01")

    s = sub.add_parser("preprocess", help="ingest a raw dataset into a cache")
    s.add_argument("--dataset", type=Path)
    s.add_argument("--cache", type=Path, help="cache directory (default: OUT/preprocessed)")

    s = sub.add_parser("train", help="train a model and keep the best validation checkpoint")
    s.add_argument("--dataset", type=Path)
    s.add_argument("--kind", choices=[k.value for k in ModelKind])
    s.add_argument("--horizon", type=_positive)
    s.add_argument("--history", type=_positive)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=_positive)
    s.add_argument("--chunk", type=_positive)
    s.add_argument("--lr-encoder", type=float)
    s.add_argument("--lr-other", type=float)
    s.add_argument("--literal-lr", action="store_true", help="use 30^-4 as the non-encoder learning rate")
    s.add_argument("--exposures", choices=("all", "shortest", "longest"))
    s.add_argument("--lambda", dest="lambdas", type=_lambda, action="append", default=[], metavar="NAME=VALUE")
    s.add_argument("--name", help="run name (default: KIND_xHORIZON[_EXPOSURES])")

    s = sub.add_parser("evaluate", help="per-class metrics against persistence")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--persistence", action="store_true", help="evaluate the persistence model itself")
    s.add_argument("--dataset", type=Path)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--horizon", type=_positive, help="persistence only")
    s.add_argument("--name")
    s.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("predict", help="predict one timestamp")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--dataset", type=Path)
    s.add_argument("--timestamp", required=True, help="t0 as ISO-8601 UTC, e.g. 2021-06-03T02:30:00Z")

    s = sub.add_parser("gradcheck", help="finite-difference checks of all layers and models")
    s.add_argument("--kinds", default=",".join(k.value for k in ModelKind))
    s.add_argument("--seeds", type=_positive, default=20)
    s.add_argument("--no-layers", action="store_true", help="skip op and layer checks")
    return p


def run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed,
        "precision": args.precision,
        "out": str(args.out) if args.out else None,
        "dataset": str(args.dataset) if getattr(args, "dataset", None) else None,
    }
    for name in ("kind", "horizon", "history", "epochs", "batch_size", "chunk", "lr_encoder", "lr_other", "exposures"):
        overrides[name] = getattr(args, name, None)
    for name, value in overrides.items():
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "literal_lr", False):
        cfg.lr_other = literal_lr_other()
    for name, value in getattr(args, "lambdas", []):
        if name not in cfg.weights:
            raise ConfigError(f"unknown loss weight {name!r}; expected one of {sorted(cfg.weights)}")
        cfg.weights = {**cfg.weights, name: value}
    return cfg.validate()


def _dataset(cfg: RunConfig, fallback=None):
    path = cfg.dataset or fallback
    if not path:
        raise UsageError("no dataset given (use --dataset or the config file)")
    return load_dataset(path)


def _split_records(records, seed: int, days=None) -> dict:
    by_day = {r.day: r for r in records}
    if days is None:
        try:
            days = split_days(sorted(by_day), seed=seed)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    missing = [d for part in days.values() for d in part if d not in by_day]
    if missing:
        raise DataError(f"dataset lacks split day(s) {missing}")
    return {k: [by_day[d] for d in v] for k, v in days.items()}, days


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out)


def cmd_simulate(args, cfg: RunConfig) -> int:
    from .skysim import DESK_REGIMES, SimConfig, emit_dataset

    regimes = tuple(r.strip() for r in args.regimes.split(",")) if args.regimes else DESK_REGIMES
    try:
        sim = SimConfig(seed=cfg.seed, days=args.days, resolution=args.resolution, start_date=args.start_date, regimes=regimes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = args.dataset or _out(cfg) / "dataset"
    t = time.perf_counter()
    emit_dataset(sim, out)
    print(f"simulated {sim.days} day(s) at {sim.resolution}x{sim.resolution} into {out} ({time.perf_counter() - t:.1f}s)")
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    meta, records = _dataset(cfg)
    out = args.cache or _out(cfg) / "preprocessed"
    save_cache(out, meta, records)
    for r in records:
        print(f"{r.day}\t{r.label}\t{int(r.valid.sum())}/{len(r.valid)} valid minutes")
    print(f"cache written to {out}")
    return EXIT_OK


def _run_name(cfg: RunConfig) -> str:
    name = f"{cfg.kind}_x{cfg.horizon}"
    return name if cfg.exposures == "all" else f"{name}_{cfg.exposures}"


def _checkpoint_run_config(cfg: RunConfig) -> dict:
    doc = cfg.to_json()
    # the output root says where files went, not how they were made
    doc.pop("out", None)
    return doc


def cmd_train(args, cfg: RunConfig) -> int:
    from .plotting import training_curve

    meta, records = _dataset(cfg)
    if cfg.resolution != meta.resolution:
        log.info("resolution %d taken from the dataset (config said %d)", meta.resolution, cfg.resolution)
        cfg.resolution = meta.resolution
    parts, days = _split_records(records, cfg.seed)
    alpha = fit_alpha(train_power(parts["train"]))
    images = ModelKind.parse(cfg.kind).uses_images
    train_set = make_samples(parts["train"], alpha, cfg.horizon, cfg.history, with_images=images)
    val_set = make_samples(parts["validation"], alpha, cfg.horizon, cfg.history, with_images=images)
    if len(train_set) < 2 or len(val_set) == 0:
        raise DataError(f"too few samples: {len(train_set)} train, {len(val_set)} validation")
    channels = exposure_channels(cfg.exposures)
    dtype = np.float64 if cfg.precision == "f64" else np.float32
    mcfg = ModelConfig(kind=cfg.kind, history=cfg.history, resolution=cfg.resolution, in_channels=len(channels))
    try:
        mcfg = ModelConfig(**{**asdict(mcfg), **cfg.model})
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None
    model = build_model(cfg.kind, mcfg, seed=cfg.seed, dtype=dtype)
    tcfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        chunk=cfg.chunk,
        lr_encoder=cfg.lr_encoder,
        lr_other=cfg.lr_other,
        seed=cfg.seed,
        weights=cfg.loss_weights,
    )
    name = args.name or _run_name(cfg)
    print(f"{name}: {len(train_set)} train / {len(val_set)} validation samples, alpha={alpha:.6g}")

    def progress(rec):
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.5f}  val MAE {rec.val_mae:8.2f} W  best {rec.best_val_mae:8.2f} W")

    result = train(model, train_set, val_set, tcfg, channels, on_epoch=progress)
    history = [
        {"epoch": r.epoch, "train_loss": r.train_loss, "terms": r.terms, "val_mae": r.val_mae, "best_val_mae": r.best_val_mae}
        for r in result.history
    ]
    ck = ckpt_io.from_model(
        model,
        alpha,
        epoch=result.best_epoch,
        val_mae=result.best_val_mae,
        run_config=_checkpoint_run_config(cfg),
        extra={"channels": list(channels), "history": history, "split": days},
        state=result.best_state,
    )
    path = ckpt_io.save(ck, _out(cfg) / "checkpoints" / name / "best")
    reports = _out(cfg) / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / f"{name}_train.json").write_text(json.dumps({"history": history, "best_epoch": result.best_epoch}, indent=2, sort_keys=True) + "\n")
    if history:
        figures = _out(cfg) / "figures"
        figures.mkdir(parents=True, exist_ok=True)
        training_curve(history, figures / f"{name}_training.png")
    print(f"best epoch {result.best_epoch}, validation MAE {result.best_val_mae:.2f} W -> {path}")
    return EXIT_OK


def _load_checkpoint(path):
    ck = ckpt_io.load(path)
    if ck.alpha is None or not np.isfinite(ck.alpha) or ck.alpha <= 0:
        raise DataError(f"{path}: checkpoint has no valid alpha; refusing to renormalize")
    return ck


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .plotting import day_curves, skill_bars

    if args.persistence:
        _, records = _dataset(cfg)
        parts, _ = _split_records(records, cfg.seed)
        alpha = fit_alpha(train_power(parts["train"]))
        horizon, history, model, channels = args.horizon or cfg.horizon, cfg.history, None, None
        name = args.name or f"persistence_x{horizon}"
    else:
        if args.horizon:
            raise UsageError("--horizon applies to --persistence only; checkpoints carry their own")
        ck = _load_checkpoint(args.checkpoint)
        _, records = _dataset(cfg, ck.run_config.get("dataset"))
        parts, _ = _split_records(records, cfg.seed, ck.extra.get("split"))
        model = ckpt_io.restore_model(ck)
        alpha, horizon = ck.alpha, ck.run_config.get("horizon", 1)
        history, channels = model.cfg.history, ck.extra.get("channels")
        name = args.name or Path(args.checkpoint).parent.name or model.kind.value
    samples = make_samples(parts[args.split], alpha, horizon, history, with_images=model is not None and model.kind.uses_images)
    if len(samples) == 0:
        raise DataError(f"{args.split} split has no valid samples")
    report, pred_w = evaluate(model, samples, channels, model_id=name)
    print(report.table())
    out = _out(cfg)
    write_report_json(out / "reports" / f"{name}_{args.split}.json", report)
    write_predictions_csv(out / "predictions" / f"{name}_{args.split}.csv", samples, pred_w)
    if not args.no_figures:
        figures = out / "figures"
        figures.mkdir(parents=True, exist_ok=True)
        day_curves(samples, pred_w, figures / f"{name}_{args.split}_days.png")
        skill_bars(report, figures / f"{name}_{args.split}_skill.png")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    ck = _load_checkpoint(args.checkpoint)
    _, records = _dataset(cfg, ck.run_config.get("dataset"))
    try:
        t0 = parse_iso(args.timestamp)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if t0 % 60:
        raise UsageError("timestamp must fall on a whole minute")
    day = next((r for r in records if len(r.minutes) and r.minutes[0] <= t0 <= r.minutes[-1]), None)
    model = ckpt_io.restore_model(ck)
    horizon = ck.run_config.get("horizon", 1)
    try:
        if day is None:
            raise DataError(f"no recorded day covers {args.timestamp}")
        sample = query_sample(day, ck.alpha, t0, horizon, model.cfg.history)
    except InsufficientHistory as exc:
        minutes = ", ".join(iso_utc(m) for m in exc.missing)
        raise DataError(f"insufficient history for {args.timestamp}; missing minutes: {minutes}") from None
    channels = ck.extra.get("channels")
    dtype = model.parameters()[0].dtype
    model.eval()
    start = time.perf_counter()
    batch = make_batch(sample, np.array([0]), channels, images=model.kind.uses_images, dtype=dtype)
    dq_hat = predict_variation(model, batch)
    latency = time.perf_counter() - start
    pred = float(predicted_watts(sample.p_t0, sample.q_hist[:, -1], dq_hat, ck.alpha)[0])
    doc = {
        "t0": iso_utc(t0),
        "target": iso_utc(t0 + 60 * horizon),
        "prediction_w": round(pred, 3),
        "persistence_w": round(float(sample.p_t0[0]), 3),
        "latency_ms": round(latency * 1e3, 2),
    }
    if np.isfinite(sample.p_target[0]):
        doc["measured_w"] = round(float(sample.p_target[0]), 3)
    print(json.dumps(doc))
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradsuite import run_suite, summarize

    if args.precision == "f32" or (args.config and cfg.precision == "f32" and args.precision is None):
        raise UsageError("gradcheck runs in float64 only; f32 finite differences are too coarse")
    try:
        kinds = [ModelKind.parse(k.strip()) for k in args.kinds.split(",") if k.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    base = cfg.seed
    t = time.perf_counter()
    results = run_suite(range(base, base + args.seeds), kinds, include_layers=not args.no_layers)
    rows = summarize(results)
    width = max(len(r[0]) for r in rows)
    print(f"{'check':<{width}}  seeds  probes  skipped  worst rel. error  threshold  result")
    for name, n, err, thr, ok, probes, skipped in rows:
        print(f"{name:<{width}}  {n:5d}  {probes:6d}  {skipped:7d}  {err:16.3e}  {thr:9.0e}  {'pass' if ok else 'FAIL'}")
    failed = [r for r in rows if not r[4]]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed over {args.seeds} seed(s) in {time.perf_counter() - t:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors, --help and --version; keep main() callable in-process
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = run_config(args)
        with threadpool_limits(args.threads), precision(cfg.precision):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"pvnowcast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ckpt_io.CheckpointError, FileNotFoundError) as exc:
        print(f"pvnowcast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"pvnowcast: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
