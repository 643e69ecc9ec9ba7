"""Command-line entry point: ``attnrobust <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import data as D
from . import harness as H
from .attention import canonical_variant
from .corruption import apply_scenario, parse_scenario
from .errors import AttnRobustError
from .vit import load_checkpoint, save_checkpoint

MECHANISM_CHOICES = ("softmax", "sigmoid", "linear", "doubly-stochastic", "cosine")
SCENARIO_CHOICES = ("clean", "train", "test", "both")

log = logging.getLogger("attnrobust")


def _config(args) -> H.ExperimentConfig:
    cfg = H.load_config(args.config) if getattr(args, "config", None) else H.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "subsample", None) is not None:
        cfg.dataset.train_subsample = args.subsample
    if getattr(args, "full", False):
        cfg.dataset.full = True
    if getattr(args, "epochs", None) is not None:
        cfg.training.epochs = args.epochs
    if getattr(args, "mechanism", None):
        cfg.mechanisms = [canonical_variant(m) for m in args.mechanism]
    if getattr(args, "scenario", None) and isinstance(args.scenario, list):
        cfg.scenarios = [parse_scenario(s).value for s in args.scenario]
    return cfg


def write_outputs(report: H.ExperimentReport, out_dir: str | Path, timing: bool = True, figures: bool = True) -> list[Path]:
    """report.csv, report.json, table.txt and (optionally) the two figures."""
    from .plotting import render_figures

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        H.report_emit(report, "csv", out / "report.csv", timing),
        H.report_emit(report, "json", out / "report.json", timing),
        H.report_emit(report, "table", out / "table.txt"),
    ]
    if figures:
        paths += render_figures(report, out)
    return paths


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _config(args)
    mech = cfg.mechanisms[0]
    scen = parse_scenario(args.scenario)
    ds = H.load_dataset(cfg)
    corruption = cfg.corruption_spec(scen) if scen.corrupts_train else None
    result = H.train_model(cfg.vit_config(mech, ds.spec), ds.train, ds.spec, cfg.training_for(mech), cfg.seed, corruption)
    extra = {
        "mechanism": mech,
        "scenario": scen.value,
        "seed": cfg.seed,
        "epoch_losses": result.epoch_losses,
        "seconds": result.seconds,
        "failed": result.failed,
        "diagnostic": result.diagnostic,
        "config": cfg.source_text,
        "experiment": cfg.to_dict(),
    }
    path = save_checkpoint(result.model, args.out, extra)
    print(f"{mech}/{scen.value}: {'FAILED ' + result.diagnostic if result.failed else 'ok'} -> {path}")
    return 1 if result.failed else 0


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = _config(args)
    else:
        cfg = H.config_from_dict(extra.get("experiment", {}), extra.get("config", ""))
        if args.seed is not None:
            cfg.seed = args.seed
        if args.subsample is not None:
            cfg.dataset.train_subsample = args.subsample
    scen = parse_scenario(args.scenario)
    ds = H.load_dataset(cfg)
    mech = canonical_variant(extra.get("mechanism", model.config.attention.variant))
    cell = H.ReportCell(mech, scen.value, None, seed=cfg.seed, model_hash=model.parameter_hash())
    t0 = time.perf_counter()
    if extra.get("failed"):
        cell.status, cell.diagnostic = "failed", extra.get("diagnostic", "")
    else:
        spec = cfg.corruption_spec(scen) if scen.corrupts_test else None
        cell.absolute_pct = round(H.evaluate(model, ds.test, ds.spec, spec, cfg.training.eval_batch_size), 1)
    cell.wall_seconds = extra.get("seconds", 0.0) + time.perf_counter() - t0
    report = H.ExperimentReport([cell], cfg.seed, cfg.source_text, ds.spec.name).fill_relative()
    H.report_emit(report, "json", args.out, timing=not args.no_timing)
    print(H.report_to_csv(report, timing=not args.no_timing), end="")
    return 0


def cmd_corrupt(args) -> int:
    cfg = _config(args)
    scen = parse_scenario(args.scenario)
    ds = H.load_dataset(cfg)
    spec = cfg.corruption_spec(scen)
    train_images, test_images = apply_scenario(ds.train.images, ds.test.images, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = "float32" if args.float else "uint8"
    for name, images, split in (("train", train_images, ds.train), ("test", test_images, ds.test)):
        D.write_raw(out / f"{name}.bin", D.Split(images, split.labels, split.indices), ds.spec.num_classes, dtype)
    meta = {"scenario": scen.value, "corruption": dataclasses.asdict(spec), "dataset": ds.spec.name,
            "train_size": len(ds.train), "test_size": len(ds.test)}
    (out / "corruption.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    print(f"wrote {out}/train.bin and {out}/test.bin ({scen.value}, {spec.kind.value} s={spec.severity})")
    return 0


def cmd_report(args) -> int:
    report = H.merge_reports(H.load_report(p) for p in args.inputs)
    for p in write_outputs(report, args.out, timing=not args.no_timing, figures=not args.no_figures):
        print(p)
    print(H.render_table(report), end="")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    report = H.run_experiment(cfg)
    for p in write_outputs(report, args.out, timing=not args.no_timing, figures=not args.no_figures):
        print(p)
    print(H.render_table(report), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import run_suite

    results = run_suite(args.seed or 0)
    for r in results:
        print(r.line())
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "relative_error", "tolerance", "passed"])
            w.writerows([r.name, f"{r.error:.6e}", f"{r.tol:.0e}", int(r.passed)] for r in results)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnrobust", description="Attention-mechanism robustness experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mechanism=True, scenario="single"):
        sp.add_argument("--config", type=Path, help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--subsample", type=int, help="number of training images to keep")
        sp.add_argument("--full", action="store_true", help="use the full dataset, no subsampling")
        sp.add_argument("--epochs", type=int, help="override training epochs")
        if mechanism:
            nargs = "+" if scenario == "multi" else None
            sp.add_argument("--mechanism", choices=MECHANISM_CHOICES, nargs=nargs,
                            action=None if nargs else _ListAction)
        if scenario == "single":
            sp.add_argument("--scenario", choices=SCENARIO_CHOICES, default="clean")
        elif scenario == "multi":
            sp.add_argument("--scenario", choices=SCENARIO_CHOICES, nargs="+")

    sp = sub.add_parser("train", help="train one model and save a checkpoint")
    common(sp)
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path (.npz)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint under a scenario")
    common(sp, mechanism=False)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True, help="single-cell report JSON")
    sp.add_argument("--no-timing", action="store_true", help="omit wall time for byte-stable output")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("corrupt", help="export a corrupted copy of the dataset as raw containers")
    common(sp, mechanism=False)
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.add_argument("--float", action="store_true", help="store float32 pixels instead of uint8")
    sp.set_defaults(func=cmd_corrupt)

    sp = sub.add_parser("report", help="merge report JSON files and emit CSV/JSON/table/figures")
    sp.add_argument("inputs", nargs="+", type=Path)
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.add_argument("--no-timing", action="store_true")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="full experiment: every mechanism under every scenario")
    common(sp, scenario="multi")
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.add_argument("--no-timing", action="store_true")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, help="optional CSV of results")
    sp.set_defaults(func=cmd_gradcheck)
    return p


class _ListAction(argparse.Action):
    """Store a single choice as a one-element list so configs can be overridden uniformly."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, [values])


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AttnRobustError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
