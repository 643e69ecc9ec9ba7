"""Four-scenario robustness experiments and their reports.

An experiment trains, per attention mechanism, one model on clean data and
(if any scenario needs it) one on corrupted data, then scores

=========  ===============  ================
scenario   trained on       evaluated on
=========  ===============  ================
clean      clean            clean test
train      corrupted        clean test
test       clean            corrupted test
both       corrupted        corrupted test
=========  ===============  ================

Relative accuracy is ``100 * absolute / clean_absolute`` of the same
mechanism, reported to 0.1.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import yaml

from . import data as D
from .attention import VARIANTS, AttentionConfig, canonical_variant
from .corruption import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    CorruptionSpec,
    Kind,
    Scenario,
    corrupt_batch,
    normalize,
    parse_scenario,
)
from .errors import ConfigError, DomainError
from .rng import derive_seed, make_rng
from .vit import ViTConfig, ViTModel, make_optimizer, predict, train_step

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "mechanism", "scenario", "absolute_pct", "baseline_pct", "relative_pct", "seed", "wall_seconds", "status",
)
SCENARIO_ORDER = (Scenario.CLEAN, Scenario.TRAIN_ONLY, Scenario.TEST_ONLY, Scenario.TRAIN_AND_TEST)
SCENARIO_TITLES = {
    Scenario.CLEAN: "No corruption",
    Scenario.TRAIN_ONLY: "Train corruption",
    Scenario.TEST_ONLY: "Test corruption",
    Scenario.TRAIN_AND_TEST: "Train + Test corruption",
}
MECHANISM_TITLES = {
    "softmax": "Softmax",
    "linear": "Linear",
    "sigmoid": "Sigmoid",
    "cosine": "Cosine",
    "doubly_stochastic": "Doubly Stochastic",
}


# ---------------------------------------------------------------------------
# metric


def relative_accuracy(absolute: float, baseline: float) -> float:
    """``100 * absolute / baseline`` rounded to 0.1.

    Raises:
        DomainError: if ``baseline`` is not positive.
    """
    if not baseline > 0:
        raise DomainError(f"baseline accuracy must be > 0, got {baseline}")
    return round(100.0 * absolute / baseline, 1)


def format_cell(absolute: float | None, relative: float | None = None) -> str:
    """Table cell text, e.g. ``"81.0% (91.4%)"`` or ``"88.6%"``."""
    if absolute is None:
        return "failed"
    text = f"{absolute:.1f}%"
    return text if relative is None else f"{text} ({relative:.1f}%)"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetConfig:
    name: str = "cifar10"
    path: str = "data/cifar-10-batches-bin"
    train_path: str | None = None  # raw containers only
    test_path: str | None = None
    train_subsample: int | None = 5000
    test_subsample: int | None = 1000
    full: bool = False
    # synthetic fixture only
    num_classes: int = 2
    image_size: int = 8


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    warmup_epochs: float = 2.0
    grad_clip: float | None = 1.0
    augment: bool = True
    eval_batch_size: int = 500


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: dict[str, Any] = field(default_factory=dict)
    attention: dict[str, Any] = field(default_factory=dict)
    training: TrainConfig = field(default_factory=TrainConfig)
    corruption: dict[str, Any] = field(default_factory=lambda: {"kind": "fog", "severity": 1.0})
    mechanisms: list[str] = field(default_factory=lambda: list(VARIANTS))
    scenarios: list[str] = field(default_factory=lambda: [s.value for s in SCENARIO_ORDER])
    overrides: dict[str, dict[str, Any]] = field(default_factory=dict)
    source_text: str = ""

    def __post_init__(self):
        self.mechanisms = [canonical_variant(m) for m in self.mechanisms]
        self.scenarios = [parse_scenario(s).value for s in self.scenarios]
        self.overrides = {canonical_variant(k): v for k, v in self.overrides.items()}

    # -- derived objects -----------------------------------------------
    def corruption_seed(self) -> int:
        seed = self.corruption.get("seed")
        return int(seed) if seed is not None else derive_seed(self.seed, "corruption")

    def corruption_spec(self, scenario: Scenario | str = Scenario.CLEAN) -> CorruptionSpec:
        return CorruptionSpec(
            kind=Kind(self.corruption.get("kind", "fog")),
            severity=float(self.corruption.get("severity", 1.0)),
            seed=self.corruption_seed(),
            scenario=parse_scenario(scenario),
        )

    def training_for(self, mechanism: str) -> TrainConfig:
        extra = self.overrides.get(mechanism, {}).get("training", {})
        return dataclasses.replace(self.training, **extra)

    def vit_config(self, mechanism: str, spec: D.DatasetSpec) -> ViTConfig:
        over = self.overrides.get(mechanism, {})
        attn = {**self.attention, **over.get("attention", {}), "variant": mechanism}
        model = {**self.model, **over.get("model", {})}
        model.setdefault("image_size", spec.image_size)
        model.setdefault("in_channels", spec.channels)
        model["num_classes"] = spec.num_classes
        return ViTConfig(attention=AttentionConfig(**attn), **model)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d.pop("source_text")
        return d


def _build(cls, values: dict | None):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def config_from_dict(d: dict[str, Any], source_text: str = "") -> ExperimentConfig:
    d = dict(d or {})
    dataset = _build(DatasetConfig, d.pop("dataset", None))
    training = _build(TrainConfig, d.pop("training", None))
    unknown = set(d) - {f.name for f in dataclasses.fields(ExperimentConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(dataset=dataset, training=training, source_text=source_text, **d)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML experiment config; the text is kept verbatim for the report."""
    text = Path(path).read_text()
    return config_from_dict(yaml.safe_load(text) or {}, source_text=text)


# ---------------------------------------------------------------------------
# data


def make_synthetic(
    train_size: int = 200,
    test_size: int = 100,
    num_classes: int = 2,
    image_size: int = 8,
    channels: int = 3,
    seed: int = 0,
) -> D.Dataset:
    """Separable toy images: each class owns a random colour template plus noise."""
    rng = make_rng(seed, "synthetic")
    templates = rng.uniform(0.2, 0.8, size=(num_classes, channels, image_size, image_size))

    def draw(n):
        labels = np.arange(n) % num_classes
        rng.shuffle(labels)
        noise = rng.normal(0.0, 0.05, size=(n, channels, image_size, image_size))
        return D.Split(np.clip(templates[labels] + noise, 0, 1).astype(np.float32), labels.astype(np.int64))

    train, test = draw(train_size), draw(test_size)
    means = tuple(float(v) for v in train.images.mean(axis=(0, 2, 3)))
    stds = tuple(float(v) for v in train.images.std(axis=(0, 2, 3)))
    spec = D.DatasetSpec("synthetic", "", image_size, channels, num_classes, means, stds, train_size, test_size)
    return D.Dataset(spec, train, test)


def load_dataset(cfg: ExperimentConfig) -> D.Dataset:
    """Load the configured dataset and apply the desk-scale subsample."""
    dc = cfg.dataset
    name = dc.name.lower()
    if name in ("cifar10", "cifar100"):
        ds = D.load_cifar(dc.path, "c10" if name == "cifar10" else "c100")
    elif name == "raw":
        if not (dc.train_path and dc.test_path):
            raise ConfigError("raw datasets need dataset.train_path and dataset.test_path")
        ds = D.load_raw(dc.train_path, dc.test_path)
    elif name == "synthetic":
        n_train = dc.train_subsample or 200
        n_test = dc.test_subsample or 100
        return make_synthetic(n_train, n_test, dc.num_classes, dc.image_size, seed=cfg.seed)
    else:
        raise ConfigError(f"unknown dataset {dc.name!r}")
    if dc.full:
        return ds
    return D.restrict(ds, dc.train_subsample, dc.test_subsample, cfg.seed)


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class TrainResult:
    model: ViTModel
    epoch_losses: list[float]
    seconds: float
    failed: bool = False
    diverged_epoch: int | None = None
    last_finite_loss: float | None = None

    @property
    def diagnostic(self) -> str:
        if not self.failed:
            return ""
        last = "none" if self.last_finite_loss is None else f"{self.last_finite_loss:.4f}"
        return f"diverged at epoch {self.diverged_epoch}; last finite loss {last}"


def train_model(
    model_cfg: ViTConfig,
    train: D.Split,
    spec: D.DatasetSpec,
    tc: TrainConfig,
    seed: int,
    corruption: CorruptionSpec | None = None,
) -> TrainResult:
    """Train from a fresh initialization; corruption (if given) is drawn per epoch.

    Divergence (a non-finite loss or parameter) stops training and marks the
    result failed rather than raising.
    """
    t0 = time.perf_counter()
    model = ViTModel.init(model_cfg, seed)
    steps_per_epoch = math.ceil(len(train) / tc.batch_size)
    total = max(1, steps_per_epoch * tc.epochs)
    opt = make_optimizer(
        model,
        lr=tc.lr,
        total_steps=total,
        warmup_steps=int(round(tc.warmup_epochs * steps_per_epoch)),
        weight_decay=tc.weight_decay,
        min_lr=tc.min_lr,
        grad_clip=tc.grad_clip,
    )
    dtype = np.dtype(model_cfg.dtype)
    losses: list[float] = []
    last_finite = None
    for epoch in range(tc.epochs):
        shuffle = make_rng(seed, "shuffle", epoch)
        aug_rng = make_rng(seed, "augment", epoch)
        total_loss, count = 0.0, 0
        for images, labels, indices in D.iter_batches(train, tc.batch_size, shuffle):
            if corruption is not None and corruption.active:
                images = corrupt_batch(images, corruption, SPLIT_TRAIN, indices, epoch=epoch)
            if tc.augment:
                images = D.augment(images, aug_rng)
            x = normalize(images, spec.means, spec.stds).astype(dtype, copy=False)
            loss, opt = train_step(model, (x, labels), opt)
            if not np.isfinite(loss) or not model.all_finite():
                log.warning("training diverged at epoch %d", epoch)
                return TrainResult(model, losses, time.perf_counter() - t0, True, epoch, last_finite)
            last_finite = loss
            total_loss += loss * len(labels)
            count += len(labels)
        losses.append(total_loss / max(count, 1))
        log.info("epoch %d loss %.4f", epoch, losses[-1])
    return TrainResult(model, losses, time.perf_counter() - t0, last_finite_loss=last_finite)


def evaluate(
    model: ViTModel,
    test: D.Split,
    spec: D.DatasetSpec,
    corruption: CorruptionSpec | None = None,
    batch_size: int = 500,
) -> float:
    """Test accuracy in percent (integer correct count / N)."""
    images = test.images
    if corruption is not None and corruption.active:
        images = corrupt_batch(images, corruption, SPLIT_TEST, test.indices)
    x = normalize(images, spec.means, spec.stds).astype(np.dtype(model.config.dtype), copy=False)
    correct = int((predict(model, x, batch_size) == test.labels).sum())
    return 100.0 * correct / len(test)


# ---------------------------------------------------------------------------
# report


@dataclass
class ReportCell:
    mechanism: str
    scenario: str
    absolute_pct: float | None
    baseline_pct: float | None = None
    relative_pct: float | None = None
    seed: int = 0
    wall_seconds: float | None = None
    status: str = "ok"
    diagnostic: str = ""
    model_hash: str = ""

    @property
    def failed(self) -> bool:
        return self.status != "ok"


@dataclass
class ExperimentReport:
    cells: list[ReportCell] = field(default_factory=list)
    seed: int = 0
    config: str = ""
    dataset: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION

    def cell(self, mechanism: str, scenario: str | Scenario) -> ReportCell | None:
        scenario = parse_scenario(scenario).value
        mechanism = canonical_variant(mechanism)
        for c in self.cells:
            if c.mechanism == mechanism and c.scenario == scenario:
                return c
        return None

    @property
    def mechanisms(self) -> list[str]:
        seen = []
        for c in self.cells:
            if c.mechanism not in seen:
                seen.append(c.mechanism)
        return seen

    def fill_relative(self) -> "ExperimentReport":
        """Set baseline and relative accuracy of every cell from its mechanism's clean cell."""
        for c in self.cells:
            clean = self.cell(c.mechanism, Scenario.CLEAN)
            base = clean.absolute_pct if clean is not None and not clean.failed else None
            c.baseline_pct = base
            if c.failed or c.absolute_pct is None or base is None or base <= 0:
                c.relative_pct = None
            else:
                c.relative_pct = relative_accuracy(c.absolute_pct, base)
        return self


def _sort_key(c: ReportCell):
    mech = VARIANTS.index(c.mechanism) if c.mechanism in VARIANTS else len(VARIANTS)
    return mech, [s.value for s in SCENARIO_ORDER].index(c.scenario), c.mechanism


def merge_reports(reports: Iterable[ExperimentReport]) -> ExperimentReport:
    """Combine cells (later reports win on duplicates) and recompute relatives."""
    reports = list(reports)
    cells: dict[tuple[str, str], ReportCell] = {}
    for r in reports:
        for c in r.cells:
            cells[(c.mechanism, c.scenario)] = copy.deepcopy(c)
    first = reports[0] if reports else ExperimentReport()
    merged = ExperimentReport(sorted(cells.values(), key=_sort_key), first.seed, first.config, first.dataset)
    return merged.fill_relative()


def run_experiment(cfg: ExperimentConfig, dataset: D.Dataset | None = None) -> ExperimentReport:
    """Train and evaluate every configured mechanism under every scenario.

    Clean and test-only scenarios share one clean-trained model; train-only
    and train+test share one corruption-trained model. Only the models some
    requested scenario uses are trained. Each cell records the parameter hash
    of the model it scored. Cells without a clean cell of the same mechanism
    get no relative accuracy; :func:`merge_reports` fills it in later.
    """
    ds = dataset if dataset is not None else load_dataset(cfg)
    scenarios = [parse_scenario(s) for s in cfg.scenarios]
    needs_corrupt_train = any(s.corrupts_train for s in scenarios)
    cspec = cfg.corruption_spec(Scenario.TRAIN_AND_TEST)
    report = ExperimentReport(seed=cfg.seed, config=cfg.source_text, dataset=ds.spec.name)
    for mech in cfg.mechanisms:
        mcfg = cfg.vit_config(mech, ds.spec)
        tc = cfg.training_for(mech)
        log.info("mechanism %s: %d parameters", mech, ViTModel.init(mcfg, cfg.seed).num_parameters())
        runs = {}
        if any(not s.corrupts_train for s in scenarios):
            runs[False] = train_model(mcfg, ds.train, ds.spec, tc, cfg.seed)
        if needs_corrupt_train:
            runs[True] = train_model(mcfg, ds.train, ds.spec, tc, cfg.seed, corruption=cspec)
        for scen in scenarios:
            run = runs[scen.corrupts_train]
            cell = ReportCell(mech, scen.value, None, seed=cfg.seed, model_hash=run.model.parameter_hash())
            if run.failed:
                cell.status, cell.diagnostic = "failed", run.diagnostic
                cell.wall_seconds = run.seconds
            else:
                t0 = time.perf_counter()
                acc = evaluate(run.model, ds.test, ds.spec, cspec if scen.corrupts_test else None, tc.eval_batch_size)
                cell.absolute_pct = round(acc, 1)
                cell.wall_seconds = run.seconds + time.perf_counter() - t0
            report.cells.append(cell)
    report.cells.sort(key=_sort_key)
    return report.fill_relative()


# ---------------------------------------------------------------------------
# emission


def _fmt(value: float | None, digits: int) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def _status_text(c: ReportCell) -> str:
    if not c.failed:
        return "ok"
    return f"{c.status}: {c.diagnostic}" if c.diagnostic else c.status


def report_to_csv(report: ExperimentReport, timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in report.cells:
        w.writerow([
            c.mechanism,
            c.scenario,
            _fmt(c.absolute_pct, 1),
            _fmt(c.baseline_pct, 1),
            _fmt(c.relative_pct, 1),
            c.seed,
            _fmt(c.wall_seconds, 2) if timing else "",
            _status_text(c),
        ])
    return buf.getvalue()


def _round(value: float | None, digits: int) -> float | None:
    return None if value is None else round(float(value), digits)


def report_to_dict(report: ExperimentReport, timing: bool = True) -> dict[str, Any]:
    return {
        "schema_version": report.schema_version,
        "seed": report.seed,
        "dataset": report.dataset,
        "config": report.config,
        "cells": [
            {
                "mechanism": c.mechanism,
                "scenario": c.scenario,
                "absolute_pct": _round(c.absolute_pct, 1),
                "baseline_pct": _round(c.baseline_pct, 1),
                "relative_pct": _round(c.relative_pct, 1),
                "seed": c.seed,
                "wall_seconds": _round(c.wall_seconds, 2) if timing else None,
                "status": c.status,
                "diagnostic": c.diagnostic,
                "model_hash": c.model_hash,
            }
            for c in report.cells
        ],
    }


def report_from_dict(d: dict[str, Any]) -> ExperimentReport:
    version = d.get("schema_version", REPORT_SCHEMA_VERSION)
    if version > REPORT_SCHEMA_VERSION:
        raise ConfigError(f"report schema {version} is newer than supported {REPORT_SCHEMA_VERSION}")
    cells = [ReportCell(**c) for c in d.get("cells", [])]
    return ExperimentReport(cells, d.get("seed", 0), d.get("config", ""), d.get("dataset", ""), version)


def report_to_json(report: ExperimentReport, timing: bool = True) -> str:
    return json.dumps(report_to_dict(report, timing), indent=2, sort_keys=True) + "\n"


def load_report(path: str | Path) -> ExperimentReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def render_table(report: ExperimentReport) -> str:
    """Plain-text table in the scenario-rows x mechanism-columns layout."""
    mechs = report.mechanisms
    header = ["Condition"] + [MECHANISM_TITLES.get(m, m) for m in mechs]
    rows = [header]
    for scen in SCENARIO_ORDER:
        if not any(report.cell(m, scen) for m in mechs):
            continue
        row = [SCENARIO_TITLES[scen]]
        for m in mechs:
            c = report.cell(m, scen)
            if c is None:
                row.append("-")
            elif scen is Scenario.CLEAN or c.failed:
                row.append(format_cell(None if c.failed else c.absolute_pct))
            else:
                row.append(format_cell(c.absolute_pct, c.relative_pct))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_emit(report: ExperimentReport, fmt: str, path: str | Path, timing: bool = True) -> Path:
    """Write ``report`` as ``csv``, ``json`` or ``table`` text.

    Output depends only on the report contents (and ``timing``), so equal
    reports give byte-identical files.

    Raises:
        OSError: if ``path`` cannot be written.
    """
    fmt = fmt.lower()
    if fmt == "csv":
        text = report_to_csv(report, timing)
    elif fmt == "json":
        text = report_to_json(report, timing)
    elif fmt == "table":
        text = render_table(report)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path
