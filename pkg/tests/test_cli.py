import csv
import json

import numpy as np
import pytest

from attnrobust import data as D
from attnrobust.cli import build_parser, main
from attnrobust.harness import ExperimentReport, ReportCell, report_emit

CONFIG = """\
# tiny synthetic run
seed: 5
dataset:
  name: synthetic
  train_subsample: 80
  test_subsample: 40
  image_size: 8
model: {patch_size: 4, embed_dim: 8, depth: 1, heads: 2}
training: {epochs: 2, batch_size: 40, lr: 0.003, warmup_epochs: 0}
corruption: {kind: fog, severity: 1.0}
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(CONFIG)
    return path


def test_parser_exposes_documented_flags():
    p = build_parser()
    args = p.parse_args(["train", "--config", "c.yaml", "--seed", "18446744073709551615",
                         "--mechanism", "doubly-stochastic", "--scenario", "both", "--subsample", "10", "--out", "m.npz"])
    assert args.mechanism == ["doubly-stochastic"] and args.scenario == "both"
    assert args.seed == 2**64 - 1 and args.subsample == 10
    with pytest.raises(SystemExit):
        p.parse_args(["train", "--mechanism", "quadratic", "--out", "x"])


def test_train_eval_report_flow(tmp_path, config, capsys):
    ckpt = tmp_path / "m.npz"
    assert main(["train", "--config", str(config), "--mechanism", "cosine", "--scenario", "train", "--out", str(ckpt)]) == 0
    cells = []
    for scen in ("clean", "both"):
        out = tmp_path / f"{scen}.json"
        assert main(["eval", "--checkpoint", str(ckpt), "--scenario", scen, "--out", str(out)]) == 0
        cells.append(out)
    out_dir = tmp_path / "rep"
    assert main(["report", *map(str, cells), "--out", str(out_dir)]) == 0
    for name in ("report.csv", "report.json", "table.txt", "absolute_heatmap.png", "relative_accuracy.png"):
        assert (out_dir / name).stat().st_size > 0
    rows = list(csv.DictReader((out_dir / "report.csv").open()))
    assert [r["scenario"] for r in rows] == ["clean", "both"]
    assert rows[0]["relative_pct"] == "100.0"


def test_run_writes_everything_and_is_reproducible(tmp_path, config):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--config", str(config), "--mechanism", "softmax", "--no-timing", "--out", str(out)]) == 0
        outs.append(out)
    for f in ("report.csv", "report.json", "table.txt"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    data = json.loads((outs[0] / "report.json").read_text())
    assert data["config"] == CONFIG
    assert {c["scenario"] for c in data["cells"]} == {"clean", "train", "test", "both"}


def test_run_overrides_seed_and_scenarios(tmp_path, config):
    out = tmp_path / "o"
    main(["run", "--config", str(config), "--seed", "9", "--mechanism", "linear",
          "--scenario", "clean", "test", "--no-figures", "--out", str(out)])
    rows = list(csv.DictReader((out / "report.csv").open()))
    assert [r["scenario"] for r in rows] == ["clean", "test"]
    assert {r["seed"] for r in rows} == {"9"}


def test_corrupt_exports_raw_containers(tmp_path, config):
    out = tmp_path / "c"
    assert main(["corrupt", "--config", str(config), "--scenario", "test", "--out", str(out)]) == 0
    train, k = D.parse_raw_bytes((out / "train.bin").read_bytes())
    test, _ = D.parse_raw_bytes((out / "test.bin").read_bytes())
    assert k == 2 and len(train) == 80 and len(test) == 40
    clean = main(["corrupt", "--config", str(config), "--scenario", "clean", "--out", str(tmp_path / "k")])
    assert clean == 0
    clean_test, _ = D.parse_raw_bytes((tmp_path / "k" / "test.bin").read_bytes())
    clean_train, _ = D.parse_raw_bytes((tmp_path / "k" / "train.bin").read_bytes())
    np.testing.assert_array_equal(train.images, clean_train.images)
    assert not np.array_equal(test.images, clean_test.images)
    assert test.images.mean() > clean_test.images.mean()


def test_gradcheck_passes(tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert main(["gradcheck", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert rows and all(r["passed"] == "1" for r in rows)
    assert "gradient checks passed" in capsys.readouterr().out


def test_missing_dataset_is_reported(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"dataset: {{name: cifar10, path: {tmp_path / 'none'}}}\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "error:" in capsys.readouterr().err


def test_report_of_failed_cell(tmp_path):
    rep = ExperimentReport([ReportCell("linear", "clean", 50.0),
                            ReportCell("linear", "train", None, status="failed", diagnostic="diverged at epoch 0; last finite loss none")])
    src = report_emit(rep, "json", tmp_path / "in.json")
    assert main(["report", str(src), "--out", str(tmp_path / "o")]) == 0
    assert "failed" in (tmp_path / "o" / "table.txt").read_text()
