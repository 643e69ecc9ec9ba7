import matplotlib.pyplot as plt
import pytest

from attnrobust.harness import ExperimentReport, ReportCell
from attnrobust.plotting import absolute_heatmap, relative_chart, render_figures

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def report(scenarios=("clean", "train", "test", "both")):
    cells = []
    for i, m in enumerate(("softmax", "cosine", "doubly_stochastic")):
        for j, s in enumerate(scenarios):
            cells.append(ReportCell(m, s, 80.0 - 5 * j - i))
    cells.append(ReportCell("linear", "clean", 70.0))
    cells.append(ReportCell("linear", "train", None, status="failed"))
    return ExperimentReport(cells).fill_relative()


def test_render_figures_writes_pngs(tmp_path):
    paths = render_figures(report(), tmp_path)
    assert [p.name for p in paths] == ["absolute_heatmap.png", "relative_accuracy.png"]
    for p in paths:
        assert p.read_bytes()[:8] == PNG_MAGIC
    assert not plt.get_fignums()


def test_bar_fallback_with_few_scenarios(tmp_path):
    path = relative_chart(report(("clean", "test")), tmp_path / "rel.png")
    assert path.read_bytes()[:8] == PNG_MAGIC


@pytest.mark.parametrize("fmt", ["svg", "pdf"])
def test_vector_formats(tmp_path, fmt):
    path = absolute_heatmap(report(), tmp_path / f"abs.{fmt}")
    assert path.stat().st_size > 0


def test_empty_report_still_renders(tmp_path):
    for p in render_figures(ExperimentReport(), tmp_path):
        assert p.exists()
