import numpy as np

from structmlm.analysis import AttentionReport
from structmlm.plots import save_heatmap, save_loss_curve, save_metric_histograms, save_report_comparison


def test_loss_curve_png(tmp_path):
    path = tmp_path / "loss.png"
    save_loss_curve(path, [(i, 3.0 / (i + 1)) for i in range(50)])
    assert path.stat().st_size > 1000


def test_heatmap_png(tmp_path):
    path = tmp_path / "heat.png"
    rng = np.random.default_rng(0)
    m = rng.random((6, 6))
    save_heatmap(path, [f"tok{i}" for i in range(6)], m / m.sum(1, keepdims=True))
    assert path.stat().st_size > 1000


def test_metric_histograms_png(tmp_path):
    path = tmp_path / "stats.png"
    save_metric_histograms(path, {"tokens": [3.0, 5.0, 9.0], "headers": [1.0, 2.0, 2.0]})
    assert path.stat().st_size > 1000


def test_report_comparison_png(tmp_path):
    path = tmp_path / "cmp.png"
    a = AttentionReport("sa", 1, 0.12, 0.3, 9)
    b = AttentionReport("vanilla", 1, 0.10, 0.2, 9)
    save_report_comparison(path, a, b)
    assert path.stat().st_size > 1000
