import pytest

from radlabeler.figures import render_score_figure

ROWS = [
    ("Pleural effusion", 0.82, 0.75, 0.88),
    ("Edema", 0.64, 0.55, 0.71),
    ("All-W", 0.78, 0.72, 0.83),
]


def test_render_score_figure_writes_png(tmp_path):
    path = tmp_path / "scores.png"
    render_score_figure(ROWS, str(path), "F1", title="presence (cxr)")
    data = path.read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(data) > 1000


def test_render_score_figure_handles_collapsed_intervals(tmp_path):
    path = tmp_path / "scores.png"
    render_score_figure([("Alpha", 1.0, 1.0, 1.0)], str(path), "F1")
    assert path.exists()


def test_render_score_figure_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        render_score_figure([], str(tmp_path / "scores.png"), "F1")
