import re

import pytest

from csicodec.report import COLUMNS, ResultRow, emit_results, read_csv, render_svg, write_csv

ROWS = [
    ResultRow("single", "nearest", 1.0, 0.11, 0.1, -4.2, 0.81),
    ResultRow("single", "nearest", 4.0, 0.31234567, 0.3, -8.0, 0.93),
    ResultRow("joint", "K=2", 4.0, 0.29, 0.28, -9.1, 0.95),
]


class TestCsv:
    def test_round_trip(self, tmp_path):
        write_csv(ROWS, tmp_path / "r.csv")
        back = read_csv(tmp_path / "r.csv")
        assert [r.series for r in back] == ["single", "single", "joint"]
        assert back[1].rate == pytest.approx(0.312346)
        assert back[2].nmse_db == -9.1

    def test_header_and_precision(self, tmp_path):
        write_csv(ROWS[1:2], tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == ",".join(COLUMNS)
        assert "0.312346" in lines[1]

    def test_byte_identical(self, tmp_path):
        write_csv(ROWS, tmp_path / "a.csv")
        write_csv(ROWS, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestSvg:
    def test_deterministic(self):
        assert render_svg(ROWS) == render_svg(list(ROWS))

    def test_one_polyline_per_multi_point_series(self):
        svg = render_svg(ROWS)
        assert svg.count("<polyline") == 1
        assert svg.count("<circle") == 3
        assert ">single<" in svg and ">joint<" in svg

    def test_single_point_inside_frame(self):
        svg = render_svg(ROWS[:1], width=400, height=300)
        cx, cy = (float(v) for v in re.search(r'<circle cx="([\d.]+)" cy="([\d.]+)"', svg).groups())
        assert 0 < cx < 400 and 0 < cy < 300

    def test_labels_escaped(self):
        svg = render_svg([ResultRow("a<b", "v", 1.0, 0.1, 0.1, -1.0, 0.5)])
        assert "a&lt;b" in svg

    def test_emit(self, tmp_path):
        emit_results(ROWS, tmp_path / "r.csv", tmp_path / "r.svg")
        assert (tmp_path / "r.svg").read_text().startswith("<svg")

    def test_emit_empty(self, tmp_path):
        with pytest.raises(ValueError):
            emit_results([], tmp_path / "r.csv", tmp_path / "r.svg")
