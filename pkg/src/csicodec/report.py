"""CSV tables and SVG rate-distortion plots."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

COLUMNS = ("series", "variant", "lam", "rate", "entropy", "nmse_db", "rho")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


@dataclass
class ResultRow:
    series: str
    variant: str
    lam: float
    rate: float
    entropy: float
    nmse_db: float
    rho: float


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def write_csv(rows: list[ResultRow], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, c)) for c in COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            ResultRow(r["series"], r["variant"], float(r["lam"]), float(r["rate"]),
                      float(r["entropy"]), float(r["nmse_db"]), float(r["rho"]))
            for r in reader
        ]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_svg(rows: list[ResultRow], width: int = 480, height: int = 320,
               title: str = "NMSE vs feedback rate") -> str:
    """Line plot of NMSE (dB) against bits per entry, one polyline per
    series, points joined in order of increasing rate."""
    series: dict[str, list[ResultRow]] = {}
    for row in rows:
        series.setdefault(row.series, []).append(row)
    left, right, top, bottom = 60, 20, 30, 45
    xs = [r.rate for r in rows]
    ys = [r.nmse_db for r in rows]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    # pad degenerate ranges so single points land inside the frame
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 0.5 * max(abs(x0), 1e-3), x1 + 0.5 * max(abs(x1), 1e-3)
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.1f}" y="{top + ph + 15}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">bits per entry</text>')
    out.append(
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">NMSE (dB)</text>'
    )
    for i, (name, pts) in enumerate(series.items()):
        colour = PALETTE[i % len(PALETTE)]
        pts = sorted(pts, key=lambda r: (r.rate, r.lam))
        coords = " ".join(f"{px(r.rate):.2f},{py(r.nmse_db):.2f}" for r in pts)
        if len(pts) > 1:
            out.append(f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        for r in pts:
            out.append(f'<circle cx="{px(r.rate):.2f}" cy="{py(r.nmse_db):.2f}" r="3" fill="{colour}"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw - 110}" y1="{ly - 4}" x2="{left + pw - 90}" y2="{ly - 4}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 85}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_results(rows: list[ResultRow], csv_path, svg_path) -> None:
    if not rows:
        raise ValueError("nothing to emit")
    write_csv(rows, csv_path)
    Path(svg_path).write_text(render_svg(rows))
