"""Session-accuracy SVG charts and Markdown ablation tables.

The SVG is written by hand: fixed 800x500 viewBox, 10% margins, linear
axes, one polyline per series. Output contains no timestamps, so the same
inputs always give the same bytes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from .harness.experiment import read_metrics_csv

__all__ = [
    "Series",
    "ReportError",
    "ConsistencyError",
    "render_svg",
    "ablation_table",
    "load_run_summary",
    "check_a_avg",
    "sweep_series",
]

WIDTH, HEIGHT = 800, 500
MARGIN_X, MARGIN_Y = WIDTH * 0.1, HEIGHT * 0.1
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf", "#7f7f7f")


class ReportError(ValueError):
    """Unreadable or malformed report input."""


class ConsistencyError(RuntimeError):
    """A summary JSON disagrees with the CSV it was derived from."""


@dataclass
class Series:
    label: str
    x: list[float]
    y: list[float]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (step * m) <= n:
            step *= m
            break
    first = math.ceil(lo / step - 1e-9) * step
    out, v = [], first
    while v <= hi + 1e-9 * step:
        out.append(round(v, 10))
        v += step
    return out


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def render_svg(series: list[Series], title: str = "", xlabel: str = "session", ylabel: str = "accuracy") -> str:
    if not series:
        raise ReportError("nothing to plot")
    xs = [x for s in series for x in s.x]
    ys = [y for s in series for y in s.y]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    pw, ph = WIDTH - 2 * MARGIN_X, HEIGHT - 2 * MARGIN_Y

    def px(x):
        return MARGIN_X + (x - x0) / (x1 - x0) * pw

    def py(y):
        return HEIGHT - MARGIN_Y - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" '
        'font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="{MARGIN_Y / 2:.1f}" text-anchor="middle" font-size="15">{escape(title)}</text>')
    bottom, left = HEIGHT - MARGIN_Y, MARGIN_X
    out.append(f'<line x1="{left:.1f}" y1="{bottom:.1f}" x2="{WIDTH - MARGIN_X:.1f}" y2="{bottom:.1f}" stroke="black"/>')
    out.append(f'<line x1="{left:.1f}" y1="{MARGIN_Y:.1f}" x2="{left:.1f}" y2="{bottom:.1f}" stroke="black"/>')
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.1f}" y1="{bottom:.1f}" x2="{px(t):.1f}" y2="{bottom + 5:.1f}" stroke="black"/>')
        out.append(f'<text x="{px(t):.1f}" y="{bottom + 18:.1f}" text-anchor="middle">{_num(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5:.1f}" y1="{py(t):.1f}" x2="{left:.1f}" y2="{py(t):.1f}" stroke="black"/>')
        out.append(f'<line x1="{left:.1f}" y1="{py(t):.1f}" x2="{WIDTH - MARGIN_X:.1f}" y2="{py(t):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 8:.1f}" y="{py(t) + 4:.1f}" text-anchor="end">{_num(t)}</text>')
    out.append(f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 12:.1f}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{HEIGHT / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {HEIGHT / 2:.1f})">{escape(ylabel)}</text>'
    )
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s.x, s.y))
        out.append(f'<polyline class="series" data-label="{escape(s.label)}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{pts}"/>')
        for x, y in zip(s.x, s.y):
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        ly = MARGIN_Y + 8 + 18 * i
        lx = WIDTH - MARGIN_X - 170
        out.append(f'<line x1="{lx:.1f}" y1="{ly:.1f}" x2="{lx + 24:.1f}" y2="{ly:.1f}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 30:.1f}" y="{ly + 4:.1f}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _cell(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, dict):
        return f"{100 * v['mean']:.1f} ± {100 * v['std']:.1f}"
    return f"{100 * v:.1f}"


def ablation_table(runs: list[dict]) -> str:
    """Markdown table with one row per run and columns A_B, A_N, A_L, A_avg (percent)."""
    header = ["run", "CAGP", "PCAP", "CDAP", "MTM", "A_B", "A_N", "A_L", "A_avg"]
    rows = []
    for r in runs:
        cfg = r.get("config", {})
        on = {**cfg.get("train", {}), "mtm": cfg.get("mtm", {}).get("enabled")}
        marks = ["✓" if on.get(k) else "" for k in ("cagp", "pcap", "cdap", "mtm")]
        rows.append([r.get("label", "?"), *marks, *(_cell(r.get(k)) for k in ("a_b", "a_n", "a_l", "a_avg"))])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = [line(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def load_run_summary(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or "per_session" not in data or "a_avg" not in data:
        raise ReportError(f"{path}: not a run summary (needs per_session and a_avg)")
    return data


def check_a_avg(summary: dict, json_path, tol: float = 1e-12) -> float | None:
    """Recompute A_avg from the run's CSV and compare with the JSON value.

    Returns the recomputed value, or None when the summary names no CSV
    (multi-seed summaries).
    """
    name = summary.get("csv")
    if not name:
        return None
    csv_path = Path(json_path).parent / name
    try:
        rows = read_metrics_csv(csv_path)
    except (OSError, ValueError) as exc:
        raise ReportError(f"{csv_path}: {exc}") from exc
    accs = [float(r["overall_acc"]) for r in rows]
    recomputed = sum(accs) / len(accs)
    if abs(recomputed - summary["a_avg"]) > tol:
        raise ConsistencyError(
            f"{json_path}: a_avg {summary['a_avg']!r} disagrees with mean of {csv_path.name} ({recomputed!r})"
        )
    return recomputed


def sweep_series(path, x: str = "lambda_mix", y: str = "a_l") -> list[Series]:
    """One series per combination of the non-x grid parameters, mean ``y`` against ``x``."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    except OSError as exc:
        raise ReportError(f"{path}: {exc}") from exc
    if not rows or x not in rows[0] or y not in rows[0]:
        raise ReportError(f"{path}: sweep CSV needs columns {x} and {y}")
    keys = [k for k in ("lambda_mix", "split_layer", "beta_alpha", "dropout_rate") if k != x and k in rows[0]]
    # seeds of one grid cell collapse to their mean, giving one point per cell
    groups: dict[tuple, dict[float, list[float]]] = {}
    for r in rows:
        if r.get("control"):
            continue
        cell = groups.setdefault(tuple(r[k] for k in keys), {})
        cell.setdefault(float(r[x]), []).append(float(r[y]))
    out = []
    for key, cell in groups.items():
        xs = sorted(cell)
        label = ", ".join(f"{k}={v}" for k, v in zip(keys, key)) or y
        out.append(Series(label, xs, [sum(cell[v]) / len(cell[v]) for v in xs]))
    return out
