"""Report bundle: summary JSON, per-fold CSV and SVG figures.

Figures are plain SVG text built from the :class:`EvalSummary` values, so
every number printed in a figure is the number stored in the summary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .evaluation import EvalSummary, FoldResult, ProtocolError, folds_csv, summarize

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def pct(value: float) -> str:
    return f"{100.0 * value:.1f}%"


@dataclass
class ReportBundle:
    summary_json: Path
    folds_csv: list[Path] = field(default_factory=list)
    histogram_svg: Path | None = None
    distribution_svg: Path | None = None


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">'
    )
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _text(x, y, s, anchor="middle", size=12, weight="normal") -> str:
    return (
        f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" font-size="{size}" '
        f'font-weight="{weight}">{escape(s)}</text>'
    )


def summary_caption(s: EvalSummary) -> str:
    return (
        f"median {pct(s.median)}  max {pct(s.max)}  "
        f">= {pct(s.threshold)}: {s.count_above_threshold}/{s.n_subjects}"
    )


def histogram_svg(summaries: Sequence[EvalSummary]) -> str:
    """One panel per model; bars count subjects per 10-point accuracy bin."""
    panel_w, panel_h = 420, 260
    left, bottom, top = 50, 50, 50
    plot_w, plot_h = panel_w - left - 20, panel_h - top - bottom
    width = panel_w * len(summaries)
    body = []
    ymax = max(max(s.histogram) for s in summaries) or 1
    for p, s in enumerate(summaries):
        ox = p * panel_w
        colour = PALETTE[p % len(PALETTE)]
        body.append(_text(ox + panel_w / 2, 20, s.model or f"model {p + 1}", size=14, weight="bold"))
        body.append(_text(ox + panel_w / 2, 38, summary_caption(s), size=11))
        x0, y0 = ox + left, top + plot_h
        body.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>')
        body.append(f'<line x1="{x0}" y1="{top}" x2="{x0}" y2="{y0}" stroke="black"/>')
        bar_w = plot_w / 10
        for b, count in enumerate(s.histogram):
            h = plot_h * count / ymax
            bx = x0 + b * bar_w
            body.append(
                f'<rect x="{bx + 1:.1f}" y="{y0 - h:.1f}" width="{bar_w - 2:.1f}" height="{h:.1f}" fill="{colour}"/>'
            )
            if count:
                body.append(_text(bx + bar_w / 2, y0 - h - 3, str(count), size=10))
            body.append(_text(bx, y0 + 14, str(10 * b), size=9))
        body.append(_text(x0 + plot_w, y0 + 14, "100", size=9))
        tx = x0 + plot_w * s.threshold
        body.append(
            f'<line x1="{tx:.1f}" y1="{top}" x2="{tx:.1f}" y2="{y0}" stroke="red" stroke-dasharray="4,3"/>'
        )
        body.append(_text(x0 + plot_w / 2, y0 + 32, "test accuracy (%)", size=11))
    return _svg(width, panel_h, body)


def _quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    q1, q2, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
    return float(q1), float(q2), float(q3)


def distribution_svg(summaries: Sequence[EvalSummary]) -> str:
    """Box plot per model with individual subjects and the threshold line."""
    width, height = max(320, 140 * len(summaries) + 100), 360
    left, top, bottom = 60, 30, 70
    plot_h = height - top - bottom
    plot_w = width - left - 20

    def y_of(acc: float) -> float:
        return top + plot_h * (1.0 - acc)

    body = [f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>']
    for tick in range(0, 101, 10):
        y = y_of(tick / 100)
        body.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        body.append(_text(left - 8, y + 4, str(tick), anchor="end", size=9))
    thr = summaries[0].threshold
    ty = y_of(thr)
    body.append(
        f'<line x1="{left}" y1="{ty:.1f}" x2="{left + plot_w}" y2="{ty:.1f}" stroke="red" stroke-dasharray="5,4"/>'
    )
    body.append(_text(left + plot_w, ty - 4, f"threshold {pct(thr)}", anchor="end", size=10))
    slot = plot_w / len(summaries)
    for i, s in enumerate(summaries):
        cx = left + slot * (i + 0.5)
        colour = PALETTE[i % len(PALETTE)]
        q1, _, q3 = _quartiles(s.accuracies)
        lo, hi = min(s.accuracies), s.max
        bw = min(60.0, slot * 0.5)
        body.append(f'<line x1="{cx:.1f}" y1="{y_of(hi):.1f}" x2="{cx:.1f}" y2="{y_of(lo):.1f}" stroke="black"/>')
        body.append(
            f'<rect x="{cx - bw / 2:.1f}" y="{y_of(q3):.1f}" width="{bw:.1f}" '
            f'height="{max(y_of(q1) - y_of(q3), 0.5):.1f}" fill="{colour}" fill-opacity="0.5" stroke="black"/>'
        )
        my = y_of(s.median)
        body.append(f'<line x1="{cx - bw / 2:.1f}" y1="{my:.1f}" x2="{cx + bw / 2:.1f}" y2="{my:.1f}" stroke="black" stroke-width="2"/>')
        for j, a in enumerate(s.accuracies):
            jitter = ((j * 37) % 11 - 5) * bw / 30
            body.append(f'<circle cx="{cx + jitter:.1f}" cy="{y_of(a):.1f}" r="2" fill="{colour}"/>')
        body.append(_text(cx, top + plot_h + 16, s.model or f"model {i + 1}", size=12, weight="bold"))
        body.append(_text(cx, top + plot_h + 32, f"median {pct(s.median)}", size=10))
        body.append(_text(cx, top + plot_h + 46, f"max {pct(s.max)}", size=10))
        body.append(_text(cx, top + plot_h + 60, f">= {pct(thr)}: {s.count_above_threshold}/{s.n_subjects}", size=10))
    return _svg(int(width), height, body)


def emit_report(
    results: Mapping[str, Sequence[FoldResult] | EvalSummary],
    out_dir,
    config_hashes: Mapping[str, str] | None = None,
) -> ReportBundle:
    """Write summary JSON, per-model fold CSVs and both figures to ``out_dir``.

    ``results`` maps model name to its fold results (or a ready summary).
    """
    if not results:
        raise ProtocolError("no model results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_hashes = config_hashes or {}
    summaries = []
    bundle = ReportBundle(summary_json=out / "summary.json")
    for name, value in results.items():
        if isinstance(value, EvalSummary):
            summaries.append(value)
            continue
        folds = [r for r in value if r.ok]
        if not folds:
            raise ProtocolError(f"model {name!r} has no completed folds")
        summaries.append(summarize(folds, model=name, config_hash=config_hashes.get(name, "")))
        path = out / f"folds_{name}.csv"
        path.write_text(folds_csv(folds))
        bundle.folds_csv.append(path)
    bundle.summary_json.write_text(
        json.dumps({"models": [s.to_dict() for s in summaries]}, indent=2, sort_keys=True) + "\n"
    )
    bundle.histogram_svg = out / "histogram.svg"
    bundle.histogram_svg.write_text(histogram_svg(summaries))
    bundle.distribution_svg = out / "distribution.svg"
    bundle.distribution_svg.write_text(distribution_svg(summaries))
    return bundle


def read_summary_bundle(path) -> list[EvalSummary]:
    data = json.loads(Path(path).read_text())
    return [EvalSummary.from_dict(d) for d in data["models"]]
