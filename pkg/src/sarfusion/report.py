"""Grid tables and a standalone SVG bar chart of per-class IoU."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .finetune_eval import CLC_LEVEL0

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
           "#da8bc3", "#8c8c8c", "#ccb974", "#64b5cd", "#1b9e77", "#d95f02")


def find_reports(paths) -> list[Path]:
    """Every ``eval_report.json`` under the given run directories (or the files themselves)."""
    found = []
    for p in map(Path, paths):
        if p.is_file():
            found.append(p)
        else:
            found.extend(sorted(p.rglob("eval_report.json")))
    return found


def load_reports(paths) -> list[dict]:
    return [json.loads(p.read_text()) for p in find_reports(paths)]


def cell_label(report: dict) -> str:
    cell = report.get("cell") or {}
    return f"{cell.get('pretrain', '?')}/{cell.get('encoder', '?')}"


def write_iou_long_csv(reports: list[dict], path) -> Path:
    path = Path(path)
    names = [CLC_LEVEL0.names[c] for c in CLC_LEVEL0.codes]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pretrain", "encoder", "class_code", "class_name", "iou"])
        for r in reports:
            cell = r.get("cell") or {}
            for code, name in zip(CLC_LEVEL0.codes, names):
                v = r["iou"].get(name)
                w.writerow([cell.get("pretrain", ""), cell.get("encoder", ""), code, name,
                            "" if v is None else repr(float(v))])
    return path


def write_grid_table(results: dict, objectives, encoders, params: dict, path) -> Path:
    """Rows = pretraining objective, columns = encoder, values = test weighted mIoU."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pretrain", *encoders])
        w.writerow(["parameters", *[params[e] for e in encoders]])
        for o in objectives:
            row = []
            for e in encoders:
                v = results.get((o, e))
                row.append("" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v)))
            w.writerow([o, *row])
    return path


def render_iou_svg(reports: list[dict], width: int = 900, height: int = 420) -> str:
    """Grouped bars: one group per class, one bar per (pretrain, encoder) cell.

    Each bar carries ``data-cell``, ``data-class`` and ``data-iou`` attributes
    holding the exact JSON value (absent classes are drawn at 0 with
    ``data-absent="true"``).
    """
    names = [CLC_LEVEL0.names[c] for c in CLC_LEVEL0.codes]
    left, right, top, bottom = 50, 180, 30, 60
    plot_w, plot_h = width - left - right, height - top - bottom
    n_cells = max(1, len(reports))
    group_w = plot_w / len(names)
    bar_w = group_w * 0.8 / n_cells
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="18" font-size="13">Test IoU by class</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for t in range(0, 11, 2):
        y = top + plot_h * (1 - t / 10)
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{t / 10:.1f}</text>')
    for gi, name in enumerate(names):
        gx = left + gi * group_w + group_w * 0.1
        for ci, r in enumerate(reports):
            v = r["iou"].get(name)
            val = 0.0 if v is None else float(v)
            h = plot_h * val
            x = gx + ci * bar_w
            attrs = (f'class="bar" data-cell="{escape(cell_label(r))}" data-class="{escape(name)}" '
                     f'data-iou="{"" if v is None else repr(val)}"')
            if v is None:
                attrs += ' data-absent="true"'
            out.append(f'<rect {attrs} x="{x:.2f}" y="{top + plot_h - h:.2f}" width="{bar_w:.2f}" '
                       f'height="{h:.2f}" fill="{PALETTE[ci % len(PALETTE)]}"/>')
        out.append(f'<text x="{left + (gi + 0.5) * group_w:.1f}" y="{top + plot_h + 16}" '
                   f'text-anchor="middle">{escape(name)}</text>')
    for ci, r in enumerate(reports):
        y = top + 12 + ci * 16
        out.append(f'<rect x="{width - right + 12}" y="{y - 9}" width="10" height="10" '
                   f'fill="{PALETTE[ci % len(PALETTE)]}"/>')
        out.append(f'<text x="{width - right + 28}" y="{y}">{escape(cell_label(r))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(run_dirs, out_dir) -> tuple[Path, Path]:
    reports = load_reports(run_dirs)
    if not reports:
        raise FileNotFoundError("no eval_report.json found under the given run directories")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    svg = out / "report.svg"
    svg.write_text(render_iou_svg(reports))
    return svg, write_iou_long_csv(reports, out / "iou_by_class.csv")
