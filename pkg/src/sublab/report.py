"""Render analysis artifacts into tables and heatmaps.

All output is deterministic text: delimited tables for machines, aligned
text tables for terminals, and self-contained SVG heatmaps for eyes.
Nothing here embeds timestamps or paths that would break byte-for-byte
reproducibility of a rerun.
"""

from __future__ import annotations

import json

from .importance import ImportanceGrid
from .model import FAMILIES, ComponentId, Kind, Side
from .training import RunDirectory

GRID_HEADER = "layer, " + ", ".join(FAMILIES)

_FAMILY_SLOTS = (
    (Side.ENCODER, Kind.SELF_ATTENTION),
    (Side.ENCODER, Kind.FEED_FORWARD),
    (Side.DECODER, Kind.SELF_ATTENTION),
    (Side.DECODER, Kind.ENCODER_ATTENTION),
    (Side.DECODER, Kind.FEED_FORWARD),
)


def _grid_rows(grid: ImportanceGrid) -> list:
    """Scores as a layer-major table of optional floats, families as columns."""
    by_key = {cid: score for cid, score in grid.scores.items()}
    depth = 1 + max(cid.layer for cid in by_key)
    rows = []
    for layer in range(depth):
        cells = [by_key.get(ComponentId(side, layer, kind))
                 for side, kind in _FAMILY_SLOTS]
        rows.append(cells)
    return rows


def grid_csv(grid: ImportanceGrid) -> str:
    lines = [GRID_HEADER]
    for layer, cells in enumerate(_grid_rows(grid)):
        rendered = [f"{value:.6f}" if value is not None else "" for value in cells]
        lines.append(", ".join([str(layer)] + rendered))
    return "\n".join(lines) + "\n"


CELL_W = 96
CELL_H = 44
LEFT = 64
TOP = 58


def grid_svg(grid: ImportanceGrid) -> str:
    """Heatmap with one column per family, one row per layer; darker cells
    carry higher scores and every cell prints its value."""
    rows = _grid_rows(grid)
    vmax = max((v for cells in rows for v in cells if v is not None), default=0.0)
    width = LEFT + CELL_W * len(FAMILIES) + 8
    height = TOP + CELL_H * len(rows) + 8

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        "<style>text { font-family: monospace; font-size: 12px; }</style>",
        f'<text x="{LEFT}" y="18">{grid.metric}'
        + (f" [{', '.join(grid.flags)}]" if grid.flags else "")
        + "</text>",
    ]
    for col, family in enumerate(FAMILIES):
        x = LEFT + col * CELL_W + CELL_W // 2
        parts.append(f'<text x="{x}" y="{TOP - 10}" text-anchor="middle">{family}</text>')
    for row, cells in enumerate(rows):
        y = TOP + row * CELL_H
        parts.append(
            f'<text x="{LEFT - 10}" y="{y + CELL_H // 2 + 4}" text-anchor="end">{row}</text>'
        )
        for col, value in enumerate(cells):
            x = LEFT + col * CELL_W
            if value is None:
                parts.append(
                    f'<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" '
                    f'fill="#f4f4f4" stroke="#999"/>'
                )
                continue
            shade = 0.0 if vmax == 0.0 else value / vmax
            level = int(round(255 - 217 * shade))
            ink = "#fff" if shade > 0.55 else "#000"
            parts.append(
                f'<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" '
                f'fill="rgb({level},{level},{level})" stroke="#999"/>'
            )
            parts.append(
                f'<text x="{x + CELL_W // 2}" y="{y + CELL_H // 2 + 4}" '
                f'text-anchor="middle" fill="{ink}">{value:.3f}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def curves_csv(curves: dict) -> str:
    lines = ["component, alpha, bleu"]
    for cid in sorted(curves, key=lambda c: c.sort_key()):
        for alpha, bleu in curves[cid]:
            lines.append(f"{cid.key}, {alpha:.6f}, {bleu:.6f}")
    return "\n".join(lines) + "\n"


def ablation_csv(rows: list) -> str:
    lines = ["k, bleu, component"]
    for row in rows:
        component = row["component"] if row["component"] else ""
        lines.append(f"{row['k']}, {row['bleu']:.6f}, {component}".rstrip())
    return "\n".join(lines) + "\n"


def _text_table(headers: list, rows: list) -> str:
    widths = [len(h) for h in headers]
    rendered = []
    for row in rows:
        cells = [str(cell) for cell in row]
        widths = [max(w, len(c)) for w, c in zip(widths, cells)]
        rendered.append(cells)
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(cells) for cells in rendered)
    return "\n".join(lines) + "\n"


def prune_table(report: dict) -> str:
    rows = []
    for name in ("standard", "pruned", "shallow_decoder"):
        arm = report["arms"][name]
        rows.append([name, arm["param_count"], arm["dec_layers"],
                     f"{arm['bleu']:.2f}"])
    table = _text_table(["arm", "params", "dec_layers", "bleu"], rows)
    removed = ", ".join(report["selected"])
    return f"pruned components: {removed}\n\n{table}"


def rewind_table(report: dict) -> str:
    rows = []
    for name in ("standard", "continue", "rewind"):
        arm = report["arms"][name]
        rows.append([name, arm["steps"], f"{arm['bleu']:.2f}"])
    table = _text_table(["arm", "steps", "bleu"], rows)
    before = report["arms"]["rewind"]["bleu_before_finetune"]
    removed = ", ".join(report["selected"])
    return (f"rewound components: {removed}\n"
            f"rewind arm before fine-tuning: {before:.2f} BLEU\n\n{table}")


def sweep_table(report: dict) -> str:
    rows = [[row["value"], f"{row['baseline']:.2f}", row["n_important"],
             row["n_components"] - row["n_important"]]
            for row in report["rows"]]
    return _text_table([report["param"], "bleu", "important", "unimportant"], rows)


GRID_ARTIFACTS = ("contribution", "criticality", "pwcca",
                  "isometry_init", "isometry_final")


def render_run(run: RunDirectory) -> list:
    """Render every grid artifact found under <run>/analysis into CSV and
    SVG siblings; returns the written file names."""
    written = []
    for name in GRID_ARTIFACTS:
        path = run.analysis_dir / f"{name}.json"
        if not path.exists():
            continue
        grid = ImportanceGrid.from_json(path.read_text())
        (run.analysis_dir / f"{name}.csv").write_text(grid_csv(grid))
        (run.analysis_dir / f"{name}.svg").write_text(grid_svg(grid))
        written.extend([f"{name}.csv", f"{name}.svg"])

    dynamics = run.analysis_dir / "dynamics.json"
    if dynamics.exists():
        doc = json.loads(dynamics.read_text())
        for epoch_key in sorted(doc, key=int):
            grid = ImportanceGrid.from_json(json.dumps(doc[epoch_key]))
            stem = f"dynamics_epoch_{int(epoch_key):03d}"
            (run.analysis_dir / f"{stem}.csv").write_text(grid_csv(grid))
            (run.analysis_dir / f"{stem}.svg").write_text(grid_svg(grid))
            written.extend([f"{stem}.csv", f"{stem}.svg"])

    curves = run.analysis_dir / "criticality_curves.json"
    if curves.exists():
        from .analysis import curves_from_json

        parsed = curves_from_json(curves.read_text())
        (run.analysis_dir / "criticality_curves.csv").write_text(curves_csv(parsed))
        written.append("criticality_curves.csv")

    prune = run.analysis_dir / "prune.json"
    if prune.exists():
        (run.analysis_dir / "prune.txt").write_text(
            prune_table(json.loads(prune.read_text())))
        written.append("prune.txt")

    rewind = run.analysis_dir / "rewind.json"
    if rewind.exists():
        (run.analysis_dir / "rewind.txt").write_text(
            rewind_table(json.loads(rewind.read_text())))
        written.append("rewind.txt")
    return written
