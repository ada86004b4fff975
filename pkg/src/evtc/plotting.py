"""Result CSV handling and figure emission.

CSVs carry a versioned schema comment line, a header row, then data rows.
Timing-derived columns (fps, score) are flagged nondeterministic and are
excluded from byte-determinism guarantees. The ``plot`` path writes a
standalone SVG with exactly one polyline per data series; report paths
additionally render matplotlib PNG figures next to the delimited output.
"""
from __future__ import annotations

import csv
import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import FormatError

SCHEMA_VERSION = 1


def write_csv(path, columns, rows, kind: str, nondeterministic=("fps", "score")):
    nd = [c for c in nondeterministic if c in columns]
    with open(path, "w", newline="") as f:
        f.write(f"# evtc-csv v{SCHEMA_VERSION} kind={kind} nondeterministic={','.join(nd)}\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def _format_cell(v):
    # 12 significant digits keep derived-column identities (score = miou*fps)
    # intact at far better than the documented 1e-6 tolerance
    if isinstance(v, float):
        return format(v, ".12g")
    return v


def read_csv(path):
    """Returns (kind, columns, rows as list of dicts with string values)."""
    with open(path) as f:
        first = f.readline()
        if not first.startswith("# evtc-csv"):
            raise FormatError(f"{path}: missing schema comment line (line 1)")
        body = f.read()
    reader = csv.reader(io.StringIO(body))
    try:
        columns = next(reader)
    except StopIteration:
        raise FormatError(f"{path}: missing header row (line 2)")
    rows = []
    for i, row in enumerate(reader):
        if not row:
            continue
        if len(row) != len(columns):
            raise FormatError(f"{path}: row has {len(row)} cells, expected "
                              f"{len(columns)} (line {i + 3})")
        rows.append(dict(zip(columns, row)))
    kind = ""
    for tok in first.strip().split():
        if tok.startswith("kind="):
            kind = tok[5:]
    return kind, columns, rows


def validate_csv(path, expected_columns):
    _, columns, rows = read_csv(path)
    if tuple(columns) != tuple(expected_columns):
        raise FormatError(f"{path}: columns {columns} != expected {list(expected_columns)}")
    return rows


# ----------------------------------------------------------------------
# SVG line charts (one <polyline> per series; axes drawn with <line>)


def write_svg_lines(series: dict, path, xlabel: str = "sparsity", ylabel: str = "miou",
                    title: str = "", width: int = 640, height: int = 440):
    """series: {name: [(x, y), ...]} -> standalone SVG file."""
    if not series or all(not pts for pts in series.values()):
        raise FormatError("no data series to plot")
    margin = 60
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
               "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 16}" text-anchor="middle" '
        f'font-size="13">{xlabel}</text>',
        f'<text x="18" y="{height / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 18 {height / 2:.1f})">{ylabel}</text>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
                     f'font-size="15">{title}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" '
                     f'points="{coords}"/>')
        ly = 40 + 16 * i
        parts.append(f'<line x1="{width - margin - 110}" y1="{ly}" '
                     f'x2="{width - margin - 86}" y2="{ly}" stroke="{color}" '
                     f'stroke-width="1.8"/>')
        parts.append(f'<text x="{width - margin - 80}" y="{ly + 4}" '
                     f'font-size="11">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))


def series_from_rows(rows, x_col: str = "sparsity", y_col: str = "miou"):
    """Group CSV rows into plot series keyed by their identity columns."""
    numericish = {x_col, y_col, "params", "flops", "fps", "score", "acc", "round",
                  "finetune_iters", "heads", "params_theoretical", "params_materialized"}
    series = {}
    for row in rows:
        key_cols = [v for k, v in row.items() if k not in numericish]
        key = "/".join(key_cols) if key_cols else "series"
        series.setdefault(key, []).append((float(row[x_col]), float(row[y_col])))
    for pts in series.values():
        pts.sort()
    return series


def render_png_lines(series: dict, path, xlabel: str = "sparsity", ylabel: str = "miou",
                     title: str = ""):
    fig, ax = plt.subplots(figsize=(6.0, 4.2), dpi=120)
    for name, pts in series.items():
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_png_stage_bars(rows, path, title: str = "pipeline stages"):
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.8), dpi=120)
    names = [r["model"] for r in rows]
    for ax, col in zip(axes, ("miou", "score")):
        ax.bar(range(len(rows)), [float(r[col]) for r in rows], color="#4878a8")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.set_ylabel(col)
        ax.grid(True, axis="y", alpha=0.3)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
