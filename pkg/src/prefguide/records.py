"""CSV and SVG emitters shared by the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import __version__

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#e377c2")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows, config_sha: str) -> None:
    """Comment line with tool version and config checksum, then header, then rows."""
    lines = [f"# prefguide {__version__} config={config_sha}", ",".join(header)]
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not rows:
        raise ValueError(f"{path}: no header row")
    return rows[0].split(","), [r.split(",") for r in rows[1:]]


def read_samples(path) -> np.ndarray:
    header, rows = read_csv(path)
    if header[:2] != ["x", "y"]:
        raise ValueError(f"{path}: expected header starting with x,y")
    try:
        return np.array([[float(r[0]), float(r[1])] for r in rows], dtype=np.float64).reshape(-1, 2)
    except (ValueError, IndexError) as err:
        raise ValueError(f"{path}: malformed sample row: {err}") from None


def scatter_svg(samples, assignment, means=None, size: int = 480, extent: float = 6.0) -> str:
    """One <circle> per finite sample, coloured by cluster; outliers are grey.

    Cluster means, if given, are drawn as <path> crosses so they are not counted as points.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    scale = size / (2 * extent)

    def px(p):
        return (p[0] + extent) * scale, (extent - p[1]) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for p, k in zip(x, assignment):
        if not np.isfinite(p).all():
            continue
        cx, cy = px(p)
        cls, color = ("outlier", "#999999") if k < 0 else (f"c{k}", PALETTE[k % len(PALETTE)])
        out.append(f'<circle class="{cls}" cx="{cx:.2f}" cy="{cy:.2f}" r="1.5" fill="{color}" fill-opacity="0.6"/>')
    if means is not None:
        for k, m in enumerate(means):
            cx, cy = px(m)
            stroke = "black" if k % 2 == 0 else "red"
            out.append(f'<path d="M{cx - 5:.1f},{cy:.1f}h10M{cx:.1f},{cy - 5:.1f}v10" stroke="{stroke}" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
