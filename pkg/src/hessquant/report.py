"""Aggregate run artifacts into a text report and figures.

Reads whatever a run directory contains (summary JSON, trace CSV, frontier
CSV, convergence CSV, landscape CSVs) and renders one human-readable table
plus PNG figures next to it. Missing artifacts are skipped with a note, so
partial runs still produce a useful report.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .planner import read_frontier_csv
from .trace import read_trace_csv


class ReportError(Exception):
    pass


def _fmt(value, width: int = 12) -> str:
    if isinstance(value, float):
        return f"{value:>{width}.6g}"
    return f"{value!s:>{width}}"


def _summary_section(summary: dict) -> list[str]:
    lines = ["== run summary =="]
    for key in sorted(summary):
        value = summary[key]
        if isinstance(value, dict):
            for sub in sorted(value):
                lines.append(f"  {key}.{sub:<28} {_fmt(value[sub])}")
        elif isinstance(value, list):
            lines.append(f"  {key:<30} {','.join(str(v) for v in value)}")
        else:
            lines.append(f"  {key:<30} {_fmt(value)}")
    return lines


def _trace_section(rows) -> list[str]:
    lines = [
        "== per-layer average Hessian traces ==",
        f"  {'layer':<10}{'kind':<12}{'n_i':>8}{'avg_trace':>14}"
        f"{'stderr':>12}{'probes':>8}",
    ]
    for r in rows:
        stderr = r.trace_stderr / r.block_dim
        lines.append(
            f"  {r.layer_name:<10}{r.kind:<12}{r.block_dim:>8}"
            f"{r.avg_trace:>14.6g}{stderr:>12.3g}{r.probes_used:>8}"
        )
    return lines


def _frontier_section(points) -> list[str]:
    chosen = [p for p in points if p.chosen]
    frontier = [p for p in points if not p.dominated]
    lines = [
        "== bit-assignment frontier ==",
        f"  {len(points)} admissible assignments, "
        f"{len(frontier)} non-dominated",
    ]
    for p in sorted(frontier, key=lambda p: p.size_bytes):
        marker = "  <- chosen" if p.chosen else ""
        bits = ",".join(str(b) for b in p.assignment.bits)
        lines.append(
            f"  size {p.size_bytes:>8} B  omega {p.omega:>12.6g}  bits [{bits}]{marker}"
        )
    if chosen and chosen[0] not in frontier:
        p = chosen[0]
        bits = ",".join(str(b) for b in p.assignment.bits)
        lines.append(
            f"  chosen (within budget): size {p.size_bytes} B  "
            f"omega {p.omega:.6g}  bits [{bits}]"
        )
    return lines


def _plot_traces(rows, out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    kinds = sorted(set(r.kind for r in rows))
    width = 0.8 / len(kinds)
    for k, kind in enumerate(kinds):
        sub = [r for r in rows if r.kind == kind]
        xs = np.array([r.layer_index for r in sub], dtype=float) + k * width
        ax.bar(xs, [max(r.avg_trace, 0.0) for r in sub], width=width, label=kind)
    ax.set_xlabel("layer")
    ax.set_ylabel("average Hessian trace")
    if any(r.avg_trace > 0 for r in rows):
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    path = out / "traces.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _plot_frontier(points, out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    dominated = [p for p in points if p.dominated]
    frontier = sorted((p for p in points if not p.dominated), key=lambda p: p.size_bytes)
    if dominated:
        ax.scatter(
            [p.size_bytes for p in dominated],
            [p.omega for p in dominated],
            s=12,
            alpha=0.35,
            label="dominated",
        )
    if frontier:
        ax.plot(
            [p.size_bytes for p in frontier],
            [p.omega for p in frontier],
            "o-",
            ms=5,
            label="frontier",
        )
    chosen = [p for p in points if p.chosen]
    if chosen:
        ax.scatter(
            [chosen[0].size_bytes],
            [chosen[0].omega],
            marker="*",
            s=160,
            zorder=5,
            color="tab:red",
            label="chosen",
        )
    ax.set_xlabel("model size (bytes)")
    ax.set_ylabel("omega")
    if any(p.omega > 0 for p in points):
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    path = out / "frontier.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _plot_convergence(path_in: Path, out: Path) -> Path | None:
    rows = []
    with open(path_in, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(
                (
                    int(row["layer_index"]),
                    int(row["probes"]),
                    float(row["running_mean"]),
                    float(row["stderr"]),
                )
            )
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for layer in sorted(set(r[0] for r in rows)):
        sub = [r for r in rows if r[0] == layer]
        ms = [r[1] for r in sub]
        means = np.array([r[2] for r in sub])
        errs = np.array([r[3] for r in sub])
        (line,) = ax.plot(ms, means, label=f"layer {layer}")
        ax.fill_between(
            ms, means - errs, means + errs, alpha=0.2, color=line.get_color()
        )
    ax.set_xlabel("probes")
    ax.set_ylabel("running trace estimate")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out / "trace_convergence.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _plot_landscape(path_in: Path, out: Path) -> Path:
    eps1, eps2, loss = [], [], []
    with open(path_in, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            eps1.append(float(row["eps1"]))
            eps2.append(float(row["eps2"]))
            loss.append(float(row["loss"]))
    axis = sorted(set(eps1))
    n = len(axis)
    grid = np.asarray(loss).reshape(n, n)
    fig, ax = plt.subplots(figsize=(4.4, 3.6))
    im = ax.imshow(
        grid.T,
        origin="lower",
        extent=(axis[0], axis[-1], axis[0], axis[-1]),
        aspect="auto",
        cmap="viridis",
    )
    fig.colorbar(im, ax=ax, label="loss")
    ax.set_xlabel("first eigenvector step")
    ax.set_ylabel("second eigenvector step")
    fig.tight_layout()
    path = out / (path_in.stem + ".png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report(run_dir, out_dir=None) -> list[Path]:
    """Build report.txt and figures from the artifacts in ``run_dir``.

    Returns the paths written. Raises ReportError when the directory holds
    none of the known artifacts.
    """
    run = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    sections: list[str] = []

    summary_path = run / "summary.json"
    if summary_path.exists():
        try:
            summary = json.loads(summary_path.read_text())
        except json.JSONDecodeError as e:
            raise ReportError(
                f"unparseable summary {summary_path}: {e.msg} at offset {e.pos}"
            ) from e
        sections.extend(_summary_section(summary))
        sections.append("")

    traces_path = run / "traces.csv"
    if traces_path.exists():
        rows = read_trace_csv(traces_path)
        sections.extend(_trace_section(rows))
        sections.append("")
        written.append(_plot_traces(rows, out))

    frontier_path = run / "frontier.csv"
    if frontier_path.exists():
        points = read_frontier_csv(frontier_path)
        sections.extend(_frontier_section(points))
        sections.append("")
        written.append(_plot_frontier(points, out))

    convergence_path = run / "trace_convergence.csv"
    if convergence_path.exists():
        fig = _plot_convergence(convergence_path, out)
        if fig is not None:
            written.append(fig)

    for landscape in sorted(run.glob("landscape_*.csv")):
        written.append(_plot_landscape(landscape, out))

    if not sections and not written:
        raise ReportError(f"no known artifacts found in {run}")

    report_path = out / "report.txt"
    report_path.write_text("\n".join(sections).rstrip() + "\n")
    written.insert(0, report_path)
    return written
