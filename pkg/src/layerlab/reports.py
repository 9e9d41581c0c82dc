"""Render aggregate tables and alignment reports to csv, markdown and svg.

CSV is long-format (variant, dataset, stat, value) and round-trips: the
values parse back to exactly what aggregate() produced. Markdown bolds
the best-mean variant(s) per dataset. SVG draws grouped mean bars with
min-max whiskers, one group per dataset, with no plotting dependency.
"""

import csv
import io
import json

from .data import _atomic_write
from .orchestrator import AggregateTable, AlignmentReport

FORMATS = ("csv", "md", "svg")


def render_report(table, fmt: str, outdir: str, name: str = "report") -> list:
    """Write one file for the table/report in the given format; returns paths."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; valid: {', '.join(FORMATS)}")
    if isinstance(table, AggregateTable):
        body = {"csv": _aggregate_csv, "md": _aggregate_md, "svg": _aggregate_svg}[fmt](table)
    elif isinstance(table, AlignmentReport):
        if fmt == "svg":
            raise ValueError("svg rendering applies to aggregate tables only")
        body = {"csv": _alignment_csv, "md": _alignment_md}[fmt](table)
    else:
        raise TypeError(f"cannot render {type(table).__name__}")
    path = f"{outdir.rstrip('/')}/{name}.{fmt}"
    with _atomic_write(path, "w") as f:
        f.write(body)
    return [path]


# ---------------------------------------------------------------------------
# aggregate renderers

def _aggregate_rows(table: AggregateTable):
    for c in table.cells:
        yield c.variant_id, c.dataset_id, "n_runs", repr(len(c.runs))
        for i, v in enumerate(c.runs):
            yield c.variant_id, c.dataset_id, f"run_{i}", repr(v)
        yield c.variant_id, c.dataset_id, "mean", repr(c.mean)
        yield c.variant_id, c.dataset_id, "min", repr(c.min)
        yield c.variant_id, c.dataset_id, "max", repr(c.max)


def _aggregate_csv(table: AggregateTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "dataset", "stat", "value"])
    for row in _aggregate_rows(table):
        writer.writerow(row)
    return buf.getvalue()


def parse_aggregate_csv(path: str) -> dict:
    """Inverse of the csv renderer: {(variant, dataset): {stat: float|int}}."""
    out: dict = {}
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["variant", "dataset", "stat", "value"]:
            raise ValueError(f"unexpected csv header {header}")
        for variant, dataset, stat, value in reader:
            cell = out.setdefault((variant, dataset), {})
            cell[stat] = int(value) if stat == "n_runs" else float(value)
    return out


def _fmt(v: float) -> str:
    return f"{v:.5f}".rstrip("0").rstrip(".")


def _aggregate_md(table: AggregateTable) -> str:
    lines = []
    for did in table.datasets():
        lines.append(f"## {did}")
        lines.append("")
        lines.append("| variant | runs | mean | min | max |")
        lines.append("| --- | --- | --- | --- | --- |")
        group = [c for c in table.cells if c.dataset_id == did]
        group.sort(key=lambda c: (-c.mean, c.variant_id))
        for c in group:
            runs = "/".join(_fmt(v) for v in c.runs)
            if c.variant_id in table.best.get(did, set()):
                row = f"| **{c.variant_id}** | {runs} | **{_fmt(c.mean)}** | {_fmt(c.min)} | {_fmt(c.max)} |"
            else:
                row = f"| {c.variant_id} | {runs} | {_fmt(c.mean)} | {_fmt(c.min)} | {_fmt(c.max)} |"
            lines.append(row)
        lines.append("")
    if table.missing:
        lines.append("Missing cells (no successful runs): "
                     + ", ".join(f"{v} x {d}" for v, d in table.missing))
        lines.append("")
    return "\n".join(lines)


def _aggregate_svg(table: AggregateTable) -> str:
    datasets = table.datasets()
    variants = sorted({c.variant_id for c in table.cells})
    bar_w, gap, group_gap, left, top = 34, 6, 40, 60, 20
    plot_h = 260
    group_w = len(variants) * (bar_w + gap)
    width = left + len(datasets) * (group_w + group_gap) + 20
    height = plot_h + top + 70
    palette = ["#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2",
               "#b279a2", "#eeca3b", "#9d755d"]

    def y(acc: float) -> float:
        return top + plot_h * (1.0 - acc)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<line x1="{left}" y1="{y(0)}" x2="{width - 10}" y2="{y(0)}" stroke="#333"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{left - 8}" y="{y(tick) + 4}" text-anchor="end">{tick:g}</text>')
        parts.append(f'<line x1="{left - 4}" y1="{y(tick)}" x2="{left}" y2="{y(tick)}" stroke="#333"/>')
    x0 = left + 10
    for did in datasets:
        group = {c.variant_id: c for c in table.cells if c.dataset_id == did}
        for vi, vid in enumerate(variants):
            c = group.get(vid)
            if c is None:
                continue
            x = x0 + vi * (bar_w + gap)
            color = palette[vi % len(palette)]
            parts.append(
                f'<rect x="{x:.1f}" y="{y(c.mean):.1f}" width="{bar_w}" '
                f'height="{(plot_h + top - y(c.mean)):.1f}" fill="{color}">'
                f"<title>{vid} on {did}: mean {_fmt(c.mean)}</title></rect>"
            )
            cx = x + bar_w / 2
            parts.append(f'<line x1="{cx:.1f}" y1="{y(c.min):.1f}" x2="{cx:.1f}" '
                         f'y2="{y(c.max):.1f}" stroke="#222" stroke-width="1.5"/>')
        parts.append(f'<text x="{x0 + group_w / 2:.1f}" y="{plot_h + top + 16}" '
                     f'text-anchor="middle">{did}</text>')
        x0 += group_w + group_gap
    for vi, vid in enumerate(variants):
        lx = left + 10 + vi * 130
        ly = plot_h + top + 40
        parts.append(f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" '
                     f'fill="{palette[vi % len(palette)]}"/>')
        parts.append(f'<text x="{lx + 14}" y="{ly}">{vid}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# alignment renderers

def _alignment_csv(report: AlignmentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "mean_a", "mean_b"])
    for v in report.variants:
        writer.writerow([v, repr(report.mean_a[v]), repr(report.mean_b[v])])
    writer.writerow(["pairwise_agreement", repr(report.pairwise_agreement), ""])
    writer.writerow(["top1_agreement", str(report.top1_agreement), ""])
    return buf.getvalue()


def _alignment_md(report: AlignmentReport) -> str:
    lines = [
        "## Trend alignment",
        "",
        f"Pairwise-order agreement: **{_fmt(report.pairwise_agreement)}**  ",
        f"Top-1 agreement: **{report.top1_agreement}** "
        f"(A: {', '.join(report.best_a)}; B: {', '.join(report.best_b)})",
        "",
        "| variant | mean A | mean B |",
        "| --- | --- | --- |",
    ]
    for v in report.variants:
        lines.append(f"| {v} | {_fmt(report.mean_a[v])} | {_fmt(report.mean_b[v])} |")
    if report.binary is not None:
        lines += ["", f"Binary change flags (tau={report.tau:g}):", "",
                  "| variant | changed in A | changed in B | match |",
                  "| --- | --- | --- | --- |"]
        for row in report.binary:
            lines.append(f"| {row['variant']} | {row['changed_a']} | "
                         f"{row['changed_b']} | {row['match']} |")
    lines.append("")
    return "\n".join(lines)


def alignment_json(report: AlignmentReport) -> str:
    return json.dumps(report.to_json_obj(), indent=2, sort_keys=True)
