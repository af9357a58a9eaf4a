"""Format reports and records as plain-text tables and one-line summaries."""

from __future__ import annotations

from collections.abc import Sequence

from tetdiff.models import FitRecord, MetricsReport, NeighborRecord, SampleRecord

# (label, CD field, EMD field, is a fraction)
METRIC_ROWS: list[tuple[str, str, str, bool]] = [
    ("MMD", "mmd_cd", "mmd_emd", False),
    ("COV (%)", "cov_cd", "cov_emd", True),
    ("1-NNA (%)", "nna_cd", "nna_emd", True),
]


def format_percent(value: float) -> str:
    return f"{100.0 * value:.2f}"


def format_distance(value: float | None) -> str:
    """Scientific notation for small distances, fixed otherwise."""
    if value is None:
        return "-"
    if value != 0 and abs(value) < 1e-2:
        return f"{value:.3e}"
    return f"{value:.4f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    line = "  ".join(f"{h:<{w}}" for h, w in zip(header, widths, strict=True))
    rule = "  ".join("-" * w for w in widths)
    body = ["  ".join(f"{c:>{w}}" for c, w in zip(r, widths, strict=True)) for r in rows]
    return "\n".join([line, rule, *body])


def format_metrics_table(report: MetricsReport) -> str:
    rows = []
    for label, cd, emd, fraction in METRIC_ROWS:
        fmt = format_percent if fraction else format_distance
        rows.append([label, fmt(getattr(report, cd)), fmt(getattr(report, emd))])
    table = _table(["metric", "CD", "EMD"], rows)
    return (
        f"{table}\n"
        f"JSD {report.jsd:.4f}  "
        f"({report.generated} generated vs {report.reference} reference, "
        f"{report.points} points, seed {report.seed})"
    )


def format_fit_summary(record: FitRecord) -> str:
    if record.error:
        return f"{record.mesh_id}: FAILED ({record.error})"
    line = (
        f"{record.mesh_id}: chamfer {format_distance(record.final_chamfer)} "
        f"after {record.iterations} iterations (scale {record.scale:.3f})"
    )
    if record.warnings:
        line += f" [{'; '.join(record.warnings)}]"
    return line


def format_sample_summary(record: SampleRecord) -> str:
    if record.error:
        return f"{record.sample_id} (seed {record.seed}): FAILED ({record.error})"
    closed = "watertight" if record.watertight else "open"
    return f"{record.sample_id} (seed {record.seed}): {record.faces} faces, {closed}"


def format_neighbors(records: Sequence[NeighborRecord]) -> str:
    rows = [[r.query, r.nearest, format_distance(r.distance)] for r in records]
    return _table(["generated", "nearest reference", "CD"], rows)
