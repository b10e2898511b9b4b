"""Report tables on the console and their CSV twins."""

import csv
from collections.abc import Mapping, Sequence
from dataclasses import asdict
from pathlib import Path

from rich.console import Console
from rich.table import Table

from .metrics import FeatureReport, SplitReport
from .moe import ConflictSet
from .trainer import EpochRecord

console = Console()

SPLIT_COLUMNS = ("overall", "many", "medium", "few")


def _cell(value: float | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def _csv_value(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([_csv_value(v) for v in row] for row in rows)
    return path


def display_split_reports(reports: Mapping[str, SplitReport]) -> None:
    """One row per model: overall and shot-split accuracy."""
    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Model", style="cyan")
    for column in SPLIT_COLUMNS:
        table.add_column(column.capitalize(), justify="right")

    best = max(report.overall for report in reports.values()) if reports else 0.0
    for name, report in reports.items():
        overall = _cell(report.overall)
        if report.overall == best and len(reports) > 1:
            overall = f"[green]{overall}[/green]"
        table.add_row(name, overall, _cell(report.many), _cell(report.medium), _cell(report.few))

    console.print(table)


def write_split_csv(reports: Mapping[str, SplitReport], path: Path) -> Path:
    rows = [[name, *(report.row()[column] for column in SPLIT_COLUMNS)] for name, report in reports.items()]
    return _write_rows(path, ["model", *SPLIT_COLUMNS], rows)


def write_per_class_csv(reports: Mapping[str, SplitReport], path: Path) -> Path:
    rows = []
    for name, report in reports.items():
        for cls, (accuracy, count) in enumerate(zip(report.per_class, report.class_counts, strict=True)):
            rows.append([name, cls, int(count), None if accuracy != accuracy else float(accuracy)])
    return _write_rows(path, ["model", "class", "val_count", "accuracy"], rows)


def display_feature_reports(reports: Sequence[FeatureReport]) -> None:
    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Features", style="cyan")
    table.add_column("K-NN acc", justify="right")
    table.add_column("Mean R", justify="right")
    table.add_column("D", justify="right")
    table.add_column("Gamma", justify="right")
    for report in reports:
        table.add_row(
            report.name,
            f"{report.knn:.2f}",
            f"{report.stats.radii.mean():.4f}",
            f"{report.stats.inter:.4f}",
            f"{report.stats.gamma:.4f}",
        )
    console.print(table)


def write_feature_csv(reports: Sequence[FeatureReport], path: Path) -> Path:
    rows = [
        [r.name, float(r.knn), float(r.stats.radii.mean()), float(r.stats.inter), float(r.stats.gamma)]
        for r in reports
    ]
    return _write_rows(path, ["features", "knn_acc", "mean_radius", "inter", "gamma"], rows)


def write_history_csv(history: Sequence[EpochRecord], path: Path) -> Path:
    """Per-epoch training metrics in the order they were produced."""
    fields = list(EpochRecord.__dataclass_fields__)
    rows = [[asdict(record)[f] for f in fields] for record in history]
    return _write_rows(path, fields, rows)


def display_conflicts(conflicts: ConflictSet, w_base: float) -> None:
    """Summarise the conflict set the scorer was fitted on."""
    if not len(conflicts):
        console.print(f"[yellow]No conflicts between experts; fusing with W_base={w_base:.4f} only[/yellow]")
        return
    style = "yellow" if conflicts.minority_share < 0.25 else "green"
    console.print(
        f"Conflict set: {len(conflicts)} samples, "
        f"[{style}]{conflicts.vo_share:.1%} won by expert 1[/{style}], W_base={w_base:.4f}"
    )
