"""
Tabular and text report exporters.
"""

import os
from typing import Any, Dict, List, Union

import pandas as pd

from .base_exporter import BaseExporter
from ..metrics import EvalReport


class CSVExporter(BaseExporter):
    """Writes a DataFrame (or list of row dicts) as CSV."""

    def get_format(self) -> str:
        """Return CSV format name."""
        return "csv"

    def write(self, table: Union[pd.DataFrame, List[Dict[str, Any]]]) -> None:
        df = table if isinstance(table, pd.DataFrame) else pd.DataFrame(table)
        df.to_csv(self.temp_path, index=self.config.get("index", False))


class TextExporter(BaseExporter):
    """Writes a plain-text document."""

    def get_format(self) -> str:
        """Return text format name."""
        return "txt"

    def write(self, text: str) -> None:
        with open(self.temp_path, 'w', encoding='utf-8') as f:
            f.write(text)


def save_table(table: Union[pd.DataFrame, List[Dict[str, Any]]], path: str, index: bool = False) -> str:
    """Write a table as CSV (atomic)."""
    return CSVExporter(path, {"index": index}).export(table)


def format_report(report: EvalReport) -> str:
    """Aligned key/value text table of a report, per-class tables appended."""
    lines = ["=" * 60, f"EVALUATION REPORT ({report.mode})", "=" * 60]
    for name, value in report.scalars().items():
        shown = "n/a" if value is None else f"{value:.6f}"
        lines.append(f"{name:<12} {shown:>14}")
    if report.per_class_iou:
        lines += ["-" * 60, f"{'class':<12} {'IoU':>14}"]
        lines += [f"{c:<12} {v:>14.6f}" for c, v in sorted(report.per_class_iou.items())]
    if report.per_class_pq:
        lines += ["-" * 60, f"{'class':<12} {'PQ':>10} {'SQ':>10} {'RQ':>10} {'TP':>4} {'FP':>4} {'FN':>4}"]
        for c, s in sorted(report.per_class_pq.items()):
            lines.append(f"{c:<12} {s['pq']:>10.6f} {s['sq']:>10.6f} {s['rq']:>10.6f} "
                         f"{s['tp']:>4} {s['fp']:>4} {s['fn']:>4}")
    lines.append("=" * 60)
    return "\n".join(lines) + "\n"


def save_report(report: EvalReport, output_dir: str, prefix: str = "eval") -> Dict[str, str]:
    """
    Write a report as text table, key/value CSV and per-class CSVs.

    Returns:
        Mapping of output kind to path
    """
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        "text": TextExporter(os.path.join(output_dir, f"{prefix}_report.txt")).export(format_report(report)),
        "csv": save_table(
            [{"metric": "mode", "value": report.mode}]
            + [{"metric": k, "value": v} for k, v in report.scalars().items()],
            os.path.join(output_dir, f"{prefix}_report.csv"),
        ),
    }
    if report.per_class_iou:
        paths["per_class_iou"] = save_table(
            [{"class_id": c, "iou": v} for c, v in sorted(report.per_class_iou.items())],
            os.path.join(output_dir, f"{prefix}_per_class_iou.csv"),
        )
    if report.per_class_pq:
        paths["per_class_pq"] = save_table(
            [{"class_id": c, **s} for c, s in sorted(report.per_class_pq.items())],
            os.path.join(output_dir, f"{prefix}_per_class_pq.csv"),
        )
    return paths
