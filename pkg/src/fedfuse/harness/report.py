"""Experiment report assembly and CSV/TXT export."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..features import CLASS_NAMES, N_CLASSES


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """(true, predicted) count grid. Row sums equal per-class truth counts."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(mat, (y_true, y_pred), 1)
    return mat


def accuracy_of(confusion: np.ndarray) -> float:
    total = int(confusion.sum())
    if total == 0:
        return float("nan")
    return int(np.trace(confusion)) / total


@dataclass(frozen=True)
class MetricRow:
    """One per-epoch (individual/centralized) or per-round (federated) row."""

    index: int
    loss: float
    accuracy: float
    wall_s: float


@dataclass
class ExperimentReport:
    mode: str
    wall_clock_s: float
    metric_rows: list[MetricRow]
    confusion_physio: np.ndarray
    confusion_visual: np.ndarray
    confusion_fused: np.ndarray
    n_clients: int
    epochs: int | None = None
    rounds: int | None = None
    local_epochs: int | None = None
    peak_rss_mb: float = float("nan")
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("confusion_physio", "confusion_visual", "confusion_fused"):
            mat = np.asarray(getattr(self, name), dtype=np.int64)
            if mat.shape != (N_CLASSES, N_CLASSES):
                raise ValueError(f"{name} must be {N_CLASSES}x{N_CLASSES}, got {mat.shape}")
            setattr(self, name, mat)

    # accuracies are defined as trace/total so they can never drift from
    # the matrices they summarize
    @property
    def accuracy_physio(self) -> float:
        return accuracy_of(self.confusion_physio)

    @property
    def accuracy_visual(self) -> float:
        return accuracy_of(self.confusion_visual)

    @property
    def accuracy_fused(self) -> float:
        return accuracy_of(self.confusion_fused)


def export_report(report: ExperimentReport, out_dir) -> list[Path]:
    """Write the confusion grids, per-round metrics, and a text summary.

    Re-exporting the same report produces byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, mat in (
        ("confusion_physio.csv", report.confusion_physio),
        ("confusion_visual.csv", report.confusion_visual),
        ("confusion_fused.csv", report.confusion_fused),
    ):
        path = out / name
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred", *CLASS_NAMES])
            for label, row in zip(CLASS_NAMES, mat):
                writer.writerow([label, *(int(v) for v in row)])
        written.append(path)

    path = out / "metrics.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "loss", "accuracy", "wall_s"])
        for row in report.metric_rows:
            writer.writerow([row.index, f"{row.loss:.6f}", f"{row.accuracy:.6f}", f"{row.wall_s:.3f}"])
    written.append(path)

    path = out / "summary.txt"
    lines = [
        f"mode: {report.mode}",
        f"clients: {report.n_clients}",
    ]
    if report.rounds is not None:
        lines.append(f"rounds: {report.rounds}")
    if report.local_epochs is not None:
        lines.append(f"local epochs per round: {report.local_epochs}")
    if report.epochs is not None:
        lines.append(f"epochs: {report.epochs}")
    lines += [
        f"wall clock: {report.wall_clock_s:.2f} s",
        f"test accuracy (physio): {report.accuracy_physio:.4f}",
        f"test accuracy (visual): {report.accuracy_visual:.4f}",
        f"test accuracy (fused):  {report.accuracy_fused:.4f}",
    ]
    if not math.isnan(report.peak_rss_mb):
        lines.append(f"peak client rss: {report.peak_rss_mb:.1f} MB")
    path.write_text("\n".join(lines) + "\n")
    written.append(path)
    return written
