"""AUROC, FPR at a target TPR, ROC points and report files.

ID is the positive class: an OOD sample scoring at or above the threshold is a
false positive.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import DataError
from .scoring import calibrate_threshold

REPORT_HEADER = ("scorer", "auroc", "fpr95", "tau", "n_id", "n_ood")
ROC_HEADER = ("fpr", "tpr")


def _check(id_scores, ood_scores) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    b = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("ID and OOD score lists must both be non-empty")
    return a, b


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # first index of each run of equal values, and the run lengths
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    lengths = np.diff(np.r_[starts, len(values)])
    avg = starts + (lengths + 1) / 2.0  # 1-based mean rank of each run
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(avg, lengths)
    return ranks


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """P(ID > OOD) + 0.5 P(ID == OOD), via the Mann-Whitney rank sum."""
    a, b = _check(id_scores, ood_scores)
    ranks = _midranks(np.concatenate([a, b]))
    n1, n2 = len(a), len(b)
    # rank sums of midranks are multiples of 0.5, so this is exact in float64
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def roc_curve(id_scores: Sequence[float], ood_scores: Sequence[float]) -> list[tuple[float, float]]:
    """(fpr, tpr) at every distinct threshold, from (0, 0) to (1, 1)."""
    a, b = _check(id_scores, ood_scores)
    thresholds = np.unique(np.concatenate([a, b]))[::-1]
    a_sorted, b_sorted = np.sort(a), np.sort(b)
    # count of scores >= t for each threshold
    tp = len(a) - np.searchsorted(a_sorted, thresholds, side="left")
    fp = len(b) - np.searchsorted(b_sorted, thresholds, side="left")
    pts = [(0.0, 0.0)]
    pts += [(float(f / len(b)), float(t / len(a))) for f, t in zip(fp, tp)]
    return pts


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def fpr_at_tpr(
    id_scores: Sequence[float], ood_scores: Sequence[float], target_tpr: float = 0.95
) -> tuple[float, float]:
    """Returns ``(fpr, tau)`` where tau is calibrated on the ID scores themselves."""
    a, b = _check(id_scores, ood_scores)
    tau = calibrate_threshold(a, target_tpr).tau
    return float(np.count_nonzero(b >= tau) / len(b)), tau


# --- mixed test set -------------------------------------------------------------


@dataclass
class MixedSet:
    ids: list[str]
    images: np.ndarray
    is_id: np.ndarray  # bool
    labels: np.ndarray  # class label for ID rows, -1 for OOD

    def __len__(self) -> int:
        return len(self.ids)


def mixed_testset(id_data: Dataset, ood_data: Dataset) -> MixedSet:
    if len(ood_data) == 0:
        raise DataError("OOD set is empty; evaluation is undefined")
    if len(id_data) == 0:
        raise DataError("ID set is empty; evaluation is undefined")
    clash = sorted(set(id_data.ids) & set(ood_data.ids))
    if clash:
        raise DataError(f"sample ids appear in both ID and OOD sets: {clash[:3]}")
    if id_data.images.shape[1:] != ood_data.images.shape[1:]:
        raise DataError(f"image shapes differ: {id_data.images.shape[1:]} vs {ood_data.images.shape[1:]}")
    return MixedSet(
        list(id_data.ids) + list(ood_data.ids),
        np.concatenate([id_data.images, ood_data.images]),
        np.r_[np.ones(len(id_data), bool), np.zeros(len(ood_data), bool)],
        np.r_[np.asarray(id_data.labels), -np.ones(len(ood_data), dtype=np.int64)],
    )


# --- reports --------------------------------------------------------------------


@dataclass
class EvalReport:
    scorer: str
    n_id: int
    n_ood: int
    auroc: float
    fpr95: float
    tau: float
    roc: list[tuple[float, float]] = field(default_factory=list)

    def summary(self) -> str:
        return f"{self.scorer}: AUROC {self.auroc:.4f}  FPR95 {self.fpr95:.4f}  (n_id={self.n_id}, n_ood={self.n_ood})"


def evaluate(scorer: str, id_scores, ood_scores, target_tpr: float = 0.95) -> EvalReport:
    a, b = _check(id_scores, ood_scores)
    fpr, tau = fpr_at_tpr(a, b, target_tpr)
    return EvalReport(scorer, len(a), len(b), auroc(a, b), fpr, tau, roc_curve(a, b))


def _roc_name(scorer: str) -> str:
    return f"roc_{scorer}.csv"


def emit_report(reports: EvalReport | Sequence[EvalReport], out_dir) -> Path:
    """Write ``report.csv`` plus one ``roc_<scorer>.csv`` per report; return the report path."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        w.writerow([r.scorer, repr(r.auroc), repr(r.fpr95), repr(r.tau), r.n_id, r.n_ood])
        roc = io.StringIO()
        rw = csv.writer(roc, lineterminator="\n")
        rw.writerow(ROC_HEADER)
        rw.writerows([repr(f), repr(t)] for f, t in r.roc)
        (out / _roc_name(r.scorer)).write_text(roc.getvalue(), encoding="utf-8")
    path = out / "report.csv"
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_report(path) -> list[EvalReport]:
    """Parse ``report.csv`` and its sibling ROC files."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    reports = []
    for r in rows:
        roc_path = path.parent / _roc_name(r["scorer"])
        roc = []
        if roc_path.is_file():
            with open(roc_path, newline="", encoding="utf-8") as fh:
                roc = [(float(x["fpr"]), float(x["tpr"])) for x in csv.DictReader(fh)]
        reports.append(
            EvalReport(r["scorer"], int(r["n_id"]), int(r["n_ood"]), float(r["auroc"]), float(r["fpr95"]), float(r["tau"]), roc)
        )
    return reports
