"""Evaluation metrics: mean optimality gap and average tour length.

The gap is stored as a fraction (mean of pred/opt - 1 over instances) and
rendered as a percentage with two decimals in report summaries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalRow:
    id: int
    pred_len: float
    opt_len: float
    gap: float


@dataclass(frozen=True)
class EvalReport:
    k: int
    mean_gap: float
    avg_len: float
    rows: tuple[EvalRow, ...]


def optimality_gap(pred_lens, opt_lens) -> float:
    """Mean over instances of (predicted length / reference length - 1)."""
    pred = np.asarray(pred_lens, dtype=np.float64)
    opt = np.asarray(opt_lens, dtype=np.float64)
    if pred.shape != opt.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError("pred_lens and opt_lens must be equal-length nonempty vectors")
    if (opt <= 0).any():
        raise ValueError("reference lengths must be strictly positive")
    return float((pred / opt - 1.0).mean())


def average_tour_length(pred_lens) -> float:
    pred = np.asarray(pred_lens, dtype=np.float64)
    if pred.ndim != 1 or pred.size == 0:
        raise ValueError("pred_lens must be a nonempty vector")
    return float(pred.mean())


def build_report(pred_lens, opt_lens) -> EvalReport:
    pred = np.asarray(pred_lens, dtype=np.float64)
    opt = np.asarray(opt_lens, dtype=np.float64)
    mean_gap = optimality_gap(pred, opt)
    rows = tuple(
        EvalRow(id=i, pred_len=float(p), opt_len=float(o), gap=float(p / o - 1.0))
        for i, (p, o) in enumerate(zip(pred, opt))
    )
    return EvalReport(
        k=len(rows), mean_gap=mean_gap, avg_len=average_tour_length(pred), rows=rows
    )


def write_report_csv(path, report: EvalReport) -> None:
    """CSV with one row per instance plus a trailing summary comment line."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id,pred_len,opt_len,gap\n")
        for r in report.rows:
            fh.write(f"{r.id},{r.pred_len:.9f},{r.opt_len:.9f},{r.gap:.9f}\n")
        fh.write(
            f"# k={report.k} mean_gap_pct={report.mean_gap * 100.0:.2f} "
            f"avg_len={report.avg_len:.9f}\n"
        )
