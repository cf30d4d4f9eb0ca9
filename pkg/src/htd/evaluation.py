"""3D-ROC analysis: the three unfolded curves, five AUC metrics, and
background/target separability summaries.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RocCurves",
    "AucReport",
    "normalize_scores",
    "roc",
    "auc_all",
    "pairwise_auc",
    "separability_stats",
    "write_roc_csv",
    "write_auc_csv",
    "write_separability_csv",
]


@dataclass
class RocCurves:
    thresholds: np.ndarray  # ascending grid over [0, 1]
    p_f: np.ndarray         # false alarm rate at each threshold
    p_d: np.ndarray         # detection probability at each threshold


@dataclass
class AucReport:
    auc_pf_pd: float
    auc_tau_pd: float
    auc_tau_pf: float
    auc_oa: float
    auc_snpr: float


def normalize_scores(scores: np.ndarray) -> np.ndarray:
    """Min-max normalization to [0, 1]; constant inputs map to 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.full_like(scores, 0.5)
    return (scores - lo) / (hi - lo)


def roc(scores: np.ndarray, mask: np.ndarray) -> RocCurves:
    """Curves on the grid {0} U unique(scores) U {1}; the detection rule is
    score >= threshold."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask).reshape(-1).astype(bool)
    if scores.shape != mask.shape:
        raise ValueError(
            f"scores ({scores.shape}) and mask ({mask.shape}) differ in size"
        )
    n_t = int(mask.sum())
    n_b = int((~mask).sum())
    if n_t == 0 or n_b == 0:
        raise ValueError("mask must contain both target and background pixels")
    scores = normalize_scores(scores)
    grid = np.unique(np.concatenate([[0.0], scores, [1.0]]))
    # score >= tau counts: targets/background sorted once, then searchsorted
    t_sorted = np.sort(scores[mask])
    b_sorted = np.sort(scores[~mask])
    tp = n_t - np.searchsorted(t_sorted, grid, side="left")
    fp = n_b - np.searchsorted(b_sorted, grid, side="left")
    return RocCurves(thresholds=grid, p_f=fp / n_b, p_d=tp / n_t)


def auc_all(curves: RocCurves) -> AucReport:
    """Trapezoidal areas plus the two composite metrics."""
    tau, p_f, p_d = curves.thresholds, curves.p_f, curves.p_d
    # close the (P_f, P_d) curve at (0, 0) and integrate in curve order
    # (descending threshold), which keeps vertical segments zero-width;
    # re-sorting by P_f would interleave tied-P_f points out of order
    pf_ext = np.concatenate([p_f, [0.0]])[::-1]
    pd_ext = np.concatenate([p_d, [0.0]])[::-1]
    auc_pf_pd = float(np.trapezoid(pd_ext, pf_ext))
    auc_tau_pd = float(np.trapezoid(p_d, tau))
    auc_tau_pf = float(np.trapezoid(p_f, tau))
    auc_oa = auc_pf_pd + auc_tau_pd - auc_tau_pf
    auc_snpr = auc_tau_pd / auc_tau_pf if auc_tau_pf > 0 else math.inf
    return AucReport(
        auc_pf_pd=auc_pf_pd,
        auc_tau_pd=auc_tau_pd,
        auc_tau_pf=auc_tau_pf,
        auc_oa=auc_oa,
        auc_snpr=auc_snpr,
    )


def pairwise_auc(scores: np.ndarray, mask: np.ndarray) -> float:
    """O(n^2) ranking statistic: P(target score > background score), ties 1/2.

    Independent reference for the trapezoidal AUC(P_f, P_d).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask).reshape(-1).astype(bool)
    t = scores[mask]
    b = scores[~mask]
    if t.size == 0 or b.size == 0:
        raise ValueError("mask must contain both target and background pixels")
    wins = (t[:, None] > b[None, :]).sum() + 0.5 * (t[:, None] == b[None, :]).sum()
    return float(wins / (t.size * b.size))


def separability_stats(scores: np.ndarray, mask: np.ndarray) -> dict[str, dict[str, float]]:
    """Five-number summaries (linear-interpolation quantiles) per class."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask).reshape(-1).astype(bool)
    out = {}
    for name, sel in (("background", ~mask), ("target", mask)):
        vals = scores[sel]
        if vals.size == 0:
            raise ValueError(f"no {name} pixels in mask")
        q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
        out[name] = {
            "min": float(vals.min()),
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
            "max": float(vals.max()),
        }
    return out


# -- CSV emission -------------------------------------------------------------


def write_roc_csv(path, curves: RocCurves) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "p_f", "p_d"])
        for tau, pf, pd_ in zip(curves.thresholds, curves.p_f, curves.p_d):
            writer.writerow([repr(float(tau)), repr(float(pf)), repr(float(pd_))])


def write_auc_csv(path, report: AucReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["auc_pf_pd", "auc_tau_pd", "auc_tau_pf", "auc_oa", "auc_snpr"])
        writer.writerow([
            repr(report.auc_pf_pd), repr(report.auc_tau_pd),
            repr(report.auc_tau_pf), repr(report.auc_oa), repr(report.auc_snpr),
        ])


def write_separability_csv(path, stats: dict[str, dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "min", "q1", "median", "q3", "max"])
        for name, row in stats.items():
            writer.writerow(
                [name] + [repr(row[k]) for k in ("min", "q1", "median", "q3", "max")]
            )
