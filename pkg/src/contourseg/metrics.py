"""Saliency evaluation: thresholded precision/recall, max F-beta, MAE,
and a boundary-band MAE variant.

Precision and recall are micro-averaged: pixel counts are pooled over the
whole prediction set at each threshold. Predictions are quantized to
bytes before thresholding with the same rule used when writing saliency
files, so file-based and in-memory evaluation agree bit-exactly.

Conventions for empty denominators: precision is 1 when nothing is
predicted positive, recall is 1 when the ground truth has no positives,
and F-beta is 0 when precision and recall are both 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import morphology
from .data import quantize_saliency


@dataclass
class MetricsConfig:
    beta_sq: float = 0.3
    thresholds: tuple = tuple(range(256))
    boundary_band_radius: int = 2

    def __post_init__(self):
        if self.beta_sq <= 0:
            raise ValueError(f"beta_sq must be positive, got {self.beta_sq}")
        self.thresholds = tuple(int(t) for t in self.thresholds)
        if not self.thresholds:
            raise ValueError("thresholds must be nonempty")
        if list(self.thresholds) != sorted(set(self.thresholds)):
            raise ValueError("thresholds must be sorted and unique")
        if self.thresholds[0] < 0 or self.thresholds[-1] > 255:
            raise ValueError("thresholds must lie in 0..255")
        if self.boundary_band_radius < 1:
            raise ValueError("boundary band radius must be >= 1")


@dataclass
class EvalReport:
    pr_curve: list = field(default_factory=list)
    max_fbeta: float = 0.0
    best_threshold: int = 0
    mae: float = 0.0
    boundary_mae: float = 0.0
    sample_count: int = 0


def _as_pairs(preds, gts):
    preds = [np.asarray(p) for p in preds]
    gts = [np.asarray(g) for g in gts]
    if not preds:
        raise ValueError("need at least one prediction")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return preds, gts


def _byte_histograms(preds, gts):
    """Counts of predicted byte values over foreground and background pixels."""
    fg = np.zeros(256, np.int64)
    bg = np.zeros(256, np.int64)
    for p, g in zip(preds, gts):
        b = quantize_saliency(p)
        pos = np.asarray(g) >= 1
        fg += np.bincount(b[pos].ravel(), minlength=256)
        bg += np.bincount(b[~pos].ravel(), minlength=256)
    return fg, bg


def _pr_from_histograms(fg, bg, thresholds):
    """Pooled precision/recall arrays; a pixel is positive when byte >= t."""
    # suffix sums: counts with byte value >= t
    tp_at = np.concatenate([np.cumsum(fg[::-1])[::-1], [0]])
    pp_at = tp_at + np.concatenate([np.cumsum(bg[::-1])[::-1], [0]])
    total_fg = int(fg.sum())
    ts = np.asarray(thresholds)
    tp = tp_at[ts].astype(np.float64)
    pp = pp_at[ts].astype(np.float64)
    precision = np.where(pp > 0, tp / np.maximum(pp, 1), 1.0)
    recall = np.where(total_fg > 0, tp / max(total_fg, 1), 1.0)
    return precision, recall


def pr_at_threshold(preds, gts, t: int) -> tuple[float, float]:
    """Micro-averaged precision and recall at one byte threshold."""
    preds, gts = _as_pairs(preds, gts)
    fg, bg = _byte_histograms(preds, gts)
    precision, recall = _pr_from_histograms(fg, bg, [int(t)])
    return float(precision[0]), float(recall[0])


def pr_curve(preds, gts, cfg: MetricsConfig | None = None) -> list[tuple[int, float, float]]:
    """(threshold, precision, recall) triples over the configured sweep."""
    cfg = cfg or MetricsConfig()
    preds, gts = _as_pairs(preds, gts)
    fg, bg = _byte_histograms(preds, gts)
    precision, recall = _pr_from_histograms(fg, bg, cfg.thresholds)
    return [(t, float(p), float(r)) for t, p, r in zip(cfg.thresholds, precision, recall)]


def fbeta(precision: float, recall: float, beta_sq: float) -> float:
    denom = beta_sq * precision + recall
    if denom == 0:
        return 0.0
    return (1.0 + beta_sq) * precision * recall / denom


def max_fbeta(preds, gts, cfg: MetricsConfig | None = None) -> tuple[int, float]:
    """Best (threshold, F-beta) over the sweep; ties go to the lowest threshold."""
    cfg = cfg or MetricsConfig()
    curve = pr_curve(preds, gts, cfg)
    scores = [fbeta(p, r, cfg.beta_sq) for _, p, r in curve]
    best = int(np.argmax(scores))
    return curve[best][0], float(scores[best])


def mae(preds, gts) -> float:
    """Mean over samples of the per-pixel mean absolute difference."""
    preds, gts = _as_pairs(preds, gts)
    return float(
        np.mean([np.mean(np.abs(p.astype(np.float64) - np.asarray(g, np.float64)))
                 for p, g in zip(preds, gts)])
    )


def boundary_mae(preds, gts, cfg: MetricsConfig | None = None) -> float:
    """MAE restricted to a morphological band around ground-truth boundaries.

    Samples whose band is empty are skipped; if every band is empty the
    metric is undefined and an error is raised.
    """
    cfg = cfg or MetricsConfig()
    preds, gts = _as_pairs(preds, gts)
    se = 2 * cfg.boundary_band_radius + 1
    values = []
    for p, g in zip(preds, gts):
        band = morphology.morphological_gradient(np.asarray(g, np.uint8), se) == 1
        if not band.any():
            continue
        diff = np.abs(p.astype(np.float64) - np.asarray(g, np.float64))
        values.append(diff[band].mean())
    if not values:
        raise ValueError("every sample has an empty boundary band")
    return float(np.mean(values))


def evaluate(preds, gts, cfg: MetricsConfig | None = None) -> EvalReport:
    """Full report; predictions are byte-quantized once so that evaluating
    written saliency files reproduces these numbers exactly."""
    cfg = cfg or MetricsConfig()
    preds, gts = _as_pairs(preds, gts)
    quantized = [quantize_saliency(p).astype(np.float64) / 255.0 for p in preds]
    curve = pr_curve(quantized, gts, cfg)
    scores = [fbeta(p, r, cfg.beta_sq) for _, p, r in curve]
    best = int(np.argmax(scores))
    return EvalReport(
        pr_curve=curve,
        max_fbeta=float(scores[best]),
        best_threshold=curve[best][0],
        mae=mae(quantized, gts),
        boundary_mae=boundary_mae(quantized, gts, cfg),
        sample_count=len(quantized),
    )


def write_report(report: EvalReport, out_dir) -> None:
    """pr_curve.csv (threshold,precision,recall) and report.txt (key=value)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "pr_curve.csv", "w") as fh:
        fh.write("threshold,precision,recall\n")
        for t, p, r in report.pr_curve:
            fh.write(f"{t},{p:.9f},{r:.9f}\n")
    with open(out_dir / "report.txt", "w") as fh:
        fh.write(f"max_fbeta={report.max_fbeta:.9f}\n")
        fh.write(f"best_threshold={report.best_threshold}\n")
        fh.write(f"mae={report.mae:.9f}\n")
        fh.write(f"boundary_mae={report.boundary_mae:.9f}\n")
        fh.write(f"samples={report.sample_count}\n")
