"""One-pass-evaluation metrics: success AUC, SR@0.5/0.75, precision, and
normalized precision, with per-attribute breakdowns.

Conventions (OTB-style): the success curve is sampled on the 21-point grid
tau_i = i/20; success(tau) is the fraction of evaluated frames with
IoU >= tau for tau > 0, and with IoU > 0 at tau = 0 (so a perfect trace
scores AUC = 1 and a fully-disjoint trace scores 0).  Precision uses a 20 px
center-error threshold; normalized precision divides the center error by the
ground-truth box diagonal and thresholds at 0.2.  Frames flagged as fully
occluded / out of view are excluded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Annotation, CHALLENGE_ATTRIBUTES

TAUS = tuple(i / 20 for i in range(21))
PRECISION_PX = 20.0
NORM_PRECISION_THRESHOLD = 0.2


def iou_xywh(a, b) -> float:
    ax0, ay0, aw, ah = (float(v) for v in a)
    bx0, by0, bw, bh = (float(v) for v in b)
    ix = min(ax0 + aw, bx0 + bw) - max(ax0, bx0)
    iy = min(ay0 + ah, by0 + bh) - max(ay0, by0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class SequenceTrace:
    """Predictions aligned 1:1 with ground-truth annotations."""

    pred_boxes: np.ndarray            # (n, 4) float [x, y, w, h]
    gt: list[Annotation]
    attributes: tuple[str, ...] = ()
    name: str = "sequence"

    def __post_init__(self):
        if len(self.pred_boxes) != len(self.gt):
            raise ValueError(
                f"{self.name}: {len(self.pred_boxes)} predictions for {len(self.gt)} annotations"
            )


@dataclass
class MetricSummary:
    auc: float
    sr50: float
    sr75: float
    precision: float
    norm_precision: float
    n_frames: int

    def as_dict(self) -> dict:
        return {
            "AUC": self.auc, "SR_0.50": self.sr50, "SR_0.75": self.sr75,
            "Pre": self.precision, "Pre_N": self.norm_precision,
            "frames": self.n_frames,
        }


@dataclass
class EvalReport:
    overall: MetricSummary
    success_curve: tuple[float, ...]            # success(tau_i), i = 0..20
    per_attribute: dict[str, MetricSummary] = field(default_factory=dict)
    flops_summary: str | None = None

    def as_text(self) -> str:
        lines = ["metric,value"]
        for k, v in self.overall.as_dict().items():
            lines.append(f"{k},{v:.4f}" if isinstance(v, float) else f"{k},{v}")
        for attr in sorted(self.per_attribute):
            for k, v in self.per_attribute[attr].as_dict().items():
                lines.append(f"{attr}.{k},{v:.4f}" if isinstance(v, float) else f"{attr}.{k},{v}")
        if self.flops_summary:
            lines.append(f"flops,{self.flops_summary}")
        return "\n".join(lines) + "\n"


def _frame_stats(traces: list[SequenceTrace]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per evaluated frame: IoU, center error (px), normalized center error."""
    ious, errs, nerrs = [], [], []
    for tr in traces:
        for pred, ann in zip(tr.pred_boxes, tr.gt):
            if ann.flag == 1:
                continue
            gt = ann.box
            ious.append(iou_xywh(pred, gt))
            pcx = float(pred[0]) + float(pred[2]) / 2.0
            pcy = float(pred[1]) + float(pred[3]) / 2.0
            gcx, gcy = ann.center()
            err = math.hypot(pcx - gcx, pcy - gcy)
            errs.append(err)
            diag = math.hypot(gt[2], gt[3])
            nerrs.append(err / diag)
    return np.array(ious), np.array(errs), np.array(nerrs)


def success_rate(ious: np.ndarray, tau: float) -> float:
    if ious.size == 0:
        return 0.0
    hits = (ious > 0.0) if tau == 0.0 else (ious >= tau)
    return int(hits.sum()) / ious.size


def _summarize(traces: list[SequenceTrace]) -> tuple[MetricSummary, tuple[float, ...]]:
    ious, errs, nerrs = _frame_stats(traces)
    n = ious.size
    curve = tuple(success_rate(ious, tau) for tau in TAUS)
    if n == 0:
        return MetricSummary(0.0, 0.0, 0.0, 0.0, 0.0, 0), curve
    summary = MetricSummary(
        auc=sum(curve) / len(TAUS),
        sr50=success_rate(ious, 0.5),
        sr75=success_rate(ious, 0.75),
        precision=int((errs <= PRECISION_PX).sum()) / n,
        norm_precision=int((nerrs <= NORM_PRECISION_THRESHOLD).sum()) / n,
        n_frames=n,
    )
    return summary, curve


def evaluate(traces: list[SequenceTrace], flops_summary: str | None = None) -> EvalReport:
    overall, curve = _summarize(traces)
    per_attr = {}
    for attr in CHALLENGE_ATTRIBUTES:
        subset = [t for t in traces if attr in t.attributes]
        if subset:
            per_attr[attr], _ = _summarize(subset)
    return EvalReport(overall=overall, success_curve=curve,
                      per_attribute=per_attr, flops_summary=flops_summary)
