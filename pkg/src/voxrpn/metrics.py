"""Recall and average precision for rotated 3D proposals."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import EVAL_IOUS
from .geometry import rotated_iou_matrix


class MetricsError(ValueError):
    pass


@dataclass
class MatchResult:
    tp: np.ndarray  # (P,) bool, in the given proposal order
    gt_matched: np.ndarray  # (G,) bool
    assigned: np.ndarray  # (P,) matched gt index or -1


def match(proposals, gts, iou_thresh: float, iou: np.ndarray | None = None) -> MatchResult:
    """Greedy matching of score-sorted proposals to the best still-unmatched GT with IoU >= threshold."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    if iou is None:
        iou = rotated_iou_matrix(proposals, gts)
    tp = np.zeros(len(proposals), dtype=bool)
    assigned = np.full(len(proposals), -1)
    taken = np.zeros(len(gts), dtype=bool)
    for i in range(len(proposals)):
        if len(gts) == 0:
            break
        cand = np.where(taken, -np.inf, iou[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            tp[i] = True
            assigned[i] = j
            taken[j] = True
    return MatchResult(tp, taken, assigned)


def _check(gts) -> np.ndarray:
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    if len(gts) == 0:
        raise MetricsError("recall and AP are undefined without ground-truth boxes")
    return gts


def recall_at(proposals, gts, iou_thresh: float) -> float:
    gts = _check(gts)
    return float(match(proposals, gts, iou_thresh).gt_matched.mean())


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated area under the precision-recall curve."""
    if n_gt <= 0:
        raise MetricsError("AP is undefined without ground-truth boxes")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(proposals, gts, iou_thresh: float) -> float:
    gts = _check(gts)
    return ap_from_flags(match(proposals, gts, iou_thresh).tp, len(gts))


@dataclass
class SceneResult:
    name: str
    n_gt: int
    n_proposals: int
    recall: dict
    ap: dict


@dataclass
class EvalReport:
    ious: tuple
    recall: dict = field(default_factory=dict)
    ap: dict = field(default_factory=dict)
    scenes: list = field(default_factory=list)
    n_gt: int = 0
    n_proposals: int = 0

    def to_json(self) -> dict:
        return {
            "ious": list(self.ious),
            "recall": {str(k): v for k, v in self.recall.items()},
            "ap": {str(k): v for k, v in self.ap.items()},
            "n_gt": self.n_gt,
            "n_proposals": self.n_proposals,
            "scenes": [{"name": s.name, "n_gt": s.n_gt, "n_proposals": s.n_proposals,
                        "recall": {str(k): v for k, v in s.recall.items()},
                        "ap": {str(k): v for k, v in s.ap.items()}} for s in self.scenes],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["scene", "n_gt", "n_proposals", *[f"recall@{t}" for t in self.ious],
                    *[f"ap@{t}" for t in self.ious]])
        for s in self.scenes:
            w.writerow([s.name, s.n_gt, s.n_proposals, *[s.recall[t] for t in self.ious], *[s.ap[t] for t in self.ious]])
        return buf.getvalue()


def evaluate(scenes: Sequence[tuple], ious: Sequence[float] = EVAL_IOUS) -> EvalReport:
    """``scenes``: ``(name, proposals (P, 7) sorted by score, gts (G, 7))`` triples.

    Aggregates weight each scene by its GT count.
    """
    report = EvalReport(tuple(ious))
    for name, props, gts in scenes:
        gts = _check(gts)
        props = np.asarray(props, dtype=np.float64).reshape(-1, 7)
        iou = rotated_iou_matrix(props, gts)
        rec, ap = {}, {}
        for t in ious:
            m = match(props, gts, t, iou)
            rec[t] = float(m.gt_matched.mean())
            ap[t] = ap_from_flags(m.tp, len(gts))
        report.scenes.append(SceneResult(str(name), len(gts), len(props), rec, ap))
    total = sum(s.n_gt for s in report.scenes)
    report.n_gt = total
    report.n_proposals = sum(s.n_proposals for s in report.scenes)
    for t in ious:
        report.recall[t] = sum(s.recall[t] * s.n_gt for s in report.scenes) / total if total else 0.0
        report.ap[t] = sum(s.ap[t] * s.n_gt for s in report.scenes) / total if total else 0.0
    return report
