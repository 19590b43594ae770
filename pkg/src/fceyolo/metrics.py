"""Detection metrics: IoU matching, per-class AP, mAP@50 and mAP@50-95, F1 sweep.

Detections and ground truth are flat lists tagged by ``image_id``; boxes are
(x1, y1, x2, y2) in pixels.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

COCO_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: tuple
    score: float = 1.0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"box {self.box} is not well ordered")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: tuple


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union; 0 for disjoint or zero-area boxes."""
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    out[(area_a[:, None] <= 0) | (area_b[None, :] <= 0)] = 0.0
    return out


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score, ties kept in input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = 0.5) -> np.ndarray:
    """TP flags aligned with ``dets``.

    Per (image, class), detections are visited by descending score and each
    takes the unmatched ground truth of highest IoU, provided it reaches
    ``iou_thr``.  Equal IoUs go to the earlier ground truth.
    """
    flags = np.zeros(len(dets), dtype=bool)
    gt_groups = defaultdict(list)
    for g in gts:
        gt_groups[(g.image_id, g.class_id)].append(g.box)
    det_groups = defaultdict(list)
    for i, d in enumerate(dets):
        det_groups[(d.image_id, d.class_id)].append(i)
    for key, idx in det_groups.items():
        boxes = gt_groups.get(key)
        if not boxes:
            continue
        idx = [idx[j] for j in score_order([dets[i].score for i in idx])]
        ious = iou_matrix([dets[i].box for i in idx], boxes)
        free = np.ones(len(boxes), dtype=bool)
        for row, i in enumerate(idx):
            cand = np.where(free & (ious[row] >= iou_thr), ious[row], -1.0)
            j = int(np.argmax(cand))
            if cand[j] >= 0:
                free[j] = False
                flags[i] = True
    return flags


def pr_curve(tp_flags: Sequence[bool], scores: Sequence[float], n_gt: int) -> tuple:
    """Raw (recall, precision) arrays, one point per detection in score order."""
    tp = np.asarray(tp_flags, dtype=bool)[score_order(scores)]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def average_precision(tp_flags: Sequence[bool], scores: Sequence[float], n_gt: int,
                      points: Optional[int] = None) -> float:
    """Area under the precision envelope.

    ``points=None`` integrates the envelope exactly (all-points); an integer
    (e.g. 101) averages the envelope sampled at evenly spaced recalls.
    Returns NaN when ``n_gt`` is 0: the class has nothing to recall.
    """
    if n_gt <= 0:
        return math.nan
    if len(tp_flags) == 0:
        return 0.0
    recall, precision = pr_curve(tp_flags, scores, n_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    if points is None:
        step = np.nonzero(mrec[1:] != mrec[:-1])[0]
        return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))
    grid = np.linspace(0.0, 1.0, points)
    # envelope value at the first point whose recall reaches each grid level
    pos = np.searchsorted(recall, grid, side="left")
    env = mpre[1:-1]
    vals = np.where(pos < len(recall), env[np.minimum(pos, len(recall) - 1)], 0.0)
    return float(vals.mean())


def _class_ids(dets, gts) -> list:
    return sorted({g.class_id for g in gts} | {d.class_id for d in dets})


def class_ap(dets, gts, class_id: int, iou_thr: float, points: Optional[int] = None) -> float:
    cd = [d for d in dets if d.class_id == class_id]
    cg = [g for g in gts if g.class_id == class_id]
    flags = match_detections(cd, cg, iou_thr)
    return average_precision(flags, [d.score for d in cd], len(cg), points)


def map_at(dets: Sequence[Detection], gts: Sequence[GroundTruth],
           thresholds: Sequence[float] = COCO_THRESHOLDS, points: Optional[int] = None) -> tuple:
    """(mAP, per-class AP) averaging AP over thresholds first, then over
    classes that have ground truth."""
    if not thresholds:
        raise ValueError("at least one IoU threshold is required")
    if not gts:
        raise ValueError("no ground truth boxes: nothing to evaluate")
    per_class = {}
    for c in sorted({g.class_id for g in gts}):
        per_class[c] = float(np.mean([class_ap(dets, gts, c, t, points) for t in thresholds]))
    return float(np.mean(list(per_class.values()))), per_class


def f1_sweep(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = 0.5) -> tuple:
    """Micro-averaged F1 over every distinct confidence threshold.

    Returns (best_f1, best_threshold, curve) with curve rows
    (threshold, precision, recall, f1).  With no detections the best F1 is 0
    at threshold None.
    """
    n_gt = len(gts)
    if not dets:
        return 0.0, None, []
    flags = match_detections(dets, gts, iou_thr)
    order = score_order([d.score for d in dets])
    scores = np.array([dets[i].score for i in order])
    ctp = np.cumsum(flags[order])
    curve = []
    best = (0.0, None)
    for k in range(len(order)):
        if k + 1 < len(order) and scores[k + 1] == scores[k]:
            continue  # a threshold keeps every detection with that score
        p = ctp[k] / (k + 1)
        r = ctp[k] / n_gt if n_gt else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        curve.append((float(scores[k]), float(p), float(r), float(f1)))
        if f1 > best[0]:
            best = (float(f1), float(scores[k]))
    return best[0], best[1], curve


@dataclass
class EvalReport:
    ap50: dict = field(default_factory=dict)
    ap50_95: dict = field(default_factory=dict)
    map50: float = 0.0
    map50_95: float = 0.0
    excluded_classes: list = field(default_factory=list)
    best_f1: float = 0.0
    best_f1_threshold: Optional[float] = None
    f1_curve: list = field(default_factory=list)
    pr_curves: dict = field(default_factory=dict)  # class -> (recall list, precision list)

    def to_json(self) -> str:
        d = {
            "map50": self.map50, "map50_95": self.map50_95,
            "ap50": {str(k): v for k, v in self.ap50.items()},
            "ap50_95": {str(k): v for k, v in self.ap50_95.items()},
            "excluded_classes": self.excluded_classes,
            "best_f1": self.best_f1, "best_f1_threshold": self.best_f1_threshold,
            "f1_curve": [dict(zip(("threshold", "precision", "recall", "f1"), r)) for r in self.f1_curve],
        }
        return json.dumps(d, indent=2, sort_keys=True)

    def pr_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["class", "recall", "precision"])
        for c, (rec, prec) in sorted(self.pr_curves.items()):
            for r, p in zip(rec, prec):
                wr.writerow([c, f"{r:.6f}", f"{p:.6f}"])
        return buf.getvalue()

    def summary(self, names: Optional[Sequence[str]] = None) -> str:
        lines = [f"mAP@50: {self.map50:.4f}", f"mAP@50-95: {self.map50_95:.4f}",
                 f"best F1: {self.best_f1:.4f} @ {self.best_f1_threshold}"]
        for c in sorted(self.ap50):
            name = names[c] if names and c < len(names) else str(c)
            lines.append(f"  {name:<22} AP50 {self.ap50[c]:.4f}  AP50-95 {self.ap50_95[c]:.4f}")
        if self.excluded_classes:
            lines.append(f"  no ground truth (excluded): {self.excluded_classes}")
        return "\n".join(lines)


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth], points: Optional[int] = None) -> EvalReport:
    """Full report: AP per class at 0.5 and 0.50:0.95, F1 sweep, PR curves."""
    map50, ap50 = map_at(dets, gts, (0.5,), points)
    map5095, ap5095 = map_at(dets, gts, COCO_THRESHOLDS, points)
    best, thr, curve = f1_sweep(dets, gts)
    pr = {}
    for c in ap50:
        cd = [d for d in dets if d.class_id == c]
        n = sum(g.class_id == c for g in gts)
        rec, prec = pr_curve(match_detections(cd, gts, 0.5), [d.score for d in cd], n)
        pr[c] = (rec.tolist(), prec.tolist())
    excluded = [c for c in _class_ids(dets, gts) if c not in ap50]
    return EvalReport(ap50, ap5095, map50, map5095, excluded, best, thr, curve, pr)


# ------------------------------------------------------------------ text I/O


def format_predictions(dets: Sequence[Detection]) -> str:
    """One line per detection: image_id class_id score x1 y1 x2 y2."""
    return "".join(
        f"{d.image_id} {d.class_id} {d.score:.6f} " + " ".join(f"{v:.3f}" for v in d.box) + "\n"
        for d in dets
    )


def parse_predictions(text: str) -> list:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 7:
            raise ValueError(f"line {n}: expected 7 fields, got {len(parts)}")
        try:
            box = tuple(float(v) for v in parts[3:])
            out.append(Detection(parts[0], int(parts[1]), box, float(parts[2])))
        except ValueError as e:
            raise ValueError(f"line {n}: {e}") from None
    return out
