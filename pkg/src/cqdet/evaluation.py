"""Score rectification, detection-GT matching, AP/APH with difficulty and
speed breakdowns, and report generation.

Matching is greedy within class and frame: detections in descending rectified
score claim the unmatched GT of highest BEV IoU at or above the class
threshold. AP integrates a 101-point interpolated precision-recall curve;
APH weights every true positive by heading accuracy max(0, 1 - dtheta/pi) in
both the precision and recall numerators.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

SPEED_BUCKETS = (
    ("stationary", 0.0, 0.2),
    ("slow", 0.2, 1.0),
    ("medium", 1.0, 3.0),
    ("fast", 3.0, 10.0),
    ("very_fast", 10.0, float("inf")),
)
LEVELS = ("L1", "L2")
CLASS_NAMES = ("vehicle", "pedestrian", "cyclist")


def rectify(score: float, iou_pred: float, beta: float) -> float:
    """alpha' = alpha * iou^beta; beta=0 (or iou=0 with beta=0) is identity."""
    if beta == 0.0:
        return score
    return score * (iou_pred ** beta)


def speed_bucket(speed: float) -> str:
    """Left-closed, right-open buckets partitioning [0, inf)."""
    for name, lo, hi in SPEED_BUCKETS:
        if lo <= speed < hi:
            return name
    return SPEED_BUCKETS[-1][0]


def difficulty(num_points: int) -> str:
    """L1: more than 5 points; everything else is L2-only."""
    return "L1" if num_points > 5 else "L2"


@dataclass
class MatchedDetection:
    score: float          # ranking (rectified) score
    class_id: int
    frame: int
    gt_index: int         # index into the frame's GT list, or -1 for FP
    heading_err: float    # |yaw error| wrapped to [0, pi]; 0 for FP
    gt_level: str = ""    # difficulty of the matched GT
    gt_bucket: str = ""   # speed bucket of the matched GT


@dataclass
class FrameAssignment:
    matches: list = field(default_factory=list)   # MatchedDetection
    gt_levels: list = field(default_factory=list)
    gt_buckets: list = field(default_factory=list)
    gt_classes: list = field(default_factory=list)


def heading_error(yaw_a: float, yaw_b: float, fold_pi: bool = False) -> float:
    d = abs(math.remainder(yaw_a - yaw_b, 2.0 * math.pi))
    if fold_pi and d > math.pi / 2.0:
        d = math.pi - d
    return d


def match(dets, gts, iou_thresholds, frame: int = 0,
          fold_pi: bool = False) -> FrameAssignment:
    """Greedy per-class assignment of one frame.

    dets: list of (Detection, ranking_score). gts: list of Annotation.
    Each detection, in descending ranking score, claims the not-yet-matched
    GT of the same class with the highest IoU if it reaches the class
    threshold; otherwise it is a false positive. Unmatched GTs are false
    negatives (they appear only through the per-class GT counts).
    """
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    out = FrameAssignment(
        gt_levels=[difficulty(g.num_points) for g in gts],
        gt_buckets=[speed_bucket(g.speed) for g in gts],
        gt_classes=[g.class_id for g in gts],
    )
    if dets:
        det_boxes = np.stack([d.box.bev() for d, _ in dets])
        gt_boxes = np.stack([g.box.bev() for g in gts]) if gts else np.zeros((0, 5))
        ious = kernels.iou_matrix(det_boxes, gt_boxes)
        order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
        taken = np.zeros(len(gts), dtype=bool)
        for i in order:
            det, rscore = dets[i]
            best_j, best_iou = -1, 0.0
            for j, g in enumerate(gts):
                if taken[j] or g.class_id != det.class_id:
                    continue
                if ious[i, j] >= thresholds[det.class_id] and ious[i, j] > best_iou:
                    best_j, best_iou = j, ious[i, j]
            if best_j >= 0:
                taken[best_j] = True
                herr = heading_error(det.box.yaw, gts[best_j].box.yaw, fold_pi)
                out.matches.append(MatchedDetection(
                    score=rscore, class_id=det.class_id, frame=frame,
                    gt_index=best_j, heading_err=herr,
                    gt_level=out.gt_levels[best_j],
                    gt_bucket=out.gt_buckets[best_j]))
            else:
                out.matches.append(MatchedDetection(
                    score=rscore, class_id=det.class_id, frame=frame,
                    gt_index=-1, heading_err=0.0))
    return out


def _pr_curve(entries, n_gt: int, n_samples: int):
    """entries: (score, tp_flag, heading_weight) pooled over frames.

    Returns (AP, APH) via n_samples-point interpolated area. Ties in score
    are processed together (threshold semantics)."""
    if n_gt == 0:
        return None, None
    if not entries:
        return 0.0, 0.0
    entries = sorted(entries, key=lambda e: -e[0])
    scores = np.array([e[0] for e in entries])
    tp = np.array([e[1] for e in entries], dtype=np.float64)
    hw = np.array([e[2] for e in entries], dtype=np.float64)
    # cut only where the score strictly drops, so tied scores share a point
    cum_tp = np.cumsum(tp)
    cum_hw = np.cumsum(hw)
    k = np.arange(1, len(entries) + 1)
    is_cut = np.ones(len(entries), dtype=bool)
    is_cut[:-1] = scores[:-1] > scores[1:]
    cum_tp, cum_hw, k = cum_tp[is_cut], cum_hw[is_cut], k[is_cut]
    precision = cum_tp / k
    recall = cum_tp / n_gt
    precision_h = cum_hw / k
    recall_h = cum_hw / n_gt

    def area(p, r):
        levels = np.linspace(0.0, 1.0, n_samples)
        best = np.zeros(n_samples)
        for pi, ri in zip(p, r):
            best = np.maximum(best, np.where(levels <= ri + 1e-12, pi, 0.0))
        return float(best.mean())

    return area(precision, recall), area(precision_h, recall_h)


@dataclass
class MetricCell:
    ap: float | None
    aph: float | None
    n_gt: int
    n_det: int


@dataclass
class DetectionReport:
    """class -> level -> bucket('all' included) -> MetricCell."""

    cells: dict
    mean_l2_ap: float | None
    mean_l2_aph: float | None

    def cell(self, class_id: int, level: str, bucket: str = "all") -> MetricCell:
        return self.cells[CLASS_NAMES[class_id]][level][bucket]


def ap_aph(assignments, class_id: int, level: str, bucket: str | None = None,
           n_samples: int = 101):
    """Compute (AP, APH, n_gt, n_det) for one class/difficulty pool.

    level L2 pools both difficulties; L1 restricts GT to L1 boxes. When a GT
    pool is restricted (L1 or a speed bucket), detections matched to an
    out-of-pool GT are ignored rather than counted as false positives;
    unmatched detections stay false positives everywhere.
    """
    entries = []
    n_gt = 0
    for a in assignments:
        for lvl, bkt, cls in zip(a.gt_levels, a.gt_buckets, a.gt_classes):
            if cls != class_id:
                continue
            if level == "L1" and lvl != "L1":
                continue
            if bucket is not None and bkt != bucket:
                continue
            n_gt += 1
        for m in a.matches:
            if m.class_id != class_id:
                continue
            if m.gt_index >= 0:
                if level == "L1" and m.gt_level != "L1":
                    continue  # matched an out-of-pool GT: ignored
                if bucket is not None and m.gt_bucket != bucket:
                    continue
                weight = max(0.0, 1.0 - m.heading_err / math.pi)
                entries.append((m.score, 1.0, weight))
            else:
                entries.append((m.score, 0.0, 0.0))
    ap, aph = _pr_curve(entries, n_gt, n_samples)
    return ap, aph, n_gt, len(entries)


def build_report(assignments, n_samples: int = 101,
                 buckets: bool = True) -> DetectionReport:
    cells = {}
    l2_aps, l2_aphs = [], []
    for class_id, cname in enumerate(CLASS_NAMES):
        cells[cname] = {}
        for level in LEVELS:
            cells[cname][level] = {}
            ap, aph, n_gt, n_det = ap_aph(assignments, class_id, level,
                                          n_samples=n_samples)
            cells[cname][level]["all"] = MetricCell(ap, aph, n_gt, n_det)
            if buckets:
                for bname, _, _ in SPEED_BUCKETS:
                    ap_b, aph_b, g_b, d_b = ap_aph(assignments, class_id, level,
                                                   bucket=bname, n_samples=n_samples)
                    cells[cname][level][bname] = MetricCell(ap_b, aph_b, g_b, d_b)
        top = cells[cname]["L2"]["all"]
        if top.ap is not None:
            l2_aps.append(top.ap)
            l2_aphs.append(top.aph)
    mean_ap = float(np.mean(l2_aps)) if l2_aps else None
    mean_aph = float(np.mean(l2_aphs)) if l2_aphs else None
    return DetectionReport(cells=cells, mean_l2_ap=mean_ap, mean_l2_aph=mean_aph)


def breakdown(report: DetectionReport, by: str):
    """Project the report onto one axis: difficulty | speed | class."""
    if by == "difficulty":
        return {lvl: {c: report.cells[c][lvl]["all"] for c in CLASS_NAMES}
                for lvl in LEVELS}
    if by == "speed":
        return {b[0]: {c: report.cells[c]["L2"][b[0]] for c in CLASS_NAMES}
                for b in SPEED_BUCKETS}
    if by == "class":
        return {c: report.cells[c]["L2"]["all"] for c in CLASS_NAMES}
    raise ValueError(f"unknown breakdown axis {by!r}")


def evaluate_detections(per_frame_dets, per_frame_gts, eval_cfg):
    """Full evaluation: rectify scores, match every frame, build the report.

    per_frame_dets: list over frames of Detection lists (raw scores).
    per_frame_gts: matching list of Annotation lists.
    """
    beta = eval_cfg.beta
    assignments = []
    for frame_idx, (dets, gts) in enumerate(zip(per_frame_dets, per_frame_gts)):
        ranked = [(d, rectify(d.score, d.iou_pred, beta[d.class_id])) for d in dets]
        assignments.append(match(ranked, gts, eval_cfg.match_iou, frame=frame_idx,
                                 fold_pi=eval_cfg.heading_fold_pi))
    return build_report(assignments, n_samples=eval_cfg.pr_samples)


# ---------------------------------------------------------------------------
# report output


def _fmt(v):
    return "   -  " if v is None else f"{v:6.4f}"


def report_table(report: DetectionReport) -> str:
    lines = []
    header = f"{'class':<12}{'level':<7}{'bucket':<12}{'AP':>8}{'APH':>8}{'#gt':>7}{'#det':>7}"
    lines.append(header)
    lines.append("-" * len(header))
    for cname in CLASS_NAMES:
        for level in LEVELS:
            for bucket, cell in report.cells[cname][level].items():
                if bucket != "all" and cell.n_gt == 0:
                    continue  # absent bucket
                lines.append(f"{cname:<12}{level:<7}{bucket:<12}"
                             f"{_fmt(cell.ap):>8}{_fmt(cell.aph):>8}"
                             f"{cell.n_gt:>7}{cell.n_det:>7}")
    lines.append("-" * len(header))
    lines.append(f"mean L2 AP  = {_fmt(report.mean_l2_ap)}")
    lines.append(f"mean L2 APH = {_fmt(report.mean_l2_aph)}")
    return "\n".join(lines)


def report_json(report: DetectionReport) -> str:
    doc = {"mean_l2_ap": report.mean_l2_ap, "mean_l2_aph": report.mean_l2_aph,
           "cells": {}}
    for cname, levels in report.cells.items():
        doc["cells"][cname] = {}
        for level, buckets in levels.items():
            doc["cells"][cname][level] = {
                b: {"ap": c.ap, "aph": c.aph, "n_gt": c.n_gt, "n_det": c.n_det}
                for b, c in buckets.items()}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
