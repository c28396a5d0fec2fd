"""Oriented-box geometry: regression encoding, rotated BEV IoU, class-wise NMS.

All operations are pure and stateless. Rotated IoU runs on the yaw-rotated
BEV rectangles via convex polygon clipping (see kernels for the backends).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


def wrap_angle(a: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a < 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (m), size (m, all > 0), yaw in [-pi, pi)."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be strictly positive, got {(self.l, self.w, self.h)}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def bev(self) -> np.ndarray:
        """[cx, cy, l, w, yaw] row for the geometry kernels."""
        return np.array([self.cx, self.cy, self.l, self.w, self.yaw], dtype=np.float64)


@dataclass(frozen=True)
class BoxEncoding:
    """8-channel regression target: cell offset, height, log sizes, sin/cos yaw."""

    dx: float
    dy: float
    z: float
    log_l: float
    log_w: float
    log_h: float
    sin_yaw: float
    cos_yaw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.z, self.log_l, self.log_w,
                         self.log_h, self.sin_yaw, self.cos_yaw], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "BoxEncoding":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (8,):
            raise ValueError(f"encoding must have 8 channels, got shape {a.shape}")
        return BoxEncoding(*(float(v) for v in a))


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_id: int
    score: float
    iou_pred: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0 and 0.0 <= self.iou_pred <= 1.0):
            raise ValueError("score and iou_pred must lie in [0, 1]")


def encode_box(gt: Box3D, cell_origin, cell_size: float) -> BoxEncoding:
    """Encode a box against the cell whose min corner is cell_origin.

    dx, dy are the center offset in cell units (0.5 means cell center); sizes
    go to log space, yaw to (sin, cos).
    """
    ox, oy = float(cell_origin[0]), float(cell_origin[1])
    return BoxEncoding(
        dx=(gt.cx - ox) / cell_size,
        dy=(gt.cy - oy) / cell_size,
        z=gt.cz,
        log_l=math.log(gt.l),
        log_w=math.log(gt.w),
        log_h=math.log(gt.h),
        sin_yaw=math.sin(gt.yaw),
        cos_yaw=math.cos(gt.yaw),
    )


def decode_box(enc: BoxEncoding, cell_origin, cell_size: float) -> Box3D:
    """Invert encode_box. Total on finite inputs; atan2(0, 0) decodes to yaw 0."""
    ox, oy = float(cell_origin[0]), float(cell_origin[1])
    return Box3D(
        cx=ox + enc.dx * cell_size,
        cy=oy + enc.dy * cell_size,
        cz=enc.z,
        l=math.exp(enc.log_l),
        w=math.exp(enc.log_w),
        h=math.exp(enc.log_h),
        yaw=math.atan2(enc.sin_yaw, enc.cos_yaw),
    )


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated BEV rectangle IoU, symmetric, in [0, 1]."""
    return float(kernels.iou_pairs(a.bev()[None, :], b.bev()[None, :])[0])


def rotated_nms(dets, iou_thresholds) -> list[int]:
    """Greedy per-class suppression on rotated BEV boxes.

    dets: sequence of Detection. iou_thresholds: per-class threshold sequence
    covering every class present. Returns kept indices sorted by descending
    score (ties broken by original index, so equal-score behavior is stable).
    """
    if len(dets) == 0:
        return []
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    if classes.max() >= len(thresholds):
        raise ValueError("iou_thresholds must cover every class id")
    scores = np.array([d.score for d in dets], dtype=np.float64)
    boxes = np.stack([d.box.bev() for d in dets])

    kept = []
    for cls in np.unique(classes):
        idx = np.nonzero(classes == cls)[0]
        order = idx[np.lexsort((idx, -scores[idx]))]
        ious = kernels.iou_matrix(boxes[order], boxes[order])
        alive = np.ones(len(order), dtype=bool)
        for i in range(len(order)):
            if not alive[i]:
                continue
            kept.append(int(order[i]))
            alive[i + 1:] &= ious[i, i + 1:] <= thresholds[cls]
    kept.sort(key=lambda i: (-scores[i], i))
    return kept


# ---------------------------------------------------------------------------
# detection records

_FIELDS = "frame_id class_id score iou_pred cx cy cz l w h yaw"


def format_detection(frame_id: int, det: Detection) -> str:
    vals = (det.score, det.iou_pred, det.box.cx, det.box.cy, det.box.cz,
            det.box.l, det.box.w, det.box.h, det.box.yaw)
    return f"{frame_id} {det.class_id} " + " ".join(f"{v:.9g}" for v in vals)


def write_detections(path, records):
    """records: iterable of (frame_id, Detection). Newline-delimited text."""
    with open(path, "w", encoding="ascii") as f:
        for frame_id, det in records:
            f.write(format_detection(frame_id, det) + "\n")


def read_detections(path):
    """Parse a detection file back into (frame_id, Detection) tuples."""
    out = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 11:
                raise ValueError(f"{path}:{lineno}: expected 11 fields ({_FIELDS}), got {len(parts)}")
            try:
                frame_id = int(parts[0])
                class_id = int(parts[1])
                nums = [float(p) for p in parts[2:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed detection record: {exc}") from None
            box = Box3D(cx=nums[2], cy=nums[3], cz=nums[4], l=nums[5], w=nums[6],
                        h=nums[7], yaw=nums[8])
            out.append((frame_id, Detection(box=box, class_id=class_id,
                                            score=nums[0], iou_pred=nums[1])))
    return out
