"""Box representation, signal-space scaling, overlap and suppression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_WH = 1e-4
DEFAULT_SCALE = 2.0

# Provenance code for randomly initialised (or renewed) proposals.
RANDOM = -1


@dataclass(frozen=True)
class BBox:
    """Center-parametrized box in image fractions."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    score: float = 1.0

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)

    def is_valid(self) -> bool:
        vals = (self.cx, self.cy, self.w, self.h, self.score)
        if not all(np.isfinite(v) for v in vals):
            return False
        return (
            0.0 <= self.cx <= 1.0
            and 0.0 <= self.cy <= 1.0
            and 0.0 < self.w <= 1.0
            and 0.0 < self.h <= 1.0
            and self.class_id >= 0
            and 0.0 <= self.score <= 1.0
        )

    @classmethod
    def from_array(cls, arr, class_id: int = 0, score: float = 1.0) -> "BBox":
        cx, cy, w, h = (float(v) for v in arr)
        return cls(cx, cy, w, h, int(class_id), float(score))


@dataclass(frozen=True)
class ScaledBox:
    """A box in signal space [-s, s]; ``exemplar`` is None for random provenance."""

    coords: tuple[float, float, float, float]
    exemplar: int | None = None

    @property
    def is_exemplar(self) -> bool:
        return self.exemplar is not None


def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from corners, as in pairwise_iou, so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between two (N, 4) and (M, 4) arrays of cxcywh boxes."""
    a = cxcywh_to_xyxy(np.asarray(a, dtype=float).reshape(-1, 4))
    b = cxcywh_to_xyxy(np.asarray(b, dtype=float).reshape(-1, 4))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.minimum(np.maximum(out, 0.0), 1.0)


def unit_to_signal(unit: np.ndarray, scale: float = DEFAULT_SCALE) -> np.ndarray:
    return (np.asarray(unit, dtype=float) - 0.5) * 2.0 * scale


def signal_to_unit(signal: np.ndarray, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """Inverse of :func:`unit_to_signal`, clamped to valid box coordinates."""
    unit = np.asarray(signal, dtype=float) / (2.0 * scale) + 0.5
    lo = np.array([0.0, 0.0, EPS_WH, EPS_WH])
    return np.minimum(np.maximum(unit, lo), 1.0)


def to_signal(b: BBox, scale: float = DEFAULT_SCALE, exemplar: int | None = None) -> ScaledBox:
    if scale <= 0:
        raise ValueError(f"signal scale must be positive, got {scale}")
    sig = unit_to_signal(b.as_array(), scale)
    return ScaledBox(tuple(float(v) for v in sig), exemplar)


def from_signal(x: ScaledBox, scale: float = DEFAULT_SCALE, class_id: int = 0, score: float = 1.0) -> BBox:
    if scale <= 0:
        raise ValueError(f"signal scale must be positive, got {scale}")
    return BBox.from_array(signal_to_unit(np.asarray(x.coords), scale), class_id, score)


def clamp_box(b: BBox) -> BBox:
    cx = min(max(b.cx, 0.0), 1.0)
    cy = min(max(b.cy, 0.0), 1.0)
    w = min(max(b.w, EPS_WH), 1.0)
    h = min(max(b.h, EPS_WH), 1.0)
    return BBox(cx, cy, w, h, b.class_id, b.score)


def nms(
    boxes: np.ndarray,
    scores: np.ndarray,
    classes: np.ndarray,
    iou_threshold: float = 0.5,
    max_keep: int | None = None,
) -> np.ndarray:
    """Class-wise greedy non-maximum suppression.

    Returns indices of kept boxes ordered by descending score; equal scores
    keep input order. With ``max_keep`` the scan stops once that many boxes
    are kept, which yields exactly the first ``max_keep`` of the full result.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float)
    classes = np.asarray(classes)
    n = len(boxes)
    limit = n if max_keep is None else max_keep
    order = np.argsort(-scores, kind="stable")
    xyxy = cxcywh_to_xyxy(boxes[order])
    cls = classes[order]
    area = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])
    def clash(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        lt = np.maximum(xyxy[rows, None, :2], xyxy[None, cols, :2])
        rb = np.minimum(xyxy[rows, None, 2:], xyxy[None, cols, 2:])
        wh = np.maximum(rb - lt, 0.0)
        inter = wh[..., 0] * wh[..., 1]
        union = area[rows, None] + area[None, cols] - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            ious = np.where(union > 0, inter / union, 0.0)
        return (ious > iou_threshold) & (cls[rows, None] == cls[None, cols])

    keep: list[int] = []
    chunk = 128
    for lo in range(0, n, chunk):
        if len(keep) >= limit:
            break
        cand = np.arange(lo, min(n, lo + chunk))
        if keep:
            dead = clash(cand, np.asarray(keep)).any(axis=1).tolist()
        else:
            dead = [False] * len(cand)
        inner = clash(cand, cand)
        for r in range(len(cand)):
            if dead[r]:
                continue
            keep.append(lo + r)
            if len(keep) >= limit:
                break
            for k in (np.flatnonzero(inner[r, r + 1 :]) + r + 1).tolist():
                dead[k] = True
    return order[np.asarray(keep, dtype=int)]
