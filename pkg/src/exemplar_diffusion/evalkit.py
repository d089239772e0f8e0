"""COCO-style matching and AP/AR, exemplar exclusion, exemplar noise, spatial entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import BBox, clamp_box, pairwise_iou
from .synthworld import REF_HEIGHT, REF_WIDTH

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.arange(101) / 100


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    max_detections: int = 100
    exclusion_iou: float = 0.5
    entropy_bins: int = 16

    def __post_init__(self):
        thr = tuple(float(t) for t in self.iou_thresholds)
        if not thr or any(not 0 < t <= 1 for t in thr):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if any(a >= b for a, b in zip(thr, thr[1:])):
            raise ValueError("IoU thresholds must be strictly increasing")
        if 0.5 not in thr:
            raise ValueError("IoU thresholds must include 0.5 for AP50")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")
        if self.entropy_bins < 2:
            raise ValueError("entropy_bins must be >= 2")
        object.__setattr__(self, "iou_thresholds", thr)


@dataclass(frozen=True, eq=False)
class Matching:
    """Greedy matching of one image's predictions (score-ranked) to its GT."""

    scores: np.ndarray
    classes: np.ndarray
    gt_index: np.ndarray  # matched GT index per ranked prediction, -1 if none
    gt_classes: np.ndarray
    order: np.ndarray  # ranked position -> index into the input predictions

    @property
    def tp(self) -> int:
        return int((self.gt_index >= 0).sum())

    @property
    def fp(self) -> int:
        return int((self.gt_index < 0).sum())

    @property
    def fn(self) -> int:
        return len(self.gt_classes) - self.tp


@dataclass
class ThresholdResult:
    iou_threshold: float
    ap: float
    recall: float
    tp: int
    fp: int
    fn: int
    # class id -> (precision, recall) arrays along the ranked predictions
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ar: float
    per_threshold: list[ThresholdResult]

    def to_dict(self) -> dict:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AR": self.ar,
            "per_threshold": [
                {"iou": r.iou_threshold, "AP": r.ap, "recall": r.recall, "tp": r.tp, "fp": r.fp, "fn": r.fn}
                for r in self.per_threshold
            ],
        }


def _pred_arrays(preds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(preds) == 0:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=int)
    boxes = np.array([p.box.as_array() for p in preds])
    scores = np.array([p.score for p in preds], dtype=float)
    classes = np.array([p.class_id for p in preds], dtype=int)
    return boxes, scores, classes


def match_greedy(preds, gts: Sequence[BBox], iou_thr: float, max_detections: int | None = None) -> Matching:
    """Match predictions in descending score order to the best unmatched same-class GT."""
    boxes, scores, classes = _pred_arrays(preds)
    order = np.argsort(-scores, kind="stable")
    if max_detections is not None:
        order = order[:max_detections]
    gt_boxes = np.array([g.as_array() for g in gts]).reshape(-1, 4)
    gt_classes = np.array([g.class_id for g in gts], dtype=int)
    ious = pairwise_iou(boxes[order], gt_boxes)
    taken = np.zeros(len(gts), dtype=bool)
    gt_index = np.full(len(order), -1, dtype=int)
    for rank, i in enumerate(order):
        if len(gts) == 0:
            break
        cand = np.where(~taken & (gt_classes == classes[i]), ious[rank], -1.0)
        j = int(cand.argmax())
        if cand[j] >= iou_thr:
            taken[j] = True
            gt_index[rank] = j
    return Matching(scores[order], classes[order], gt_index, gt_classes, order)


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    if len(precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return math.fsum(vals.tolist()) / len(RECALL_GRID)


def average_precision(
    matchings: Sequence[Mapping[float, Matching]], cfg: EvalConfig = EvalConfig()
) -> EvalResult:
    """AP, AP50 and AR over a dataset of per-image matchings keyed by IoU threshold."""
    results = []
    for thr in cfg.iou_thresholds:
        per_image = [m[thr] for m in matchings]
        gt_classes = np.concatenate([m.gt_classes for m in per_image]) if per_image else np.zeros(0, int)
        if len(gt_classes) == 0:
            raise ValueError("no ground truth boxes in dataset; AP/AR undefined")
        scores = np.concatenate([m.scores for m in per_image])
        classes = np.concatenate([m.classes for m in per_image])
        hits = np.concatenate([m.gt_index >= 0 for m in per_image])

        aps, recalls, curves = [], [], {}
        for c in np.unique(gt_classes):
            n_gt = int((gt_classes == c).sum())
            sel = classes == c
            order = np.argsort(-scores[sel], kind="stable")
            tp = np.cumsum(hits[sel][order])
            precision = tp / np.arange(1, len(tp) + 1)
            recall = tp / n_gt
            curves[int(c)] = (precision, recall)
            aps.append(_interpolated_ap(precision, recall))
            recalls.append(float(recall[-1]) if len(recall) else 0.0)
        n_tp = int(hits.sum())
        results.append(
            ThresholdResult(
                iou_threshold=thr,
                ap=math.fsum(aps) / len(aps),
                recall=math.fsum(recalls) / len(recalls),
                tp=n_tp,
                fp=int(len(hits) - n_tp),
                fn=int(len(gt_classes) - n_tp),
                curves=curves,
            )
        )
    ap = math.fsum(r.ap for r in results) / len(results)
    ar = math.fsum(r.recall for r in results) / len(results)
    ap50 = next(r.ap for r in results if r.iou_threshold == 0.5)
    return EvalResult(ap=ap, ap50=ap50, ar=ar, per_threshold=results)


def match_all(preds, gts: Sequence[BBox], cfg: EvalConfig = EvalConfig()) -> dict[float, Matching]:
    return {thr: match_greedy(preds, gts, thr, cfg.max_detections) for thr in cfg.iou_thresholds}


def evaluate(images, cfg: EvalConfig = EvalConfig()) -> EvalResult:
    """Evaluate an iterable of ``(predictions, ground_truth)`` pairs."""
    return average_precision([match_all(p, g, cfg) for p, g in images], cfg)


def apply_exclusion(preds, gts: Sequence[BBox], exemplar_ids: Sequence[int], exclusion_iou: float = 0.5):
    """Remove exemplar objects from GT and every prediction overlapping one of them."""
    ids = set(int(i) for i in exemplar_ids)
    if any(i < 0 or i >= len(gts) for i in ids):
        raise IndexError(f"exemplar ids {sorted(ids)} out of range for {len(gts)} GT boxes")
    kept_gts = [g for i, g in enumerate(gts) if i not in ids]
    if not ids or len(preds) == 0:
        return list(preds), kept_gts
    ex = np.array([gts[i].as_array() for i in sorted(ids)])
    boxes, _, _ = _pred_arrays(preds)
    hit = (pairwise_iou(boxes, ex) >= exclusion_iou).any(axis=1)
    return [p for p, h in zip(preds, hit) if not h], kept_gts


def perturb_exemplar(
    b: BBox,
    sigma_px: float,
    rng: np.random.Generator,
    ref_resolution: tuple[int, int] = (REF_WIDTH, REF_HEIGHT),
) -> BBox:
    """Add pixel-scale Gaussian noise to every box coordinate."""
    if sigma_px < 0:
        raise ValueError("sigma_px must be non-negative")
    width, height = ref_resolution
    noise = rng.standard_normal(4) * sigma_px / np.array([width, height, width, height], dtype=float)
    cx, cy, w, h = b.as_array() + noise
    return clamp_box(BBox(float(cx), float(cy), float(w), float(h), b.class_id, b.score))


def spatial_entropy(boxes, bins: int = 16) -> float:
    """Normalised Shannon entropy of the ``bins`` x ``bins`` histogram of box centers."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    centers = np.array([[b.cx, b.cy] for b in boxes], dtype=float).reshape(-1, 2)
    if len(centers) == 0:
        raise ValueError("spatial entropy needs at least one box")
    cells = np.clip(np.floor(centers * bins).astype(int), 0, bins - 1)
    counts = np.bincount(cells[:, 0] * bins + cells[:, 1], minlength=bins * bins)
    p = counts[counts > 0] / len(centers)
    h = -float(np.sum(p * np.log(p))) / math.log(bins * bins)
    return min(1.0, max(0.0, h))
