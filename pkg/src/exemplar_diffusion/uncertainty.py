"""Exemplar-anchored ensemble uncertainty.

An ensemble of sampler runs is matched against each exemplar; the matched
boxes give per-corner Gaussian estimates (upper-left and bottom-right). Those
covariances define Mahalanobis confidence regions that are transferred to
every other detection, which is what the calibration statistics measure.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import BBox, iou
from .sampler import Detection, SamplerConfig, SamplingError, sample
from .schedule import Schedule

RIDGE = 1e-9
PSD_TOL = 1e-10
_DEGENERATE_FLOOR = 1e-12


class InsufficientSamplesError(ValueError):
    """Fewer than two ensemble members matched an exemplar."""


class EnsembleError(RuntimeError):
    def __init__(self, message: str, member: int):
        super().__init__(f"ensemble member {member}: {message}")
        self.member = member


# ---------------------------------------------------------------------------
# chi-square via the regularized incomplete gamma function


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 0.0
    log_prefix = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1:
        term = total = 1.0 / a
        ap = a
        for _ in range(10_000):
            ap += 1
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-17:
                break
        return min(1.0, total * math.exp(log_prefix))
    # Lentz's continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1 - a
    c = 1 / tiny
    d = 1 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1 / d
        delta = d * c
        h *= delta
        if abs(delta - 1) < 1e-16:
            break
    return max(0.0, 1.0 - math.exp(log_prefix) * h)


def chi2_cdf(x: float, dof: int) -> float:
    return gamma_p(dof / 2, x / 2)


def chi2_quantile(alpha: float, dof: int, tol: float = 1e-10) -> float:
    """Inverse chi-square CDF by bisection."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if dof < 1:
        raise ValueError("dof must be >= 1")
    lo, hi = 0.0, max(1.0, float(dof))
    while chi2_cdf(hi, dof) < alpha:
        lo, hi = hi, hi * 2
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# covariance handling


def regularize(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    """Symmetrize and add a trace-scaled ridge when ``cov`` is near singular.

    Returns the matrix and whether it was degenerate. Raises if ``cov`` has an
    eigenvalue below ``-PSD_TOL``, which no ridge is meant to hide.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance has non-finite entries")
    cov = 0.5 * (cov + cov.T)
    eig = np.linalg.eigvalsh(cov)
    if eig[0] < -PSD_TOL:
        raise ValueError(f"covariance is not positive semi-definite (min eigenvalue {eig[0]:.3g})")
    trace = float(np.trace(cov))
    if eig[0] > RIDGE * trace and trace > 0:
        return cov, False
    ridge = RIDGE * trace if trace > 0 else _DEGENERATE_FLOOR
    return cov + ridge * np.eye(len(cov)), True


def mahalanobis(x, mu, cov) -> float:
    diff = np.asarray(x, dtype=float) - np.asarray(mu, dtype=float)
    cov, _ = regularize(cov)
    return math.sqrt(max(0.0, float(diff @ np.linalg.solve(cov, diff))))


def _mahalanobis_sq(diffs: np.ndarray, cov: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(cov)
    return np.einsum("...i,ij,...j->...", diffs, inv, diffs)


# ---------------------------------------------------------------------------
# regions and ensemble statistics


@dataclass(frozen=True)
class ConfidenceRegion:
    center: np.ndarray
    cov: np.ndarray
    alpha: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))
        cov, _ = regularize(self.cov)
        object.__setattr__(self, "cov", cov)

    @property
    def quantile(self) -> float:
        return chi2_quantile(self.alpha, 2)

    def contains(self, x) -> bool:
        d = np.asarray(x, dtype=float) - self.center
        return float(d @ np.linalg.solve(self.cov, d)) <= self.quantile

    def ellipse(self) -> tuple[np.ndarray, float]:
        """Semi-axes (major first) and orientation of the major axis."""
        vals, vecs = np.linalg.eigh(self.cov)
        order = vals.argsort()[::-1]
        axes = np.sqrt(np.maximum(vals[order], 0.0) * self.quantile)
        major = vecs[:, order[0]]
        return axes, float(math.atan2(major[1], major[0]))

    def translated(self, center) -> "ConfidenceRegion":
        return ConfidenceRegion(center, self.cov, self.alpha)

    def to_json(self) -> dict:
        axes, angle = self.ellipse()
        return {
            "center": [float(v) for v in self.center],
            "axes": [float(v) for v in axes],
            "angle_rad": angle,
            "alpha": self.alpha,
        }


def box_corners(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Upper-left and bottom-right corners of ``(N, 4)`` cxcywh boxes."""
    b = np.asarray(boxes, dtype=float).reshape(-1, 4)
    half = b[:, 2:] / 2
    return b[:, :2] - half, b[:, :2] + half


@dataclass(frozen=True)
class EnsembleStats:
    mu_ul: np.ndarray
    mu_br: np.ndarray
    cov_ul: np.ndarray
    cov_br: np.ndarray
    m: int
    members: tuple[Detection, ...]
    degenerate: bool = False

    def regions(self, alpha: float = 0.95) -> tuple[ConfidenceRegion, ConfidenceRegion]:
        return (
            ConfidenceRegion(self.mu_ul, self.cov_ul, alpha),
            ConfidenceRegion(self.mu_br, self.cov_br, alpha),
        )


def fit_corner_stats(matched: Sequence[Detection]) -> EnsembleStats:
    if len(matched) < 2:
        raise InsufficientSamplesError(f"need at least 2 matched boxes, got {len(matched)}")
    ul, br = box_corners(np.array([d.box.as_array() for d in matched]))
    cov_ul, deg_ul = regularize(np.cov(ul, rowvar=False))
    cov_br, deg_br = regularize(np.cov(br, rowvar=False))
    return EnsembleStats(
        ul.mean(axis=0), br.mean(axis=0), cov_ul, cov_br, len(matched), tuple(matched), deg_ul or deg_br
    )


def best_match(dets: Sequence[Detection], target: BBox, iou_thr: float = 0.5) -> Detection | None:
    """Highest-score detection with IoU >= ``iou_thr`` against ``target``."""
    best = None
    for d in dets:
        if iou(d.box, target) >= iou_thr and (best is None or d.score > best.score):
            best = d
    return best


def match_to_exemplar(
    members: Sequence[Sequence[Detection]], exemplar: BBox, iou_thr: float = 0.5
) -> list[Detection]:
    matched = [m for m in (best_match(dets, exemplar, iou_thr) for dets in members) if m is not None]
    if len(matched) < 2:
        raise InsufficientSamplesError(
            f"only {len(matched)} of {len(members)} members matched the exemplar"
        )
    return matched


def run_ensemble(
    scene_ctx,
    exemplars: Sequence[BBox],
    denoiser,
    cfg: SamplerConfig,
    M: int,
    base_seed: int,
    sched: Schedule,
    executor: Executor | None = None,
    seed_fn: Callable[[int, int], int] | None = None,
) -> list[list[Detection]]:
    """``M`` independent sampler runs, member ``i`` seeded with ``base_seed + i``.

    ``executor`` may run members concurrently; results keep member order.
    """
    if M < 2:
        raise ValueError("ensemble size must be at least 2")
    seed_fn = seed_fn or (lambda base, i: base + i)

    def member(i: int) -> list[Detection]:
        try:
            return sample(scene_ctx, exemplars, denoiser, replace(cfg, seed=seed_fn(base_seed, i)), sched)
        except SamplingError as exc:
            raise EnsembleError(str(exc), i) from exc

    if executor is None:
        return [member(i) for i in range(M)]
    return list(executor.map(member, range(M)))


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class SceneCoverage:
    scene_id: str
    covered: int
    total: int

    @property
    def coverage(self) -> float:
        return self.covered / self.total


@dataclass(frozen=True)
class CalibrationResult:
    alpha: float
    scenes: tuple[SceneCoverage, ...]
    skipped: int
    median_coverage: float
    calibration_error: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "median_coverage": self.median_coverage,
            "calibration_error": self.calibration_error,
            "skipped": self.skipped,
            "scenes": [
                {"scene_id": s.scene_id, "covered": s.covered, "total": s.total, "coverage": s.coverage}
                for s in self.scenes
            ],
        }


def calibration_error(alpha: float, median_coverage: float) -> float:
    """Gap in percentage points between nominal level and median coverage."""
    # rounding absorbs binary noise such as 100 * 0.83 = 83.00000000000001
    return round(abs(100 * alpha - 100 * median_coverage), 9)


def pooled_covariances(stats: Sequence[EnsembleStats]) -> tuple[np.ndarray, np.ndarray]:
    """Average the per-exemplar corner covariances of one scene."""
    if not stats:
        raise InsufficientSamplesError("no exemplar statistics to pool")
    return (
        np.mean([s.cov_ul for s in stats], axis=0),
        np.mean([s.cov_br for s in stats], axis=0),
    )


def exemplar_stats(
    members: Sequence[Sequence[Detection]],
    gts: Sequence[BBox],
    exemplar_ids: Sequence[int],
    iou_thr: float = 0.5,
) -> list[EnsembleStats]:
    """Corner statistics for every exemplar that enough members re-detected."""
    stats = []
    for i in exemplar_ids:
        try:
            stats.append(fit_corner_stats(match_to_exemplar(members, gts[i], iou_thr)))
        except InsufficientSamplesError:
            continue
    return stats


def scene_coverage(
    scene_id: str,
    members: Sequence[Sequence[Detection]],
    gts: Sequence[BBox],
    exemplar_ids: Sequence[int],
    alpha: float = 0.95,
    iou_thr: float = 0.5,
) -> SceneCoverage | None:
    """Coverage of the held-out objects of one scene, or ``None`` without regions.

    The exemplar-fitted corner regions are re-centred on each member's matched
    prediction for every held-out object; the pair counts as covered when both
    ground-truth corners fall inside.
    """
    stats = exemplar_stats(members, gts, exemplar_ids, iou_thr)
    if not stats:
        return None
    cov_ul, cov_br = pooled_covariances(stats)
    cov_ul, _ = regularize(cov_ul)
    cov_br, _ = regularize(cov_br)
    q = chi2_quantile(alpha, 2)

    excluded = set(exemplar_ids)
    covered = total = 0
    for j, gt in enumerate(gts):
        if j in excluded:
            continue
        preds = [m for m in (best_match(dets, gt, iou_thr) for dets in members) if m is not None]
        if not preds:
            continue
        p_ul, p_br = box_corners(np.array([p.box.as_array() for p in preds]))
        g_ul, g_br = box_corners(gt.as_array())
        inside = (_mahalanobis_sq(g_ul - p_ul, cov_ul) <= q) & (_mahalanobis_sq(g_br - p_br, cov_br) <= q)
        covered += int(inside.sum())
        total += len(preds)
    if total == 0:
        return None
    return SceneCoverage(scene_id, covered, total)


def calibration(results: Sequence[SceneCoverage | None], alpha: float = 0.95) -> CalibrationResult:
    valid = tuple(r for r in results if r is not None)
    skipped = len(results) - len(valid)
    if not valid:
        raise InsufficientSamplesError("no scene produced a confidence region")
    med = float(np.median([r.coverage for r in valid]))
    return CalibrationResult(alpha, valid, skipped, med, calibration_error(alpha, med))


def detection_ellipses(
    detections: Sequence[Detection], stats: Sequence[EnsembleStats], alpha: float = 0.95
) -> list[dict]:
    """Corner ellipses for each detection using the pooled exemplar covariances."""
    if not stats or not detections:
        return []
    cov_ul, cov_br = pooled_covariances(stats)
    ul, br = box_corners(np.array([d.box.as_array() for d in detections]))
    out = []
    for k in range(len(detections)):
        out.append({
            "detection": k,
            "upper_left": ConfidenceRegion(ul[k], cov_ul, alpha).to_json(),
            "bottom_right": ConfidenceRegion(br[k], cov_br, alpha).to_json(),
        })
    return out
