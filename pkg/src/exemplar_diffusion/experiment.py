"""Dataset-level experiment driver shared by the CLI, the service and the tests."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .evalkit import EvalConfig, EvalResult, apply_exclusion, evaluate, perturb_exemplar
from .geometry import BBox
from .sampler import Detection, SamplerConfig, sample
from .schedule import Schedule, build_schedule
from .synthworld import Dataset, OracleDenoiser, OracleParams, Scene
from .uncertainty import (
    CalibrationResult,
    SceneCoverage,
    calibration,
    detection_ellipses,
    exemplar_stats,
    run_ensemble,
    scene_coverage,
)


@dataclass(frozen=True)
class ExperimentConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    oracle: OracleParams = field(default_factory=OracleParams)
    num_exemplars: int = 0
    sigma_px: float = 0.0
    exemplar_seed: int = 0
    schedule_kind: str = "cosine"
    T: int = 1000

    def __post_init__(self):
        if self.num_exemplars < 0:
            raise ValueError("num_exemplars must be non-negative")
        if self.sigma_px < 0:
            raise ValueError("sigma_px must be non-negative")
        if self.sampler.t_start > self.T:
            raise ValueError(f"t_start={self.sampler.t_start} exceeds T={self.T}")

    def to_dict(self) -> dict:
        return {
            "sampler": self.sampler.to_dict(),
            "oracle": self.oracle.to_dict(),
            "num_exemplars": self.num_exemplars,
            "sigma_px": self.sigma_px,
            "exemplar_seed": self.exemplar_seed,
            "schedule_kind": self.schedule_kind,
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            sampler=SamplerConfig.from_dict(d["sampler"]),
            oracle=OracleParams.from_dict(d["oracle"]),
            num_exemplars=int(d["num_exemplars"]),
            sigma_px=float(d["sigma_px"]),
            exemplar_seed=int(d["exemplar_seed"]),
            schedule_kind=d.get("schedule_kind", "cosine"),
            T=int(d.get("T", 1000)),
        )


@dataclass(frozen=True)
class SceneRun:
    scene_id: str
    exemplar_ids: tuple[int | None, ...]  # GT index of each exemplar, None if user-drawn
    exemplars: tuple[BBox, ...]
    detections: tuple[Detection, ...]

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "exemplars": [
                {"gt_index": i, "bbox": [b.cx, b.cy, b.w, b.h], "class_id": b.class_id}
                for i, b in zip(self.exemplar_ids, self.exemplars)
            ],
            "detections": [d.to_dict() for d in self.detections],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneRun":
        ex = d["exemplars"]
        return cls(
            d["scene_id"],
            tuple(None if e.get("gt_index") is None else int(e["gt_index"]) for e in ex),
            tuple(BBox.from_array(e["bbox"], e["class_id"]) for e in ex),
            tuple(Detection.from_dict(x) for x in d["detections"]),
        )


def derive_seed(base: int, index: int) -> int:
    """64-bit per-scene seed, independent across indices."""
    return int(np.random.SeedSequence([base, index]).generate_state(1, np.uint64)[0])


@lru_cache(maxsize=8)
def cached_schedule(kind: str, T: int) -> Schedule:
    return build_schedule(kind, T)


def select_exemplars(scene: Scene, count: int, rng: np.random.Generator) -> list[int]:
    """Uniform choice without replacement among the scene's objects."""
    count = min(count, len(scene.objects))
    if count == 0:
        return []
    return [int(i) for i in rng.choice(len(scene.objects), size=count, replace=False)]


def sample_scene(
    scene: Scene,
    index: int,
    cfg: ExperimentConfig,
    entropy: float,
    exemplar_ids: Sequence[int | None],
    exemplars: Sequence[BBox],
) -> SceneRun:
    """Run the sampler on one scene with the given exemplars."""
    scfg = replace(cfg.sampler, seed=derive_seed(cfg.sampler.seed, index))
    denoiser = OracleDenoiser(cfg.oracle, entropy, cfg.T, scfg.signal_scale)
    dets = sample(scene, exemplars, denoiser, scfg, cached_schedule(cfg.schedule_kind, cfg.T))
    return SceneRun(scene.scene_id, tuple(exemplar_ids), tuple(exemplars), tuple(dets))


def scene_exemplars(scene: Scene, index: int, cfg: ExperimentConfig) -> tuple[list[int], list[BBox]]:
    """Seeded exemplar choice, then the optional annotator-noise perturbation."""
    ex_rng = np.random.default_rng([cfg.exemplar_seed, index])
    ids = select_exemplars(scene, cfg.num_exemplars, ex_rng)
    exemplars = [
        perturb_exemplar(scene.objects[i].box, cfg.sigma_px, ex_rng, (scene.width, scene.height))
        for i in ids
    ]
    return ids, exemplars


def run_scene(scene: Scene, index: int, cfg: ExperimentConfig, entropy: float) -> SceneRun:
    ids, exemplars = scene_exemplars(scene, index, cfg)
    return sample_scene(scene, index, cfg, entropy, ids, exemplars)


def _run_chunk(args):
    scenes, start, cfg, entropy = args
    return [run_scene(s, start + k, cfg, entropy) for k, s in enumerate(scenes)]


def _chunks(scenes: list, jobs: int, extra: tuple) -> list[tuple]:
    n_chunks = 1 if jobs <= 1 else min(len(scenes), jobs * 4)
    bounds = np.linspace(0, len(scenes), n_chunks + 1).astype(int)
    return [(scenes[a:b], int(a), *extra) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _map(fn, tasks: list[tuple], jobs: int) -> list:
    if jobs <= 1 or len(tasks) < 2:
        chunks = [fn(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(fn, tasks))
    return [r for chunk in chunks for r in chunk]


def run_dataset(
    dataset: Dataset,
    cfg: ExperimentConfig,
    jobs: int = 1,
    entropy: float | None = None,
) -> list[SceneRun]:
    """Sample every scene; results are ordered by scene and independent of ``jobs``."""
    entropy = dataset.entropy() if entropy is None else entropy
    return _map(_run_chunk, _chunks(list(dataset.scenes), jobs, (cfg, entropy)), jobs)


def evaluate_runs(
    dataset: Dataset, runs: Sequence[SceneRun], eval_cfg: EvalConfig = EvalConfig()
) -> EvalResult:
    """AP/AP50/AR with exemplars removed from both GT and predictions."""
    by_id = {s.scene_id: s for s in dataset.scenes}
    images = []
    for run in runs:
        scene = by_id[run.scene_id]
        images.append(
            apply_exclusion(
                list(run.detections),
                scene.gt_boxes,
                [i for i in run.exemplar_ids if i is not None],
                eval_cfg.exclusion_iou,
            )
        )
    return evaluate(images, eval_cfg)


def calibrate_scene(
    scene: Scene, index: int, cfg: ExperimentConfig, entropy: float, ensemble: int, alpha: float
) -> tuple[SceneCoverage | None, list[dict]]:
    """Coverage of one scene plus corner ellipses for the first member's detections."""
    ids, exemplars = scene_exemplars(scene, index, replace(cfg, num_exemplars=max(1, cfg.num_exemplars)))
    denoiser = OracleDenoiser(cfg.oracle, entropy, cfg.T, cfg.sampler.signal_scale)
    members = run_ensemble(
        scene, exemplars, denoiser, cfg.sampler, ensemble,
        derive_seed(cfg.sampler.seed, index), cached_schedule(cfg.schedule_kind, cfg.T),
    )
    gts = list(scene.gt_boxes)
    cover = scene_coverage(scene.scene_id, members, gts, ids, alpha)
    stats = exemplar_stats(members, gts, ids)
    return cover, detection_ellipses(members[0], stats, alpha)


def _calibrate_chunk(args):
    scenes, start, cfg, entropy, ensemble, alpha = args
    return [calibrate_scene(s, start + k, cfg, entropy, ensemble, alpha) for k, s in enumerate(scenes)]


def run_calibration(
    dataset: Dataset,
    cfg: ExperimentConfig,
    ensemble: int = 100,
    alpha: float = 0.95,
    jobs: int = 1,
    entropy: float | None = None,
) -> tuple[CalibrationResult, dict[str, list[dict]]]:
    """Ensemble every scene around its exemplars and measure region coverage.

    Returns the calibration summary and per-scene ellipse exports.
    """
    entropy = dataset.entropy() if entropy is None else entropy
    scenes = list(dataset.scenes)
    out = _map(_calibrate_chunk, _chunks(scenes, jobs, (cfg, entropy, ensemble, alpha)), jobs)
    ellipses = {s.scene_id: e for s, (_, e) in zip(scenes, out)}
    return calibration([c for c, _ in out], alpha), ellipses
