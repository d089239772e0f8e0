"""Exemplar-diffusion inference loop.

Random Gaussian proposals and forward-diffused exemplar copies are denoised
jointly by a pluggable denoiser with deterministic DDIM updates and box
renewal between steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .geometry import DEFAULT_SCALE, RANDOM, BBox, ScaledBox, nms, signal_to_unit, unit_to_signal
from .schedule import Schedule, q_sample

StepFn = Callable[["ProposalSet"], "tuple[np.ndarray, np.ndarray]"]


class SamplingError(RuntimeError):
    """A denoiser call failed or returned malformed output."""

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class SamplerConfig:
    n: int = 300
    n_star: int = 200
    tau: int = 10
    num_steps: int = 10
    t_start: int = 1000
    renew_threshold: float = 0.5
    signal_scale: float = DEFAULT_SCALE
    seed: int = 0
    nms_iou: float = 0.5
    max_detections: int = 100
    report_survivors_only: bool = True

    def __post_init__(self):
        if self.n < 0 or self.n_star < 0:
            raise ValueError("n and n_star must be non-negative")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.t_start < self.num_steps:
            raise ValueError("t_start must be >= num_steps")
        if not 0 <= self.tau <= self.t_start:
            raise ValueError(f"tau={self.tau} must lie in [0, t_start={self.t_start}]")
        if not 0.0 <= self.renew_threshold <= 1.0:
            raise ValueError("renew_threshold must lie in [0, 1]")
        if self.signal_scale <= 0:
            raise ValueError("signal_scale must be positive")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def num_proposals(self, num_exemplars: int) -> int:
        return self.n + num_exemplars * self.n_star

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """Proposals in signal space; ``provenance`` is -1 for random, else the exemplar index."""

    coords: np.ndarray
    provenance: np.ndarray
    timestep: int

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def exemplar_mask(self) -> np.ndarray:
        return self.provenance != RANDOM

    @property
    def boxes(self) -> list[ScaledBox]:
        return [
            ScaledBox(tuple(float(v) for v in row), None if p == RANDOM else int(p))
            for row, p in zip(self.coords, self.provenance)
        ]


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float
    provenance: int = RANDOM

    def to_dict(self) -> dict:
        b = self.box
        return {
            "bbox": [b.cx, b.cy, b.w, b.h],
            "class_id": self.class_id,
            "score": self.score,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        box = BBox.from_array(d["bbox"], d["class_id"], d["score"])
        return cls(box, int(d["class_id"]), float(d["score"]), int(d.get("provenance", RANDOM)))


class Denoiser(Protocol):
    """Stands in for the trained detection head.

    ``start`` binds the denoiser to one scene and one sampling run and returns
    the per-step function mapping a proposal set to predicted clean boxes
    (signal space, shape (P, 4)) and class scores in [0, 1] (shape (P, C)).
    """

    def start(self, scene_ctx: Any, rng: np.random.Generator) -> StepFn: ...


def timestep_ladder(t_start: int, num_steps: int) -> list[int]:
    ts = np.rint(np.linspace(t_start, 0, num_steps + 1)).astype(int).tolist()
    if any(a <= b for a, b in zip(ts, ts[1:])):
        raise ValueError(f"cannot fit {num_steps} distinct steps below t={t_start}")
    return ts


def run_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for proposal noise and for the denoiser."""
    prop_ss, den_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(prop_ss), np.random.default_rng(den_ss)


def init_proposals(
    exemplars: Sequence[BBox],
    cfg: SamplerConfig,
    sched: Schedule,
    rng: np.random.Generator,
) -> ProposalSet:
    total = cfg.num_proposals(len(exemplars))
    if total == 0:
        raise ValueError("empty proposal set: n + N*.n_star must be positive")
    if cfg.tau > sched.T:
        raise ValueError(f"tau={cfg.tau} exceeds schedule length {sched.T}")

    coords = [rng.standard_normal((cfg.n, 4))]
    prov = [np.full(cfg.n, RANDOM, dtype=int)]
    for k, ex in enumerate(exemplars):
        x0 = unit_to_signal(ex.as_array(), cfg.signal_scale)
        eps = rng.standard_normal((cfg.n_star, 4))
        coords.append(q_sample(np.broadcast_to(x0, (cfg.n_star, 4)), cfg.tau, eps, sched))
        prov.append(np.full(cfg.n_star, k, dtype=int))
    return ProposalSet(np.concatenate(coords), np.concatenate(prov), cfg.t_start)


def ddim_step(x_t: ProposalSet, x0_hat: np.ndarray, t: int, t_prev: int, sched: Schedule) -> ProposalSet:
    """Deterministic (eta = 0) DDIM update under x0-prediction."""
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be below t={t}")
    x0_hat = np.asarray(x0_hat, dtype=float)
    if x0_hat.shape != x_t.coords.shape:
        raise ValueError(f"x0_hat shape {x0_hat.shape} != proposals {x_t.coords.shape}")
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    if 1.0 - ab_t < 1e-12:
        eps_hat = np.zeros_like(x0_hat)
    else:
        eps_hat = (x_t.coords - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    coords = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
    return ProposalSet(coords, x_t.provenance, t_prev)


def box_renewal(x: ProposalSet, scores: np.ndarray, threshold: float, rng: np.random.Generator) -> ProposalSet:
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (len(x),):
        raise ValueError(f"scores shape {scores.shape} not aligned with {len(x)} proposals")
    low = scores < threshold
    coords = x.coords.copy()
    prov = x.provenance.copy()
    coords[low] = rng.standard_normal((int(low.sum()), 4))
    prov[low] = RANDOM
    return ProposalSet(coords, prov, x.timestep)


def _check_output(out, n: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    try:
        x0_hat, scores = out
        x0_hat = np.asarray(x0_hat, dtype=float)
        scores = np.asarray(scores, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SamplingError(f"malformed denoiser output: {exc}", step) from exc
    if scores.ndim == 1:
        scores = scores[:, None]
    if x0_hat.shape != (n, 4) or scores.ndim != 2 or len(scores) != n or scores.shape[1] < 1:
        raise SamplingError(
            f"denoiser returned shapes {x0_hat.shape}, {scores.shape} for {n} proposals", step
        )
    if not np.all(np.isfinite(x0_hat)):
        raise SamplingError("denoiser returned non-finite boxes", step)
    if np.any(scores < 0) or np.any(scores > 1) or not np.all(np.isfinite(scores)):
        raise SamplingError("denoiser scores outside [0, 1]", step)
    return x0_hat, scores


def sample(
    scene_ctx: Any,
    exemplars: Sequence[BBox],
    denoiser: Denoiser,
    cfg: SamplerConfig,
    sched: Schedule,
    on_step: Callable[[int, ProposalSet], None] | None = None,
) -> list[Detection]:
    """Run one exemplar-diffusion sampling pass.

    Returns at most ``cfg.max_detections`` detections after class-wise NMS,
    ordered by descending score.

    ``on_step(i, proposals)`` is called with the proposal set entering each
    denoiser call.
    """
    if cfg.t_start > sched.T:
        raise ValueError(f"t_start={cfg.t_start} exceeds schedule length {sched.T}")
    prop_rng, den_rng = run_rngs(cfg.seed)
    props = init_proposals(exemplars, cfg, sched, prop_rng)
    step_fn = denoiser.start(scene_ctx, den_rng)

    ladder = timestep_ladder(cfg.t_start, cfg.num_steps)
    pairs = list(zip(ladder[:-1], ladder[1:]))
    scores = None
    for i, (t, t_prev) in enumerate(pairs):
        props = replace(props, timestep=t)
        if on_step is not None:
            on_step(i, props)
        try:
            out = step_fn(props)
        except SamplingError:
            raise
        except Exception as exc:
            raise SamplingError(f"denoiser failed: {exc!r}", i) from exc
        x0_hat, scores = _check_output(out, len(props), i)
        props = ddim_step(props, x0_hat, t, t_prev, sched)
        if i < len(pairs) - 1:
            props = box_renewal(props, scores.max(axis=1), cfg.renew_threshold, prop_rng)

    unit = signal_to_unit(props.coords, cfg.signal_scale)
    labels = scores.argmax(axis=1)
    best = scores.max(axis=1)
    cand = np.arange(len(best))
    if cfg.report_survivors_only:
        cand = cand[best >= cfg.renew_threshold]
    keep = cand[nms(unit[cand], best[cand], labels[cand], cfg.nms_iou, cfg.max_detections)]
    return [
        Detection(
            BBox.from_array(unit[j], labels[j], best[j]),
            int(labels[j]),
            float(best[j]),
            int(props.provenance[j]),
        )
        for j in keep
    ]
