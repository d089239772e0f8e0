"""Variance schedules and the closed-form forward process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import ScaledBox

COSINE_OFFSET = 0.008
BETA_MAX = 0.999
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02


@dataclass(frozen=True, eq=False)
class Schedule:
    """Tables indexed by timestep 0..T; index 0 holds beta=0, alpha_bar=1."""

    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.setflags(write=False)

    def sqrt_alpha_bar(self, t: int) -> float:
        return math.sqrt(self.alpha_bar[t])

    def sqrt_one_minus_alpha_bar(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[t])

    def check_step(self, t: int) -> None:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")


def cosine_alpha_bar(t: np.ndarray, T: int, s: float = COSINE_OFFSET) -> np.ndarray:
    f = np.cos(((np.asarray(t, dtype=float) / T) + s) / (1 + s) * math.pi / 2) ** 2
    f0 = math.cos(s / (1 + s) * math.pi / 2) ** 2
    return f / f0


def build_schedule(kind: str = "cosine", T: int = 1000) -> Schedule:
    if int(T) != T or T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    T = int(T)
    if kind == "cosine":
        ab = cosine_alpha_bar(np.arange(T + 1), T)
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, BETA_MAX)
    elif kind == "linear":
        betas = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T, dtype=float)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    # sequential product so that alpha_bar[t] == alpha_bar[t-1] * alpha[t] bit for bit
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    return Schedule(kind=kind, T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: Schedule) -> np.ndarray:
    """Array form of :func:`forward_diffuse`; broadcasts over leading axes."""
    sched.check_step(t)
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    return sched.sqrt_alpha_bar(t) * x0 + sched.sqrt_one_minus_alpha_bar(t) * eps


def forward_diffuse(x0: ScaledBox, t: int, eps, sched: Schedule) -> ScaledBox:
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (4,):
        raise ValueError(f"eps must be a 4-vector, got shape {eps.shape}")
    xt = q_sample(np.asarray(x0.coords), t, eps, sched)
    return ScaledBox(tuple(float(v) for v in xt), x0.exemplar)
