import math
from dataclasses import replace

import numpy as np
import pytest

from exemplar_diffusion.geometry import RANDOM, BBox, nms, signal_to_unit, unit_to_signal
from exemplar_diffusion.sampler import (
    Detection,
    ProposalSet,
    SamplerConfig,
    SamplingError,
    box_renewal,
    ddim_step,
    init_proposals,
    sample,
    timestep_ladder,
)
from exemplar_diffusion.synthworld import OracleDenoiser, make_dataset

EX = BBox(0.4, 0.6, 0.1, 0.2)


class FixedDenoiser:
    """Predicts fixed boxes with fixed scores, ignoring its input."""

    def __init__(self, x0, scores):
        self.x0, self.scores = np.asarray(x0, float), np.asarray(scores, float)

    def start(self, scene, rng):
        def step(props):
            reps = len(props) // len(self.x0) + 1
            return np.tile(self.x0, (reps, 1))[: len(props)], np.tile(self.scores, (reps, 1))[: len(props)]
        return step


class IdentityDenoiser:
    """Perfect denoiser for a proposal set that is already clean."""

    def start(self, scene, rng):
        return lambda props: (props.coords.copy(), np.ones((len(props), 1)))


def test_ladder_ten_steps():
    assert timestep_ladder(1000, 10) == [1000, 900, 800, 700, 600, 500, 400, 300, 200, 100, 0]


def test_config_defaults_and_validation():
    cfg = SamplerConfig()
    assert (cfg.n, cfg.n_star, cfg.tau, cfg.num_steps, cfg.t_start) == (300, 200, 10, 10, 1000)
    with pytest.raises(ValueError):
        SamplerConfig(tau=1001)
    with pytest.raises(ValueError):
        SamplerConfig(n=-1)
    with pytest.raises(ValueError):
        SamplerConfig(num_steps=0)
    assert SamplerConfig.from_dict(cfg.to_dict()) == cfg


def test_init_no_exemplars(cosine):
    p = init_proposals([], SamplerConfig(), cosine, np.random.default_rng(0))
    assert len(p) == 300 and not p.exemplar_mask.any()
    assert abs(p.coords.mean()) < 0.1 and abs(p.coords.std() - 1) < 0.1


def test_init_one_exemplar_layout(cosine):
    p = init_proposals([EX], SamplerConfig(), cosine, np.random.default_rng(0))
    assert len(p) == 500
    assert (p.provenance[:300] == RANDOM).all() and (p.provenance[300:] == 0).all()


def test_init_empty_rejected(cosine):
    with pytest.raises(ValueError):
        init_proposals([], SamplerConfig(n=0), cosine, np.random.default_rng(0))


def test_init_tau_zero_exact(cosine):
    cfg = SamplerConfig(tau=0, n=5, n_star=7)
    p = init_proposals([EX, BBox(0.1, 0.1, 0.05, 0.05)], cfg, cosine, np.random.default_rng(1))
    assert np.array_equal(p.coords[5:12], np.tile(unit_to_signal(EX.as_array()), (7, 1)))


def test_ddim_t_prev_zero_returns_x0(cosine):
    rng = np.random.default_rng(2)
    x = ProposalSet(rng.standard_normal((9, 4)), np.full(9, RANDOM), 300)
    x0 = rng.standard_normal((9, 4))
    out = ddim_step(x, x0, 300, 0, cosine)
    assert np.array_equal(out.coords, x0)


def test_ddim_matches_scalar_oracle(cosine):
    rng = np.random.default_rng(3)
    x = ProposalSet(rng.standard_normal((4, 4)), np.arange(4), 700)
    x0 = rng.standard_normal((4, 4))
    out = ddim_step(x, x0, 700, 600, cosine)
    ab_t, ab_p = float(cosine.alpha_bar[700]), float(cosine.alpha_bar[600])
    for i in range(4):
        for k in range(4):
            eps = (x.coords[i, k] - math.sqrt(ab_t) * x0[i, k]) / math.sqrt(1 - ab_t)
            ref = math.sqrt(ab_p) * x0[i, k] + math.sqrt(1 - ab_p) * eps
            assert out.coords[i, k] == pytest.approx(ref, abs=1e-13)
    assert np.array_equal(out.provenance, x.provenance)


def test_ddim_rejects_bad_order(cosine):
    x = ProposalSet(np.zeros((1, 4)), np.array([RANDOM]), 10)
    with pytest.raises(ValueError):
        ddim_step(x, np.zeros((1, 4)), 10, 10, cosine)


def test_ddim_fixed_point_noiseless_exemplar(cosine):
    cfg = SamplerConfig(n=0, n_star=4, tau=0, num_steps=10)
    x = init_proposals([EX], cfg, cosine, np.random.default_rng(0))
    start = x.coords.copy()
    for t, tp in zip(timestep_ladder(1000, 10), timestep_ladder(1000, 10)[1:]):
        x = ddim_step(replace(x, timestep=t), start, t, tp, cosine)
        # eps_hat = (x_t - sqrt(ab) x0)/sqrt(1-ab) stays ~0 only once x_t = x0
    assert np.allclose(x.coords, start, atol=1e-12)


def test_renewal_noop_when_all_confident():
    x = ProposalSet(np.arange(8.0).reshape(2, 4), np.array([0, RANDOM]), 5)
    out = box_renewal(x, np.array([0.5, 0.9]), 0.5, np.random.default_rng(0))
    assert np.array_equal(out.coords, x.coords) and np.array_equal(out.provenance, x.provenance)


def test_renewal_total():
    x = ProposalSet(np.ones((50, 4)), np.zeros(50, int), 5)
    out = box_renewal(x, np.zeros(50), 0.5, np.random.default_rng(0))
    assert (out.provenance == RANDOM).all() and len(out) == 50
    assert not np.any(out.coords == 1.0)


def test_renewal_mixed():
    x = ProposalSet(np.ones((2, 4)), np.array([0, 0]), 5)
    out = box_renewal(x, np.array([0.9, 0.1]), 0.5, np.random.default_rng(0))
    assert np.array_equal(out.coords[0], np.ones(4)) and out.provenance[0] == 0
    assert not np.array_equal(out.coords[1], np.ones(4)) and out.provenance[1] == RANDOM


def test_single_step_perfect_denoiser(cosine):
    targets = np.array([[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2], [0.71, 0.7, 0.2, 0.2]])
    scores = np.array([[0.9], [0.8], [0.95]])
    den = FixedDenoiser(unit_to_signal(targets), scores)
    cfg = SamplerConfig(n=3, n_star=0, num_steps=1)
    dets = sample(None, [], den, cfg, cosine)
    keep = nms(targets, scores[:, 0], np.zeros(3, int), 0.5)
    assert [d.score for d in dets] == [0.95, 0.9]
    assert np.allclose([d.box.as_array() for d in dets], signal_to_unit(unit_to_signal(targets))[keep])


def test_survivor_filter(cosine):
    den = FixedDenoiser(unit_to_signal(np.array([[0.5, 0.5, 0.1, 0.1]])), np.array([[0.3]]))
    assert sample(None, [], den, SamplerConfig(n=4, num_steps=2), cosine) == []
    cfg = SamplerConfig(n=4, num_steps=2, report_survivors_only=False)
    assert len(sample(None, [], den, cfg, cosine)) == 1


def test_cardinality_and_step_hook(cosine, small_arc):
    seen = []
    cfg = SamplerConfig(n=30, n_star=20, seed=5)
    den = OracleDenoiser(entropy=small_arc.entropy())
    ex = [small_arc.scenes[0].objects[1].box, small_arc.scenes[0].objects[2].box]
    sample(small_arc.scenes[0], ex, den, cfg, cosine, on_step=lambda i, p: seen.append((i, len(p), p.timestep)))
    assert seen == [(i, 70, 1000 - 100 * i) for i in range(10)]


def test_deterministic(cosine, small_arc):
    den = OracleDenoiser(entropy=0.5)
    scene = small_arc.scenes[1]
    a = sample(scene, [scene.objects[0].box], den, SamplerConfig(seed=9), cosine)
    b = sample(scene, [scene.objects[0].box], den, SamplerConfig(seed=9), cosine)
    assert a == b and len(a) > 0


class Exploding:
    def start(self, scene, rng):
        calls = {"n": 0}

        def step(props):
            calls["n"] += 1
            if calls["n"] == 4:
                raise RuntimeError("boom")
            return props.coords, np.ones((len(props), 1))
        return step


def test_denoiser_failure_carries_step(cosine):
    with pytest.raises(SamplingError) as info:
        sample(None, [], Exploding(), SamplerConfig(n=3), cosine)
    assert info.value.step == 3


@pytest.mark.parametrize("bad", [
    lambda p: (p.coords[:-1], np.ones((len(p) - 1, 1))),
    lambda p: (p.coords, np.full((len(p), 1), 1.5)),
    lambda p: (p.coords * np.nan, np.ones((len(p), 1))),
    lambda p: None,
])
def test_malformed_output_rejected(cosine, bad):
    class D:
        def start(self, scene, rng):
            return bad
    with pytest.raises(SamplingError):
        sample(None, [], D(), SamplerConfig(n=3), cosine)


def test_detection_round_trip():
    d = Detection(BBox(0.1, 0.2, 0.3, 0.4, 1, 0.7), 1, 0.7, 0)
    assert Detection.from_dict(d.to_dict()) == d


def test_exemplar_improves_recall_on_structured_scenes(cosine):
    from exemplar_diffusion.experiment import ExperimentConfig, evaluate_runs, run_dataset

    ds = make_dataset("grid_arc", 50, 4, seed=21)
    ar = [
        evaluate_runs(ds, run_dataset(ds, ExperimentConfig(num_exemplars=k, exemplar_seed=4))).ar
        for k in (0, 1)
    ]
    assert ar[1] > ar[0]
