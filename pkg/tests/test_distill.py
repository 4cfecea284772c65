from dataclasses import replace

import numpy as np
import pytest

from jsdlab.analysis import correlation_report, mode_coverage
from jsdlab.diffusion import MixtureOracle, PointMassOracle
from jsdlab.distill import (
    DistillConfig,
    DistillationAborted,
    Particle,
    TrajectoryRecord,
    inflated_hull_contains,
    jsd_step,
    jsd_terms,
    minority_sample,
    recompute_gradient,
    run_distillation,
    run_seeds,
    sds_step,
    sds_terms,
)
from jsdlab.schedule import diffuse

BROKEN_PREMISE = (
    "a well-trained predictor correlates with the injected noise and 10 Adam steps at "
    "lr 0.03 cannot leave the start's basin; see the project notes"
)


class Echo:
    """Stub predictor returning fixed conditional / unconditional outputs."""

    def __init__(self, cond, uncond=None):
        self.cond = np.asarray(cond, dtype=np.float64)
        self.uncond = self.cond if uncond is None else np.asarray(uncond, dtype=np.float64)

    def predict_noise(self, x_t, t, label=None):
        out = self.uncond if label is None else self.cond
        return np.broadcast_to(out, np.shape(x_t)).copy()


def sds_cfg(**kw):
    return DistillConfig(method="sds", **kw)


def test_echoed_noise_gives_zero_gradient(sched):
    eps = np.array([0.7, -1.1])
    terms = sds_terms(np.array([1.0, 1.0]), 300, eps, Echo(eps), sched, sds_cfg(), 4)
    assert np.all(terms.gradient == 0)


def test_sds_step_holds_theta_under_perfect_score(sched):
    rng = np.random.default_rng(0)
    probe = np.random.default_rng(0)
    p = Particle.at((1.0, 1.0))
    for _ in range(5):
        probe.integers(20, 981)
        eps = probe.standard_normal(2)
        grad, _ = sds_step(p, Echo(eps), sched, sds_cfg(), rng, label=4)
        assert np.all(grad == 0)
    np.testing.assert_array_equal(p.theta, [1.0, 1.0])


def test_sds_hand_fed_formula(sched):
    eps = np.array([0.25, -0.5])
    cond, uncond = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    t = sds_terms(np.zeros(2), 100, eps, Echo(cond, uncond), sched, sds_cfg(guidance_scale=1.0), 0)
    np.testing.assert_array_equal(t.gradient, cond - eps)
    t2 = sds_terms(np.zeros(2), 100, eps, Echo(cond, uncond), sched, sds_cfg(guidance_scale=3.0), 0)
    np.testing.assert_allclose(t2.gradient, uncond + 3 * (cond - uncond) - eps, atol=1e-15)
    t3 = sds_terms(np.zeros(2), 100, eps, Echo(cond, uncond), sched, sds_cfg(weighting="snr"), 0)
    np.testing.assert_allclose(t3.gradient, sched.sigma_t[100] ** 2 * (cond - eps), atol=1e-15)


def test_point_mass_oracle_sds_gradient_vanishes(sched):
    theta = np.array([0.3, -0.2])
    rng = np.random.default_rng(1)
    for t in (20, 300, 980):
        terms = sds_terms(theta, t, rng.normal(size=2), PointMassOracle(theta, sched), sched, sds_cfg(), 0)
        assert np.max(np.abs(terms.gradient)) <= 1e-10


def test_sds_fixed_point_at_mixture_center(sched, mixture):
    """Mean SDS gradient under the exact mixture score is zero at a center."""
    oracle = MixtureOracle(mixture, sched)
    rng = np.random.default_rng(2)
    for k in (0, 5):
        theta = np.tile(mixture.centers[k], (400, 1))
        eps = rng.normal(size=(200, 2))
        eps = np.vstack([eps, -eps])
        for t in (20, 50):
            g = sds_terms(theta, np.full(400, t), eps, oracle, sched, sds_cfg(), k).gradient
            assert np.linalg.norm(g.mean(axis=0)) <= 1e-3


def test_minority_sample_with_point_mass_oracle(sched):
    theta = np.array([0.6, 0.8])
    oracle = PointMassOracle(theta, sched)
    fresh = np.array([0.3, -1.4])
    ms = minority_sample(oracle, sched, theta, 400, 2, DistillConfig(), eps_fresh=fresh)
    np.testing.assert_allclose(ms.x_bar_0, theta, atol=1e-10)
    np.testing.assert_allclose(ms.x_bar_t, sched.alpha_t[400] * theta + sched.sigma_t[400] * fresh, atol=1e-10)


def test_minority_sample_zero_fresh_noise(model, sched):
    ms = minority_sample(model, sched, np.array([1.0, 1.0]), 500, 4, DistillConfig(), eps_fresh=np.zeros(2))
    np.testing.assert_array_equal(ms.x_bar_t, sched.alpha_t[500] * ms.x_bar_0)


def test_minority_sample_mean_concentrates(model, sched):
    t, n = 500, 500
    theta = np.tile([1.0, 1.0], (n, 1))
    ms = minority_sample(model, sched, theta, np.full(n, t), 4, DistillConfig(), rng=np.random.default_rng(3))
    assert np.allclose(ms.x_bar_0, ms.x_bar_0[0])
    err = np.abs(ms.x_bar_t.mean(axis=0) - sched.alpha_t[t] * ms.x_bar_0[0])
    assert np.all(err <= 3 * sched.sigma_t[t] / np.sqrt(n))


def test_jsd_gradient_zero_when_companion_coincides(sched):
    theta = np.array([0.6, 0.8])
    oracle = PointMassOracle(theta, sched)
    e0 = oracle.predict_noise(theta, 0)
    terms = jsd_terms(theta, 300, e0, oracle, sched, DistillConfig(), 2)
    np.testing.assert_allclose(terms.x_bar_t, terms.x_hat_t, atol=1e-12)
    assert np.max(np.abs(terms.gradient)) <= 1e-10


def test_jsd_hand_fed_formula(model, sched):
    cfg = DistillConfig(ratio_weight=False)
    theta = np.array([1.0, 1.0])
    terms = jsd_terms(theta, 400, np.array([0.2, -0.3]), model, sched, cfg, 4)
    ref = model.predict_noise(terms.x_hat_t, 400, 4) - model.predict_noise(terms.x_bar_t, 400, 4)
    np.testing.assert_array_equal(terms.gradient, ref)
    on = jsd_terms(theta, 400, np.array([0.2, -0.3]), model, sched, DistillConfig(), 4)
    np.testing.assert_allclose(on.gradient, sched.alpha_t[400] / sched.sigma_t[400] * ref, rtol=1e-15)


def test_jsd_fresh_noise_variance_bound(model, sched, mixture):
    # checked at modes: away from them the mean gradient is the descent signal itself
    n = 200
    for k in (0, 4):
        theta = np.tile(mixture.centers[k], (n, 1))
        for t in (100, 500, 900):
            eps = np.random.default_rng(t).normal(size=(n, 2))
            g = jsd_terms(theta, np.full(n, t), eps, model, sched, DistillConfig(), k).gradient
            assert np.linalg.norm(g.mean(axis=0)) <= np.sqrt(np.trace(np.cov(g.T)))


def test_jsd_step_updates_particle(model, sched):
    p = Particle.at((1.0, 1.0))
    grad, terms = jsd_step(p, model, sched, DistillConfig(), np.random.default_rng(0))
    assert grad.shape == (2,) and terms.x_bar_t is not None
    assert not np.array_equal(p.theta, [1.0, 1.0])


@pytest.mark.parametrize("method", ["sds", "jsd"])
def test_terminal_stays_near_the_data(model, sched, mixture, method):
    for start in [(1, 1), (-1, 1), (1, -1), (-1, -1)]:
        for rec in run_seeds(DistillConfig(method=method), model, sched, start, range(10)):
            assert inflated_hull_contains(rec.terminal, mixture.centers)


def test_inflated_hull(mixture):
    assert inflated_hull_contains((0, 0), mixture.centers)
    assert inflated_hull_contains((1.3, 0), mixture.centers)
    assert not inflated_hull_contains((2.0, 0), mixture.centers)


def test_config_validation(sched):
    with pytest.raises(ValueError):
        DistillConfig(steps=0).validate(sched.T)
    with pytest.raises(ValueError):
        DistillConfig(t_min=500, t_max=400).validate(sched.T)
    with pytest.raises(ValueError):
        DistillConfig(method="vsd").validate(sched.T)
    with pytest.raises(ValueError):
        DistillConfig(lr=0).validate(sched.T)


def test_record_shapes(model, sched):
    rec = run_distillation(DistillConfig(steps=1), model, sched, (1.0, 1.0))
    assert len(rec) == 1 and rec.eps_main.shape == (1, 2)
    rec = run_distillation(DistillConfig(method="sds"), model, sched, (1.0, 1.0))
    assert len(rec) == 10 and rec.label == 4 and rec.x_bar_t is None
    np.testing.assert_array_equal(rec.theta_before[1:], rec.theta_after[:-1])
    assert rec.filename() == "sds_start_1_1_seed_00000.jsonl"


@pytest.fixture(scope="module")
def corpus(model, sched):
    out = []
    for method in ("sds", "jsd"):
        out += run_seeds(DistillConfig(method=method), model, sched, (1.0, 1.0), range(30))
    return out


def test_recorded_gradients_reproduce(corpus):
    for rec in corpus:
        np.testing.assert_array_equal(recompute_gradient(rec), rec.gradient)


def test_jsonl_round_trip(corpus):
    for rec in corpus[:3] + corpus[-3:]:
        back = TrajectoryRecord.from_jsonl(rec.to_jsonl())
        for name in ("theta_after", "eps_main", "control_variate", "gradient", "t"):
            np.testing.assert_array_equal(getattr(back, name), getattr(rec, name))
        assert back.terminal_mode == rec.terminal_mode and back.config == rec.config
        np.testing.assert_array_equal(recompute_gradient(back), back.gradient)
    with pytest.raises(ValueError):
        TrajectoryRecord.from_jsonl(rec.to_jsonl().replace('"schema_version": 1', '"schema_version": 2'))


def test_distillation_deterministic(model, sched, corpus):
    again = run_seeds(DistillConfig(method="jsd"), model, sched, (1.0, 1.0), range(30))
    for a, b in zip(corpus[30:], again):
        np.testing.assert_array_equal(a.theta_after, b.theta_after)
        np.testing.assert_array_equal(a.control_variate, b.control_variate)
    single = run_distillation(replace(DistillConfig(), seed=7), model, sched, (1.0, 1.0))
    np.testing.assert_array_equal(single.theta_after, corpus[37].theta_after)


def test_results_independent_of_workers(model, sched):
    cfg = DistillConfig(method="jsd")
    a = run_seeds(cfg, model, sched, (-1.0, 1.0), range(60), workers=1)
    b = run_seeds(cfg, model, sched, (-1.0, 1.0), range(60), workers=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.theta_after, y.theta_after)


def test_matched_seeds_share_timesteps(corpus):
    for s in range(30):
        np.testing.assert_array_equal(corpus[s].t, corpus[30 + s].t)


def test_non_finite_gradient_aborts(sched):
    with pytest.raises(DistillationAborted) as info:
        run_distillation(DistillConfig(method="sds"), Echo([np.nan, 0.0]), sched, (1.0, 1.0))
    assert info.value.partial == []


@pytest.mark.xfail(strict=True, reason=BROKEN_PREMISE)
def test_jsd_correlation_exceeds_sds(corpus):
    rep = correlation_report(corpus)
    assert rep.mean("jsd") > rep.mean("sds")


@pytest.mark.xfail(strict=True, reason=BROKEN_PREMISE)
def test_sds_correlation_near_zero(corpus):
    assert abs(correlation_report(corpus).mean("sds")) <= 0.3


@pytest.mark.xfail(strict=True, reason=BROKEN_PREMISE)
def test_jsd_covers_more_modes(model, sched):
    cov = {}
    for m in ("sds", "jsd"):
        cov[m] = mode_coverage(run_seeds(DistillConfig(method=m), model, sched, (1.0, 1.0), range(100)))
    assert cov["jsd"].distinct_mode_count > cov["sds"].distinct_mode_count
