import json

import numpy as np
import pytest

from stableflow import autodiff as ad
from stableflow.errors import (
    ConditioningError,
    DegenerateDensityError,
    DimensionError,
    ValidationError,
)
from stableflow.flow import ConditionedFlow
from stableflow.latent import LimitCycleLatent, LinearAttractor
from stableflow.policy import (
    ContextDynamics,
    Rollout,
    StablePolicyModel,
    Standardization,
)


def identity_model(dim=2, cdim=1, sigma=0.3, dt=0.05, alpha=1.0):
    flow = ConditionedFlow.build(dim, cdim, rng=np.random.default_rng(0))
    latent = LinearAttractor(dim=dim, alpha=alpha, sigma=sigma, dt=dt)
    return StablePolicyModel(flow, latent, Standardization.identity(dim, cdim))


def random_model(dim=2, cdim=1, sigma=0.3, seed=3, scale=0.3, latent=None):
    flow = ConditionedFlow.build(dim, cdim, n_layers=4, hidden=(16, 16),
                                 rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for p in flow.parameters():
        p.value = rng.normal(scale=scale, size=p.value.shape)
    if latent is None:
        latent = LinearAttractor(dim=dim, alpha=1.0, sigma=sigma, dt=0.05)
    std = Standardization(
        y_shift=rng.normal(size=dim), y_scale=rng.uniform(0.5, 2.0, size=dim),
        c_shift=np.zeros(cdim), c_scale=np.ones(cdim))
    return StablePolicyModel(flow, latent, std)


CTX = np.array([0.4])


class TestStep:
    def test_identity_flow_reduces_to_latent_euler(self):
        m = identity_model(sigma=0.0)
        y = m.step(np.array([1.0, 2.0]), CTX, np.random.default_rng(0))
        assert np.allclose(y, np.array([1.0, 2.0]) * (1 - 0.05))

    def test_deterministic_given_seed(self):
        m = random_model()
        a = m.step(np.array([0.3, -1.0]), CTX, np.random.default_rng(42))
        b = m.step(np.array([0.3, -1.0]), CTX, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_repeated_stepping_converges(self):
        m = random_model(seed=9)
        y = np.array([10.0, -10.0]) / np.sqrt(2)
        rng = np.random.default_rng(0)
        for k in range(2000):
            y = m.step(y, CTX, rng, deterministic=True)
            if ad.value_of(m.attractor_distance(y, CTX)) < 1e-2:
                break
        assert ad.value_of(m.attractor_distance(y, CTX)) < 1e-2

    def test_dim_checks(self):
        m = identity_model()
        with pytest.raises(DimensionError):
            m.step(np.zeros(3), CTX, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            m.step(np.zeros(2), np.zeros(2), np.random.default_rng(0))


class TestLogCondDensity:
    def test_identity_flow_equals_latent(self):
        m = identity_model()
        yp, yn = np.array([1.0, 0.5]), np.array([0.9, 0.4])
        lhs = ad.value_of(m.log_cond_density(yp, yn, CTX))
        rhs = ad.value_of(m.latent.log_transition(yp, yn))
        assert abs(lhs - rhs) < 1e-12

    def test_two_term_composition(self):
        # oracle: latent term at mapped points minus forward log-det
        m = random_model(seed=5)
        yp, yn = np.array([0.6, -0.2]), np.array([0.5, -0.1])
        zp, _ = m.to_latent(yp, CTX)
        zn, ld_inv = m.to_latent(yn, CTX)
        expected = (ad.value_of(m.latent.log_transition(zp, zn)) + ad.value_of(ld_inv)
                    - m.standardization.log_det_correction)
        got = ad.value_of(m.log_cond_density(yp, yn, CTX))
        assert abs(got - expected) < 1e-12

    def test_quadrature_normalization_2d(self):
        # integrate the step density over a grid around the mode
        m = random_model(seed=7, scale=0.2)
        yp = np.array([0.8, -0.5])
        zp, _ = m.to_latent(yp, CTX)
        tr = m.latent.transition(ad.value_of(zp))
        mode_y = m.to_observation(ad.value_of(tr.mean), CTX)
        sd = np.sqrt(np.max(ad.value_of(tr.var)))
        half = 14 * sd * np.max(m.standardization.y_scale) * 3
        n = 241
        xs = np.linspace(mode_y[0] - half, mode_y[0] + half, n)
        ys = np.linspace(mode_y[1] - half, mode_y[1] + half, n)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        grid = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        yp_b = np.broadcast_to(yp, grid.shape)
        c_b = np.broadcast_to(CTX, (len(grid), 1))
        logp = ad.value_of(m.log_cond_density(yp_b, grid, c_b)).reshape(n, n)
        mass = np.trapezoid(np.trapezoid(np.exp(logp), ys, axis=1), xs)
        assert abs(mass - 1.0) < 2e-2

    def test_degenerate_on_attractor(self):
        m = identity_model()
        with pytest.raises(DegenerateDensityError):
            m.log_cond_density(np.zeros(2), np.zeros(2), CTX)


class TestRollout:
    def test_single_step_lengths(self):
        m = identity_model()
        r = m.rollout(np.ones(2), ContextDynamics("constant"), 1,
                      np.random.default_rng(0), context0=CTX)
        assert len(r.states) == 2 and len(r.contexts) == 2 and len(r.latents) == 2
        assert len(r.log_densities) == 1

    def test_perturbation_is_additive(self):
        m = random_model(seed=11)
        disp = np.array([0.7, -0.3])
        kw = dict(context_dyn=ContextDynamics("constant"), n_steps=6, context0=CTX,
                  deterministic=True)
        base = m.rollout(np.ones(2), rng=np.random.default_rng(1), **kw)
        bumped = m.rollout(np.ones(2), rng=np.random.default_rng(1),
                           perturbations=[(3, disp)], **kw)
        assert np.allclose(bumped.states[3] - base.states[3], disp)
        assert np.allclose(bumped.states[:3], base.states[:3])

    def test_latent_trace_consistency(self):
        m = random_model(seed=13)
        r = m.rollout(np.array([2.0, -1.0]), ContextDynamics("constant"), 20,
                      np.random.default_rng(3), context0=CTX)
        for k in range(len(r.states)):
            y_back = m.to_observation(r.latents[k], r.contexts[k])
            assert np.max(np.abs(y_back - r.states[k])) < 1e-8

    def test_perturbation_recovery(self):
        m = random_model(seed=17)
        disp = np.array([4.0, 4.0])
        r = m.rollout(np.array([0.5, 0.5]), ContextDynamics("constant"), 300,
                      np.random.default_rng(1), perturbations=[(50, disp)],
                      context0=CTX, deterministic=True)
        d = [float(ad.value_of(m.attractor_distance(s, c)))
             for s, c in zip(r.states, r.contexts)]
        assert d[-1] < d[50]

    def test_log_densities_none_when_deterministic(self):
        m = identity_model()
        r = m.rollout(np.ones(2), ContextDynamics("constant"), 3,
                      np.random.default_rng(0), context0=CTX, deterministic=True)
        assert r.log_densities == [None, None, None]

    def test_exponential_context_approach(self):
        m = identity_model(cdim=2)
        dyn = ContextDynamics("exponential-approach", target=np.array([1.0, -1.0]), rate=2.0)
        r = m.rollout(np.ones(2), dyn, 200, np.random.default_rng(0),
                      context0=np.array([0.0, 0.0]), deterministic=True)
        gaps = np.linalg.norm(r.contexts - np.array([1.0, -1.0]), axis=1)
        assert np.all(np.diff(gaps) <= 1e-12)
        assert gaps[-1] < 1e-6

    def test_json_roundtrip(self, tmp_path):
        m = random_model(seed=19)
        r = m.rollout(np.ones(2), ContextDynamics("constant"), 5,
                      np.random.default_rng(2), perturbations=[(2, np.array([0.1, 0.0]))],
                      context0=CTX)
        path = tmp_path / "rollout.json"
        r.save(path)
        loaded = Rollout.from_json(json.loads(path.read_text()))
        assert np.array_equal(loaded.states, r.states)
        assert np.array_equal(loaded.contexts, r.contexts)
        assert loaded.log_densities == pytest.approx(r.log_densities)


class TestPullbackV:
    def test_zero_on_attractor_image(self):
        m = random_model(seed=23)
        y_star = m.to_observation(np.zeros(2), CTX)
        assert abs(ad.value_of(m.pullback_V(y_star, CTX))) < 1e-18

    def test_identity_flow_equals_latent_U(self):
        m = identity_model()
        y = np.array([1.2, -0.7])
        assert abs(ad.value_of(m.pullback_V(y, CTX)) - m.latent.lyapunov(y)) < 1e-15

    def test_zero_set_iff_attractor(self):
        m = random_model(seed=29)
        rng = np.random.default_rng(0)
        for _ in range(50):
            y = rng.normal(size=2) * 3
            v = float(ad.value_of(m.pullback_V(y, CTX)))
            dist = float(ad.value_of(m.attractor_distance(y, CTX)))
            assert (v < 1e-9) == (dist < 1e-4) or v >= 1e-9

    def test_monotone_decrease_noise_free(self):
        m = random_model(seed=31)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            y = rng.normal(size=2) * 5
            r = m.rollout(y, ContextDynamics("constant"), 150, rng,
                          context0=CTX, deterministic=True)
            v = np.array([float(ad.value_of(m.pullback_V(s, c)))
                          for s, c in zip(r.states, r.contexts)])
            active = v[:-1] > 1e-12
            assert np.all(v[1:][active] < v[:-1][active] + 1e-12)


class TestGeneratorIdentity:
    def test_identity_flow_tight(self):
        m = identity_model(sigma=0.4)
        lv, lu, diff = m.verify_generator_identity(np.array([0.9, -0.6]), CTX, h=1e-4)
        assert diff < 1e-5

    def test_random_flow_100_points(self):
        m = random_model(seed=37, scale=0.3)
        rng = np.random.default_rng(5)
        diffs = []
        for _ in range(100):
            y = rng.normal(size=2) * 1.5 + m.standardization.y_shift
            _, _, diff = m.verify_generator_identity(y, CTX, h=1e-4)
            diffs.append(diff)
        assert max(diffs) < 1e-3

    def test_negative_off_attractor(self):
        m = random_model(seed=41, scale=0.3)
        rng = np.random.default_rng(6)
        for _ in range(50):
            y = rng.normal(size=2) * 2 + m.standardization.y_shift
            lv, lu, _ = m.verify_generator_identity(y, CTX, h=1e-4)
            if float(ad.value_of(m.attractor_distance(y, CTX))) > 1e-6:
                assert lv < 0 and lu < 0

    def test_h_refinement_decays(self):
        m = random_model(seed=43, scale=0.35)
        y = np.array([1.3, 0.4]) + m.standardization.y_shift
        errs = [m.verify_generator_identity(y, CTX, h=h)[2]
                for h in (1e-3, 5e-4, 2.5e-4)]
        floor = 1e-9
        assert errs[1] <= 0.75 * errs[0] + floor
        assert errs[2] <= 0.75 * errs[1] + floor

    def test_limit_cycle_latent(self):
        latent = LimitCycleLatent(dim=2, r_star=1.0, beta=2.0, omega=1.5,
                                  sigma=0.3, dt=0.05)
        m = random_model(seed=47, scale=0.25, latent=latent)
        rng = np.random.default_rng(7)
        for _ in range(30):
            y = rng.normal(size=2) * 1.5 + m.standardization.y_shift
            _, _, diff = m.verify_generator_identity(y, CTX, h=1e-4)
            assert diff < 1e-3

    def test_conditioning_error_on_corrupt_weights(self):
        m = random_model(seed=53)
        for p in m.flow.parameters():
            p.value = np.full_like(p.value, 1e6)
        with pytest.raises(ConditioningError):
            m.verify_generator_identity(np.array([0.5, 0.5]), CTX, h=1e-4)


class TestVerifyConvergence:
    def test_identity_flow_full_convergence(self):
        m = identity_model(sigma=0.0)
        rep = m.verify_convergence(100, 10.0, 500, 1e-2,
                                   np.random.default_rng(0), context=CTX,
                                   deterministic=True)
        assert rep["fraction_converged"] == 1.0

    def test_zero_steps_counts_initial(self):
        m = identity_model()
        rep = m.verify_convergence(200, 5.0, 0, 2.0, np.random.default_rng(1),
                                   context=CTX, deterministic=True)
        frac = rep["fraction_converged"]
        assert 0.0 < frac < 1.0  # exactly the starts already inside tol

    def test_noisy_convergence(self):
        m = random_model(seed=59, scale=0.2)
        rep = m.verify_convergence(100, 20.0, 3000, 1e-2,
                                   np.random.default_rng(2), context=CTX)
        assert rep["fraction_converged"] >= 0.99


class TestContextDynamics:
    def test_validation(self):
        with pytest.raises(ValidationError):
            ContextDynamics("warp")
        with pytest.raises(ValidationError):
            ContextDynamics("exponential-approach")
        with pytest.raises(ValidationError):
            ContextDynamics("exponential-approach", target=np.zeros(1), rate=0.0)


class TestCheckpoint:
    def test_save_load_roundtrip(self, tmp_path):
        m = random_model(seed=61)
        path = tmp_path / "model.json"
        m.save(path)
        loaded = StablePolicyModel.load(path)
        y, c = np.array([0.4, -0.9]), CTX
        a = m.step(y, c, np.random.default_rng(3))
        b = loaded.step(y, c, np.random.default_rng(3))
        assert np.array_equal(a, b)
        assert ad.value_of(m.log_cond_density(y, a, c)) == ad.value_of(
            loaded.log_cond_density(y, a, c))


class TestKdeSmokeCheck:
    def test_density_matches_empirical_kde(self):
        # exact step density vs kernel estimate over many sampled steps (d=2)
        m = random_model(seed=67, scale=0.2)
        yp = np.array([0.7, -0.4])
        n = 1_000_000
        rng = np.random.default_rng(11)
        samples = np.empty((n, 2))
        chunk = 100_000
        yb = np.broadcast_to(yp, (chunk, 2))
        cb = np.broadcast_to(CTX, (chunk, 1))
        for lo in range(0, n, chunk):
            samples[lo:lo + chunk] = m.step(yb, cb, rng)
        probe = samples.mean(axis=0)
        bw = 0.25 * samples.std(axis=0).mean()
        kern = np.exp(-0.5 * np.sum((samples - probe) ** 2, axis=1) / bw ** 2)
        kde = kern.mean() / (2 * np.pi * bw ** 2)
        exact = np.exp(float(ad.value_of(m.log_cond_density(yp, probe, CTX))))
        assert abs(kde - exact) / exact < 0.15
