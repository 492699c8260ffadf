import numpy as np
import pytest

from affordkit.affordance import Affordance
from affordkit.sampler import (
    GuidanceConfig,
    KinematicChain,
    NoiseSchedule,
    ScheduleError,
    adaptive_loss,
    cosine_schedule,
    ddim_step,
    estimate_clean,
    forward_kinematics,
    guided_step_loss,
    guided_step_spherical,
    mu_theta,
    read_guidance_log,
    sample,
    sigma_value,
    write_guidance_log,
)


def test_sigma_hand_value():
    assert abs(sigma_value(0.5, 0.9) - 0.29814) < 1e-5


def test_sigma_rejects_non_decreasing():
    with pytest.raises(ScheduleError):
        sigma_value(0.9, 0.9)
    with pytest.raises(ScheduleError):
        sigma_value(0.95, 0.9)


def test_sigma_vanishes_at_clean_end():
    schedule = cosine_schedule()
    assert schedule.sigma(1) == 0.0


def test_cosine_schedule_invariants():
    schedule = cosine_schedule(500, 10)
    assert schedule.alpha_bar[0] == 1.0
    assert np.all(np.diff(schedule.alpha_bar) < 0.0)
    assert schedule.alpha_bar[-1] > 0.0
    np.testing.assert_array_equal(schedule.index_map, np.arange(11) * 50)
    betas = 1.0 - schedule.alpha_bar[1:] / schedule.alpha_bar[:-1]
    assert betas.max() <= 0.999 + 1e-12
    for k in range(1, 11):
        sig = schedule.sigma(k)
        assert sig * sig <= 1.0 - schedule.alpha_bar_at(k - 1) + 1e-12


def test_schedule_validation_errors():
    good = cosine_schedule(100, 5)
    with pytest.raises(ScheduleError):
        NoiseSchedule(good.alpha_bar[:-1], 100, 5)
    bad0 = good.alpha_bar.copy()
    bad0[0] = 0.5
    with pytest.raises(ScheduleError):
        NoiseSchedule(bad0, 100, 5)
    flat = good.alpha_bar.copy()
    flat[50] = flat[49]
    with pytest.raises(ScheduleError):
        NoiseSchedule(flat, 100, 5)
    with pytest.raises(ScheduleError):
        NoiseSchedule(good.alpha_bar, 100, 101)


def test_estimate_clean_identity_at_full_signal():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(estimate_clean(a, rng.standard_normal((4, 3)), 1.0), a)


def test_estimate_clean_inverts_forward_noising():
    rng = np.random.default_rng(1)
    a0 = rng.standard_normal((5, 2))
    eps = rng.standard_normal((5, 2))
    for ab in (0.9, 0.5, 0.05):
        a_k = np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps
        np.testing.assert_allclose(estimate_clean(a_k, eps, ab), a0,
                                   atol=1e-9)


def test_estimate_clean_matches_independent_formula():
    rng = np.random.default_rng(2)
    a_k = rng.standard_normal((3, 4))
    eps = rng.standard_normal((3, 4))
    ab = 0.37
    reference = (a_k - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    np.testing.assert_array_equal(estimate_clean(a_k, eps, ab), reference)
    with pytest.raises(ValueError):
        estimate_clean(a_k, eps, 0.0)


def test_ddim_step_deterministic_matches_analytic_encoding():
    schedule = cosine_schedule(500, 10)
    rng = np.random.default_rng(3)
    a0 = rng.standard_normal((4, 2))
    eps = rng.standard_normal((4, 2))
    for k in range(1, 11):
        ab_k = schedule.alpha_bar_at(k)
        ab_prev = schedule.alpha_bar_at(k - 1)
        a_k = np.sqrt(ab_k) * a0 + np.sqrt(1.0 - ab_k) * eps
        stepped = ddim_step(schedule, k, a_k, eps,
                            np.random.default_rng(0), eta=0.0)
        expected = np.sqrt(ab_prev) * a0 + np.sqrt(1.0 - ab_prev) * eps
        np.testing.assert_allclose(stepped, expected, atol=1e-12)


def test_ddim_chain_recovers_point_mass():
    schedule = cosine_schedule(500, 10)
    target = np.array([[0.3, -0.7], [1.2, 0.1], [0.0, 0.4]])
    rng = np.random.default_rng(4)
    a = rng.standard_normal(target.shape)
    for k in range(10, 0, -1):
        ab = schedule.alpha_bar_at(k)
        eps = (a - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)
        a = ddim_step(schedule, k, a, eps, rng, eta=0.0)
    np.testing.assert_allclose(a, target, atol=1e-6)


def test_ddim_chain_gaussian_statistics():
    # Analytically optimal predictor for standard-Gaussian data; stepping
    # the full schedule must reproduce the data marginal.  (Subsequence
    # stepping trades variance for speed: the per-step noise width is the
    # clean-conditional one, so coarse chains under-disperse.)
    schedule = cosine_schedule(500, 500)
    rng = np.random.default_rng(5)
    a = rng.standard_normal((10000, 1))
    for k in range(500, 0, -1):
        ab = schedule.alpha_bar_at(k)
        eps = np.sqrt(1.0 - ab) * a
        a = ddim_step(schedule, k, a, eps, rng, eta=1.0)
    assert abs(a.mean()) < 0.05
    assert 0.9 < a.var() < 1.1


def test_mu_theta_matches_deterministic_ddim():
    schedule = cosine_schedule(500, 10)
    rng = np.random.default_rng(6)
    for k in (1, 4, 10):
        a_k = rng.standard_normal((3, 3))
        eps = rng.standard_normal((3, 3))
        ab_k = schedule.alpha_bar_at(k)
        ab_prev = schedule.alpha_bar_at(k - 1)
        reference = np.sqrt(ab_prev) * (a_k - np.sqrt(1 - ab_k) * eps) \
            / np.sqrt(ab_k) + np.sqrt(1 - ab_prev) * eps
        np.testing.assert_allclose(mu_theta(schedule, k, a_k, eps, eta=0.0),
                                   reference, atol=1e-9)


def two_link():
    return KinematicChain([0.5, 0.5], ("revolute", "revolute"))


def test_fk_two_link_reference_poses():
    p, _ = forward_kinematics(two_link(), [0.0, 0.0])
    np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-12)
    p, _ = forward_kinematics(two_link(), [np.pi / 2, 0.0])
    np.testing.assert_allclose(p, [0.0, 1.0, 0.0], atol=1e-12)


def test_fk_jacobian_matches_finite_differences():
    chain = KinematicChain([0.4, 0.3, 0.2],
                           ("revolute", "prismatic", "revolute"),
                           base=np.array([0.1, -0.2, 0.05]))
    rng = np.random.default_rng(7)
    for _ in range(10):
        q = rng.uniform(-1.5, 1.5, size=3)
        _, jac = forward_kinematics(chain, q)
        h = 1e-7
        for j in range(3):
            dq = np.zeros(3)
            dq[j] = h
            p_up, _ = forward_kinematics(chain, q + dq)
            p_dn, _ = forward_kinematics(chain, q - dq)
            numeric = (p_up - p_dn) / (2 * h)
            np.testing.assert_allclose(jac[:, j], numeric, atol=1e-6)


def test_fk_contract_errors():
    with pytest.raises(ValueError):
        forward_kinematics(two_link(), [0.0])
    with pytest.raises(ValueError):
        KinematicChain([], ())
    with pytest.raises(ValueError):
        KinematicChain([0.5, -0.1], ("revolute", "revolute"))
    with pytest.raises(ValueError):
        KinematicChain([0.5], ("helical",))


def test_adaptive_loss_zero_outside_threshold():
    chain = two_link()
    a = np.tile([0.0, 0.0, 1.0], (4, 1))  # p_ee at (1, 0, 0)
    loss, grad = adaptive_loss(chain, a, [5.0, 5.0, 5.0], 0.1, False)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, np.zeros_like(a))


def test_adaptive_loss_single_step_distance():
    chain = two_link()
    a = np.array([[0.0, 0.0, 1.0]])
    contact = np.array([1.0, 0.04, 0.0])
    loss, grad = adaptive_loss(chain, a, contact, 0.1, False)
    assert abs(loss - 0.04) < 1e-12
    assert np.linalg.norm(grad) > 0.0


def test_adaptive_loss_mean_over_contributing_steps():
    chain = two_link()
    a = np.array([[0.0, 0.0, 1.0],        # d = 0.03
                  [0.0, 0.0, 1.0],        # d = 0.03
                  [np.pi, 0.0, 1.0]])     # far side, d >> theta
    contact = np.array([1.0, 0.03, 0.0])
    loss, grad = adaptive_loss(chain, a, contact, 0.1, False)
    assert abs(loss - 0.03) < 1e-12
    np.testing.assert_array_equal(grad[2], np.zeros(3))


def test_adaptive_loss_grasped_disables():
    chain = two_link()
    a = np.array([[0.0, 0.0, 0.0]])
    loss, grad = adaptive_loss(chain, a, [1.0, 0.05, 0.0], 0.1, True)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, np.zeros_like(a))


def test_adaptive_loss_gradient_matches_finite_differences():
    chain = two_link()
    rng = np.random.default_rng(8)
    contact = forward_kinematics(chain, [0.4, -0.3])[0] + [0.02, 0.03, 0.0]
    for _ in range(5):
        a = np.hstack([np.tile([0.4, -0.3], (3, 1))
                       + rng.uniform(-0.02, 0.02, (3, 2)),
                       rng.uniform(0, 1, (3, 1))])
        loss, grad = adaptive_loss(chain, a, contact, 0.1, False)
        assert loss > 0.0
        h = 1e-6
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                up = a.copy()
                up[i, j] += h
                dn = a.copy()
                dn[i, j] -= h
                numeric = (adaptive_loss(chain, up, contact, 0.1, False)[0]
                           - adaptive_loss(chain, dn, contact, 0.1,
                                           False)[0]) / (2 * h)
                scale = max(abs(grad[i, j]), abs(numeric), 1e-6)
                assert abs(grad[i, j] - numeric) / scale < 1e-4


def test_guided_step_loss_gamma_zero_is_plain_ddim():
    schedule = cosine_schedule(500, 10)
    rng = np.random.default_rng(9)
    a_k = rng.standard_normal((4, 3))
    eps = rng.standard_normal((4, 3))

    def loss_fn(a0):
        return 1.0, np.ones_like(a0)

    guided, record = guided_step_loss(schedule, 5, a_k, eps, loss_fn, 0.0,
                                      np.random.default_rng(42))
    plain = ddim_step(schedule, 5, a_k, eps, np.random.default_rng(42))
    np.testing.assert_array_equal(guided, plain)
    assert not record["fired"]


def test_guided_step_loss_correction_matches_finite_differences():
    schedule = cosine_schedule(500, 10)
    rng = np.random.default_rng(10)
    a_k = rng.standard_normal((2, 3))
    eps = rng.standard_normal((2, 3))
    y = rng.standard_normal((2, 3))
    gamma = 0.3
    k = 6

    def loss_fn(a0):
        return float(np.sum((a0 - y) ** 2)), 2.0 * (a0 - y)

    guided, record = guided_step_loss(schedule, k, a_k, eps, loss_fn, gamma,
                                      np.random.default_rng(7))
    plain = ddim_step(schedule, k, a_k, eps, np.random.default_rng(7))
    correction = plain - guided
    assert record["fired"]
    ab = schedule.alpha_bar_at(k)
    h = 1e-6
    for i in range(2):
        for j in range(3):
            up = a_k.copy()
            up[i, j] += h
            dn = a_k.copy()
            dn[i, j] -= h
            l_up = loss_fn(estimate_clean(up, eps, ab))[0]
            l_dn = loss_fn(estimate_clean(dn, eps, ab))[0]
            numeric = gamma * (l_up - l_dn) / (2 * h)
            scale = max(abs(correction[i, j]), abs(numeric), 1e-6)
            assert abs(correction[i, j] - numeric) / scale < 1e-4


def test_guided_step_loss_zero_region_is_plain_ddim():
    schedule = cosine_schedule(500, 10)
    rng = np.random.default_rng(11)
    a_k = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))

    def loss_fn(a0):
        return 0.0, np.zeros_like(a0)

    guided, record = guided_step_loss(schedule, 4, a_k, eps, loss_fn, 2.0,
                                      np.random.default_rng(3))
    plain = ddim_step(schedule, 4, a_k, eps, np.random.default_rng(3))
    np.testing.assert_array_equal(guided, plain)
    assert not record["fired"]


def test_guided_step_loss_skips_nan_gradient():
    schedule = cosine_schedule(500, 10)
    rng = np.random.default_rng(12)
    a_k = rng.standard_normal((2, 2))
    eps = rng.standard_normal((2, 2))

    def loss_fn(a0):
        g = np.full_like(a0, np.nan)
        return 1.0, g

    guided, record = guided_step_loss(schedule, 3, a_k, eps, loss_fn, 1.0,
                                      np.random.default_rng(5))
    plain = ddim_step(schedule, 3, a_k, eps, np.random.default_rng(5))
    np.testing.assert_array_equal(guided, plain)
    assert record["skipped"]


def test_spherical_displacement_norm_exact():
    schedule = cosine_schedule(500, 10)
    rng = np.random.default_rng(13)
    for k in (2, 5, 9):
        a_k = rng.standard_normal((4, 3))
        eps = rng.standard_normal((4, 3))

        def loss_fn(a0):
            return 1.0, rng.standard_normal(a0.shape)

        delta_scale = 0.4
        out, record = guided_step_spherical(schedule, k, a_k, eps, loss_fn,
                                            delta_scale,
                                            np.random.default_rng(0),
                                            eta=1.0)
        mu = mu_theta(schedule, k, a_k, eps, eta=1.0)
        expected = np.sqrt(a_k.size) * delta_scale * schedule.sigma(k)
        assert record["fired"]
        assert abs(np.linalg.norm(out - mu) - expected) < 1e-9


def test_spherical_zero_gradient_falls_back():
    schedule = cosine_schedule(500, 10)
    rng = np.random.default_rng(14)
    a_k = rng.standard_normal((3, 3))
    eps = rng.standard_normal((3, 3))

    def loss_fn(a0):
        return 0.0, np.zeros_like(a0)

    out, record = guided_step_spherical(schedule, 6, a_k, eps, loss_fn, 1.0,
                                        np.random.default_rng(2), eta=0.0)
    np.testing.assert_allclose(out, mu_theta(schedule, 6, a_k, eps, eta=0.0),
                               atol=1e-15)
    assert not record["fired"]


def test_guidance_config_validation():
    GuidanceConfig(mode="spherical", theta=0.1)
    with pytest.raises(ValueError):
        GuidanceConfig(mode="warp")
    with pytest.raises(ValueError):
        GuidanceConfig(mode="spherical", theta=0.0)
    with pytest.raises(ValueError):
        GuidanceConfig(mode="loss_guided", gamma=-1.0)


class GaussianPolicy:
    """Optimal predictor for actions ~ N(mean_chunk, spread^2 I)."""

    def __init__(self, schedule, mean_chunk, spread):
        self.schedule = schedule
        self.mean_chunk = mean_chunk
        self.var = spread ** 2
        self.horizon, self.action_dim = mean_chunk.shape
        self.denorm_scale = np.ones(self.action_dim)

    def encode(self, obs, affordance):
        return None

    def predict_eps(self, a, t, cond):
        ab = self.schedule.alpha_bar[t]
        return np.sqrt(1.0 - ab) * (a - np.sqrt(ab) * self.mean_chunk) \
            / (ab * self.var + 1.0 - ab)

    def denormalize(self, a):
        return a


def reach_setup(spread=0.05):
    schedule = cosine_schedule(500, 10)
    chain = two_link()
    q_center = np.array([0.4, -0.3])
    contact = forward_kinematics(chain, q_center)[0]
    q_target = q_center + np.array([0.06, 0.0])
    d_target = np.linalg.norm(forward_kinematics(chain, q_target)[0]
                              - contact)
    assert 0.02 < d_target < 0.1
    mean_chunk = np.tile(np.concatenate([q_target, [1.0]]), (4, 1))
    policy = GaussianPolicy(schedule, mean_chunk, spread)
    trajectory = np.tile(contact, (2, 1)) + [[0, 0, 0], [0.05, 0, 0]]
    affordance = Affordance(contact, trajectory)
    return schedule, chain, policy, affordance, contact


def final_distance(chain, chunk, contact):
    p = forward_kinematics(chain, chunk[-1, :2])[0]
    return np.linalg.norm(p - contact)


def test_sample_deterministic_given_seed():
    schedule, chain, policy, affordance, contact = reach_setup()
    guidance = GuidanceConfig(mode="spherical", delta_scale=0.05)
    a1 = sample(policy, None, affordance, schedule, guidance, seed=3,
                chain=chain)
    a2 = sample(policy, None, affordance, schedule, guidance, seed=3,
                chain=chain)
    np.testing.assert_array_equal(a1, a2)


def test_sample_none_equals_spherical_outside_region():
    schedule, chain, policy, _, _ = reach_setup()
    far = Affordance(np.array([5.0, 5.0, 0.0]),
                     np.array([[5.0, 5.0, 0.0], [5.05, 5.0, 0.0]]))
    log = []
    guided = sample(policy, None, far, schedule,
                    GuidanceConfig(mode="spherical"), seed=11, chain=chain,
                    log=log)
    plain = sample(policy, None, far, schedule, GuidanceConfig(mode="none"),
                   seed=11)
    np.testing.assert_array_equal(guided, plain)
    assert not any(r["fired"] for r in log)


def test_sample_grasped_disables_guidance():
    schedule, chain, policy, affordance, _ = reach_setup()
    log = []
    guided = sample(policy, None, affordance, schedule,
                    GuidanceConfig(mode="spherical"), seed=5, chain=chain,
                    grasped=True, log=log)
    plain = sample(policy, None, affordance, schedule,
                   GuidanceConfig(mode="none"), seed=5)
    np.testing.assert_array_equal(guided, plain)
    assert not any(r["fired"] for r in log)


def test_sample_spherical_guidance_improves_reach():
    schedule, chain, policy, affordance, contact = reach_setup()
    guided_cfg = GuidanceConfig(mode="spherical", delta_scale=0.05)
    plain_cfg = GuidanceConfig(mode="none")
    guided_d, plain_d, fired = [], [], 0
    for seed in range(50):
        log = []
        chunk_g = sample(policy, None, affordance, schedule, guided_cfg,
                         seed=seed, chain=chain, log=log)
        chunk_p = sample(policy, None, affordance, schedule, plain_cfg,
                         seed=seed)
        guided_d.append(final_distance(chain, chunk_g, contact))
        plain_d.append(final_distance(chain, chunk_p, contact))
        fired += any(r["fired"] for r in log)
    assert fired > 25
    assert np.mean(guided_d) < np.mean(plain_d)


def test_sample_unguided_preserves_action_distribution():
    schedule, chain, policy, affordance, _ = reach_setup(spread=0.05)
    cfg = GuidanceConfig(mode="none")
    samples = np.array([
        sample(policy, None, affordance, schedule, cfg, seed=s)
        for s in range(1000)])
    mean = samples.mean(axis=0)
    se = samples.std(axis=0) / np.sqrt(len(samples))
    np.testing.assert_array_less(np.abs(mean - policy.mean_chunk),
                                 3.0 * se + 1e-12)


def test_sample_requires_chain_for_guidance():
    schedule, _, policy, affordance, _ = reach_setup()
    with pytest.raises(ValueError):
        sample(policy, None, affordance, schedule,
               GuidanceConfig(mode="spherical"), seed=0)


def test_guidance_log_roundtrip(tmp_path):
    schedule, chain, policy, affordance, _ = reach_setup()
    log = []
    sample(policy, None, affordance, schedule,
           GuidanceConfig(mode="spherical", delta_scale=0.05), seed=2,
           chain=chain, log=log)
    path = tmp_path / "guidance.log"
    write_guidance_log(path, log)
    loaded = read_guidance_log(path)
    assert len(loaded) == len(log)
    for got, want in zip(loaded, log):
        assert got["k"] == want["k"]
        assert got["fired"] == want["fired"]
        assert abs(got["loss"] - want["loss"]) < 1e-6
        assert abs(got["displacement"] - want["displacement"]) < 1e-6
