import numpy as np
import pytest

from task_oed.dynamics import (
    Covariates,
    RandomInputPolicy,
    SystemModel,
    Trajectory,
    ZeroPolicy,
    estimate_policy_covariance,
    rollout,
    simulate_batch,
    step,
)
from task_oed.errors import ConfigurationError, DivergedRolloutError
from task_oed.scenarios import bump_feature_map, BUMP_CENTERS

from conftest import identity_map, scalar_system


def bump_model(noise_std=0.0, horizon=10, x1=0.0):
    phi = bump_feature_map(BUMP_CENTERS)
    A = np.array([[0.8, 1.0] + [-3.0] * 10])
    return SystemModel(A, phi, noise_std, horizon, op_norm_bound=10.0,
                       x1=np.array([x1]))


class TestStep:
    def test_identity_map_is_identity(self):
        model = SystemModel(np.eye(3), identity_map(3, 1), 0.0, 5)
        x0 = np.array([1.0, -2.0, 0.5])
        out = step(model, x0, np.zeros(1), np.zeros(3))
        np.testing.assert_array_equal(out, x0)

    def test_bump_system_away_from_bumps(self):
        # Hand oracle: at x=0 every bump term max(1 - 100 x^2, 0) has its
        # argument 1 - 100*(0 - c_i)^2 < 0 for all centers, so x' = a1*0 + a2*1.
        model = bump_model()
        for c in BUMP_CENTERS:
            assert 1.0 - 100.0 * (0.0 - c) ** 2 < 0
        out = step(model, np.array([0.0]), np.array([1.0]), np.zeros(1))
        assert out == pytest.approx(1.0, abs=1e-15)

    def test_bump_system_on_goal_bump(self):
        # At x = 10 the goal bump is fully active: x' = 0.8*10 + u - 3.
        model = bump_model()
        out = step(model, np.array([10.0]), np.array([0.5]), np.zeros(1))
        assert out == pytest.approx(0.8 * 10 + 0.5 - 3.0, abs=1e-12)

    def test_drone_gravity_column(self, drone):
        out = step(drone.model, np.zeros(6), np.zeros(3), np.zeros(6))
        np.testing.assert_allclose(out, [0, 0, 0, 0, 0, -0.98], atol=1e-15)

    def test_dimension_mismatch(self, drone):
        with pytest.raises(ConfigurationError):
            step(drone.model, np.zeros(5), np.zeros(3), np.zeros(6))

    def test_linear_in_A_for_fixed_inputs(self):
        rng = np.random.default_rng(0)
        phi = bump_feature_map(BUMP_CENTERS)
        x, u = np.array([0.3]), np.array([-0.7])
        for _ in range(20):
            A1 = rng.standard_normal((1, 12))
            A2 = rng.standard_normal((1, 12))
            m1 = bump_model().with_A(A1)
            m2 = bump_model().with_A(A2)
            m12 = bump_model().with_A(A1 + A2)
            lhs = step(m12, x, u, np.zeros(1))
            rhs = step(m1, x, u, np.zeros(1)) + step(m2, x, u, np.zeros(1))
            np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


class TestRollout:
    def test_drone_pure_gravity(self, drone):
        # Closed form for the noiseless drone under zero input, zero start:
        # v_z(k) = -0.98 k and z(k) = 0.1 * sum_{j<k} v_z(j).
        import dataclasses
        model = dataclasses.replace(drone.model, noise_std=0.0)
        traj = rollout(model, ZeroPolicy(3), np.random.default_rng(0))
        ks = np.arange(model.horizon + 1)
        v_expected = -0.98 * ks
        z_expected = -0.98 * 0.1 * ks * (ks - 1) / 2
        np.testing.assert_allclose(traj.states[:, 5], v_expected, atol=1e-10)
        np.testing.assert_allclose(traj.states[:, 2], z_expected, atol=1e-10)
        np.testing.assert_allclose(traj.states[:, [0, 1, 3, 4]], 0, atol=1e-12)

    def test_length_contract(self):
        model = scalar_system(0.5, 1.0, 0.1, horizon=1)
        traj = rollout(model, ZeroPolicy(1), np.random.default_rng(1))
        assert traj.states.shape == (2, 1)
        assert traj.inputs.shape == (1, 1)

    def test_same_seed_same_trajectory(self):
        model = scalar_system(0.5, 1.0, 0.3, horizon=7)
        policy = RandomInputPolicy(1, 1.0, seed=42)
        t1 = rollout(model, policy, np.random.default_rng(9))
        t2 = rollout(model, policy, np.random.default_rng(9))
        np.testing.assert_array_equal(t1.states, t2.states)
        np.testing.assert_array_equal(t1.inputs, t2.inputs)

    def test_divergence_carries_step_index(self):
        model = scalar_system(1e6, 0.0, 0.0, horizon=5, x1=1.0)
        with pytest.raises(DivergedRolloutError) as err:
            rollout(model, ZeroPolicy(1), np.random.default_rng(0))
        assert 1 <= err.value.step <= 5

    def test_trajectory_length_validation(self):
        with pytest.raises(ConfigurationError):
            Trajectory(np.zeros((3, 1)), np.zeros((3, 1)))


class TestPolicyCovariance:
    def test_constant_feature(self):
        phi_const = identity_map(1, 1)
        phi_const = phi_const.__class__(
            "const", 1, 1, 1, lambda X, U: np.ones((X.shape[0], 1)))
        model = SystemModel(np.zeros((1, 1)), phi_const, 0.0, 10)
        cov = estimate_policy_covariance(model, ZeroPolicy(1), 3,
                                         np.random.default_rng(0))
        assert cov.lam[0, 0] == pytest.approx(10.0, abs=1e-12)

    def test_deterministic_system_any_n(self):
        model = scalar_system(0.5, 1.0, 0.0, horizon=4, x1=1.0)
        c1 = estimate_policy_covariance(model, ZeroPolicy(1), 1,
                                        np.random.default_rng(0))
        c5 = estimate_policy_covariance(model, ZeroPolicy(1), 5,
                                        np.random.default_rng(1))
        np.testing.assert_allclose(c1.lam, c5.lam, atol=1e-12)

    def test_two_step_hand_oracle(self):
        # x' = 0.5 x + u, u == 1, H = 2, x1 = 0: features (0,1) then (1,1).
        model = scalar_system(0.5, 1.0, 0.0, horizon=2)

        class One:
            def reset(self): pass
            def act(self, h, states, inputs): return np.array([1.0])

        cov = estimate_policy_covariance(model, One(), 1, np.random.default_rng(0))
        np.testing.assert_allclose(cov.lam, [[1.0, 1.0], [1.0, 2.0]], atol=1e-12)

    def test_monte_carlo_convergence_drone(self, drone):
        sigma_u = drone.sigma_u_matched
        model = drone.model

        def sample_cov(n, seed):
            rng = np.random.default_rng(seed)
            psis = []
            for i in range(n):
                policy = RandomInputPolicy(3, sigma_u, seed=int(rng.integers(2**62)))
                traj = rollout(model, policy, rng)
                F = traj.features(model.phi)
                psis.append(F.T @ F)
            return np.array(psis)

        small = sample_cov(500, 1)
        big = sample_cov(5000, 2)
        dist = np.linalg.norm(small.mean(0) - big.mean(0))
        se_mat = small.std(axis=0, ddof=1) / np.sqrt(500)
        se = np.linalg.norm(se_mat)
        assert dist <= 5 * se


class TestCovariates:
    def test_symmetrize_order_irrelevant(self):
        rng = np.random.default_rng(3)
        model = bump_model(noise_std=0.3)
        cov = Covariates.zeros(12)
        raw = np.zeros((12, 12))
        for i in range(10):
            traj = rollout(model, RandomInputPolicy(1, 2.0, seed=i), rng)
            F = traj.features(model.phi)
            cov.add_trajectory(traj, model.phi)
            raw += F.T @ F
        sym_after = 0.5 * (raw + raw.T)
        scale = max(np.abs(sym_after).max(), 1.0)
        assert np.abs(cov.lam - sym_after).max() / scale < 1e-12

    def test_loewner_monotone_accumulation(self):
        rng = np.random.default_rng(4)
        model = bump_model(noise_std=0.3)
        cov = Covariates.zeros(12)
        prev_eigs = np.zeros(12)
        for i in range(8):
            traj = rollout(model, RandomInputPolicy(1, 2.0, seed=100 + i), rng)
            cov.add_trajectory(traj, model.phi)
            eigs = np.linalg.eigvalsh(cov.lam)
            assert np.all(eigs >= prev_eigs - 1e-9)
            prev_eigs = eigs

    def test_invariant_bounds(self):
        rng = np.random.default_rng(5)
        model = bump_model(noise_std=0.3)
        cov = Covariates.zeros(12)
        for i in range(5):
            cov.add_trajectory(rollout(model, RandomInputPolicy(1, 2.0, seed=i), rng),
                               model.phi)
        assert np.abs(cov.lam - cov.lam.T).max() <= 1e-12 * max(np.abs(cov.lam).max(), 1)
        assert np.linalg.eigvalsh(cov.lam)[0] >= -1e-10 * np.trace(cov.lam)


class TestSimulateBatch:
    def test_matches_sequential_rollout(self, drone):
        import dataclasses
        model = dataclasses.replace(drone.model, noise_std=0.0)
        rng = np.random.default_rng(6)
        U = rng.standard_normal((4, model.horizon, 3))
        X, U_out = simulate_batch(model.A, model.phi,
                                  np.zeros((4, 6)), model.horizon, U)
        for b in range(4):
            x = np.zeros(6)
            for h in range(model.horizon):
                x = step(model, x, U[b, h], np.zeros(6))
                np.testing.assert_allclose(X[b, h + 1], x, atol=1e-12)
