import copy
import math

import numpy as np
import pytest

from task_oed.dynamics import LiveSystem, RandomInputPolicy
from task_oed.harness import method_id
from task_oed.errors import ConfigurationError
from task_oed.scenarios import (
    DataStore,
    build_scenario,
    compute_reference,
    default_scenario_config,
    default_schedule,
    epoch_schedule,
    evaluate_checkpoints,
    run_trial,
    scenario_from_config,
)


class TestSchedule:
    def test_epoch_schedule_64(self):
        assert epoch_schedule(64) == [2, 4, 8]

    def test_epoch_schedule_16_single_epoch(self):
        assert epoch_schedule(16) == [2]

    def test_epoch_schedule_100(self):
        assert epoch_schedule(100) == [2, 4, 8, 16]

    def test_minimum_budget_enforced(self):
        with pytest.raises(ConfigurationError):
            epoch_schedule(15)

    def test_default_checkpoint_schedule(self, bump):
        sched = default_schedule(bump, 100)
        assert sched[0] == bump.n_warmup
        assert sched[-1] == 100
        assert all(b > a for a, b in zip(sched, sched[1:]))
        assert set(sched) >= {10, 16, 32, 64, 100}


class TestScenarioConfig:
    def test_builtin_constants_match(self, bump, drone, car):
        assert bump.model.horizon == 10
        assert drone.model.horizon == 50 and car.model.horizon == 50
        for s in (bump, drone, car):
            assert s.model.noise_std == pytest.approx(math.sqrt(0.1))
            assert s.gamma_sq == pytest.approx(10 * s.model.horizon)
        assert bump.n_warmup == 10 and drone.n_warmup == 10 and car.n_warmup == 100
        np.testing.assert_allclose(bump.model.A,
                                   [[0.8, 1.0] + [-3.0] * 10])
        assert drone.model.A[5, -1] == pytest.approx(-0.98)
        assert car.model.A.shape == (6, 14)
        centers = bump.config["feature_map"]["params"]["centers"]
        assert centers[:9] == [10.0, -14.0, -11.0, -8.0, -5.0, -2.0, 1.0, 4.0, 7.0]

    def test_power_matched_sigma(self, drone):
        # sigma_u^2 = gamma^2 / (H d_u) gives E[sum ||u||^2] = gamma^2 exactly.
        sigma = drone.sigma_u_matched
        assert sigma**2 * drone.model.horizon * drone.model.phi.d_u == pytest.approx(
            drone.gamma_sq)
        rng = np.random.default_rng(0)
        draws = sigma * rng.standard_normal((4000, drone.model.horizon, 3))
        power = (draws**2).sum(axis=(1, 2))
        assert power.mean() == pytest.approx(drone.gamma_sq, rel=0.05)

    def test_custom_scenario_from_config(self):
        cfg = default_scenario_config("bump1d")
        cfg = copy.deepcopy(cfg)
        cfg["name"] = "bump1d_shifted"
        cfg["feature_map"]["params"]["centers"][-1] = -20.0
        cfg["noise_std"] = 0.1
        scn = scenario_from_config(cfg)
        assert scn.name == "bump1d_shifted"
        assert scn.model.noise_std == 0.1
        assert scn.model.phi.d_phi == 12

    def test_unknown_names_rejected(self):
        with pytest.raises(ConfigurationError):
            build_scenario("segway")
        cfg = default_scenario_config("bump1d")
        cfg["feature_map"]["kind"] = "fourier"
        with pytest.raises(ConfigurationError):
            scenario_from_config(cfg)

    def test_dotted_overrides(self):
        scn = build_scenario("bump1d", {"mpc.n_candidates": 32, "gamma_sq": 50.0})
        assert scn.mpc.n_candidates == 32
        assert scn.gamma_sq == 50.0


class TestBudgetAndDeterminism:
    @pytest.mark.parametrize("method", ["random", "uniform", "costmin", "task"])
    def test_exact_budget_consumption(self, bump, method):
        data = run_trial(bump, method, 24, np.random.SeedSequence((5, 0, 1, 0)))
        assert data.episodes_used == 24
        assert data.store.n_episodes == 24

    @pytest.mark.parametrize("method", ["random", "uniform", "task"])
    def test_trial_determinism(self, bump, method):
        seq = (9, 3, 7, 0)
        d1 = run_trial(bump, method, 20, np.random.SeedSequence(seq))
        d2 = run_trial(bump, method, 20, np.random.SeedSequence(seq))
        assert d1.store.n_episodes == d2.store.n_episodes
        for t1, t2 in zip(d1.store.trajectories, d2.store.trajectories):
            np.testing.assert_array_equal(t1.states, t2.states)
            np.testing.assert_array_equal(t1.inputs, t2.inputs)

    def test_checkpoint_records_deterministic(self, bump):
        ref = compute_reference(bump, np.random.SeedSequence(123))
        rows = []
        for _ in range(2):
            data = run_trial(bump, "random", 32, np.random.SeedSequence((1, 2, 3, 0)))
            recs = evaluate_checkpoints(bump, data.store, [10, 16, 32], ref,
                                        np.random.SeedSequence((1, 2, 3, 1)))
            rows.append([(r.episodes, r.excess_loss, r.frob_error, r.design_score)
                         for r in recs])
        assert rows[0] == rows[1]


class TestReference:
    def test_reference_values_sane(self, bump):
        ref = compute_reference(bump, np.random.SeedSequence(7))
        assert math.isfinite(ref.j_star) and ref.j_star > 0
        assert ref.j_star_se > 0
        assert ref.m_star.shape == (12, 12)
        assert np.linalg.eigvalsh(ref.m_star)[0] >= -1e-10

    def test_excess_loss_nonnegative_within_noise(self, bump):
        ref = compute_reference(bump, np.random.SeedSequence(7))
        data = run_trial(bump, "random", 64, np.random.SeedSequence((2, 0, 0, 0)))
        recs = evaluate_checkpoints(bump, data.store, [16, 64], ref,
                                    np.random.SeedSequence((2, 0, 0, 1)))
        for r in recs:
            if math.isfinite(r.excess_loss):
                assert r.excess_loss >= -3 * r.excess_loss_se


class TestExplorationQuality:
    @pytest.mark.slow
    def test_uniform_beats_random_min_eig_on_drone(self, drone):
        # Reference anchor for active lambda_min exploration.  The constant
        # feature caps every policy's per-episode minimum eigenvalue on this
        # system, so the measurable edge over power-matched random inputs is
        # real but modest (about 1.1x); what matters is that it is
        # consistently positive.
        T = 30
        for seed in (0, 1):
            lmins = {}
            for method in ("uniform", "random"):
                data = run_trial(drone, method, T,
                                 np.random.SeedSequence((40 + seed, 0, method_id(method) % 97, 0)))
                lam, _ = data.store.stats_at(T)
                lmins[method] = np.linalg.eigvalsh(lam)[0]
            assert lmins["uniform"] >= 1.05 * lmins["random"]

    @pytest.mark.slow
    def test_costmin_plateaus_above_task_on_drone(self, drone):
        # Ordering only: exploring by minimizing the control cost keeps the
        # estimate worse than task-driven exploration at the same budget.
        ref = compute_reference(drone, np.random.SeedSequence(99))
        finals = {"task": [], "costmin": []}
        for seed in range(4):
            for method in finals:
                data = run_trial(drone, method, 100,
                                 np.random.SeedSequence((60 + seed, 0,
                                                         method_id(method) % 97, 0)))
                recs = evaluate_checkpoints(drone, data.store, [100], ref,
                                            np.random.SeedSequence((60 + seed, 1)))
                finals[method].append(recs[0].excess_loss)
        assert np.mean(finals["task"]) < np.mean(finals["costmin"])
