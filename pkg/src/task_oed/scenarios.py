"""The three benchmark systems, exploration methods, and the epoch driver.

Scenarios are described by a plain config tree (also loadable from a file) so
new systems can be assembled from registered feature maps without code
changes.  Every interaction with the ground-truth system flows through a
budgeted LiveSystem; estimation, synthesis, and Hessian computation use only
the estimated model.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import control, estimation, hessian as hessian_mod, oed
from .control import (
    CostFunction,
    QuadraticCost,
    SamplingFamily,
    SynthesisResult,
    car_family,
    pool_costs_on_model,
    softmin_weights,
    synthesize_bump_matching,
    synthesize_lqr_affine,
    synthesize_random_search,
    trajectory_cost_batch,
)
from .dynamics import (
    AffineStructure,
    Covariates,
    FeatureMap,
    LiveSystem,
    RandomInputPolicy,
    SystemModel,
    Trajectory,
    simulate_batch,
)
from .errors import (
    BudgetExhaustedError,
    ConfigurationError,
    DivergedRolloutError,
    IllConditionedError,
    MinEigTimeoutError,
    SingularCovarianceError,
    SynthesisFailedError,
)
from .estimation import EstimatorConfig, least_squares_from_stats
from .hessian import ModelTaskHessian, SynthesisBundle, hessian_fd, hessian_gauss_newton
from .oed import (
    EpisodeResult,
    MinEigResult,
    MpcConfig,
    ScoreSpec,
    TheoryConstants,
    ThompsonMpcPolicy,
    episode_result,
    learn_exp_policies,
    thompson_mpc_oracle,
)

log = logging.getLogger("task_oed.scenarios")

METHODS = ("task", "random", "uniform", "costmin")


# ---------------------------------------------------------------------------
# Feature map registry
# ---------------------------------------------------------------------------


def bump_feature_map(centers) -> FeatureMap:
    centers = np.asarray(centers, dtype=float)

    def eval_batch(X, U):
        x = X[:, 0]
        bumps = control.bump_features(x, centers)
        return np.concatenate([X, U, bumps], axis=1)

    return FeatureMap("bump1d", 1, 1, 2 + centers.size, eval_batch,
                      nominal_bound=25.0)


def affine_linear_feature_map(d_x: int, d_u: int) -> FeatureMap:
    def eval_batch(X, U):
        ones = np.ones((X.shape[0], 1))
        return np.concatenate([X, U, ones], axis=1)

    return FeatureMap("affine_linear", d_x, d_u, d_x + d_u + 1, eval_batch,
                      nominal_bound=25.0, affine=AffineStructure(d_x, d_u))


def car_feature_map() -> FeatureMap:
    def eval_batch(X, U):
        heading = X[:, 4]
        c, s = np.cos(heading)[:, None], np.sin(heading)[:, None]
        u1, u2 = U[:, 0:1], U[:, 1:2]
        return np.concatenate([X, U, c, s, u1 * c, u1 * s, u2 * c, u2 * s], axis=1)

    return FeatureMap("car", 6, 2, 14, eval_batch, nominal_bound=25.0)


FEATURE_MAPS: dict[str, Callable[..., FeatureMap]] = {
    "bump1d": bump_feature_map,
    "affine_linear": affine_linear_feature_map,
    "car": car_feature_map,
}


# ---------------------------------------------------------------------------
# Scenario definition
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """A fully resolved benchmark instance."""

    name: str
    model: SystemModel              # ground truth
    cost: CostFunction
    gamma_sq: float                 # exploration power budget per episode
    n_warmup: int
    synthesizer_kind: str           # "lqr" | "random_search" | "bump_matching"
    hessian_method: str             # "finite_difference" | "gauss_newton"
    constants: TheoryConstants
    mpc: MpcConfig
    estimator: EstimatorConfig
    config: dict                    # the resolved config tree this was built from
    goal_center: float | None = None
    family: SamplingFamily | None = None
    n_search_candidates: int = 300
    n_search_rollouts: int = 30
    temperature_scale: float = 0.1
    hessian_n_mc: int = 256
    n_eval_rollouts: int = 2000
    n_star_rollouts: int = 20000
    mineig_threshold_frac: float = 0.01

    @property
    def sigma_u_matched(self) -> float:
        """sigma_u with E[sum ||u||^2] = gamma^2 exactly for Gaussian inputs."""
        return math.sqrt(self.gamma_sq / (self.model.horizon * self.model.phi.d_u))

    # -- synthesis ---------------------------------------------------------

    def synthesize(self, model_hat: SystemModel, rng: np.random.Generator) -> SynthesisResult:
        if self.synthesizer_kind == "lqr":
            return synthesize_lqr_affine(model_hat, self.cost.quadratic)
        if self.synthesizer_kind == "random_search":
            return synthesize_random_search(
                model_hat, self.cost, self.family,
                self.n_search_candidates, self.n_search_rollouts, rng,
                temperature_scale=self.temperature_scale,
            )
        if self.synthesizer_kind == "bump_matching":
            centers = self.config["feature_map"]["params"]["centers"]
            return synthesize_bump_matching(
                model_hat.A, self.goal_center, np.asarray(centers, dtype=float),
                model_hat=model_hat, cost=self.cost, rng=rng,
            )
        raise ConfigurationError(f"unknown synthesizer {self.synthesizer_kind!r}")

    # -- model-task curvature ---------------------------------------------

    def hessian_bundle(self, A_center: np.ndarray,
                       rng: np.random.Generator) -> SynthesisBundle:
        model_center = self.model.with_A(np.asarray(A_center, dtype=float))
        if self.synthesizer_kind == "lqr":
            return _lqr_bundle(model_center, self.cost.quadratic)
        if self.synthesizer_kind == "bump_matching":
            centers = np.asarray(self.config["feature_map"]["params"]["centers"],
                                 dtype=float)
            return _bump_bundle(model_center, self.cost, centers,
                                self.goal_center, self.hessian_n_mc, rng)
        if self.synthesizer_kind == "random_search":
            return _search_bundle(model_center, self.cost, self.family,
                                  self.n_search_candidates, self.n_search_rollouts,
                                  self.temperature_scale, rng)
        raise ConfigurationError(f"unknown synthesizer {self.synthesizer_kind!r}")

    def task_hessian(self, A_center: np.ndarray,
                     rng: np.random.Generator) -> ModelTaskHessian:
        bundle = self.hessian_bundle(A_center, rng)
        if self.hessian_method == "finite_difference":
            return hessian_fd(A_center, bundle)
        return hessian_gauss_newton(A_center, bundle)


def _lqr_bundle(model_center: SystemModel, quad: QuadraticCost) -> SynthesisBundle:
    aff = model_center.phi.affine
    A_out, B_out, c_out = aff.split(model_center.A)
    H = model_center.horizon

    def g_batch(stack: np.ndarray) -> np.ndarray:
        A_lin = stack[:, :, : aff.d_x]
        Bm = stack[:, :, aff.d_x : aff.d_x + aff.d_u]
        c = stack[:, :, aff.d_x + aff.d_u]
        fb, off = control.lqr_affine_batch(A_lin, Bm, c, quad.Q, quad.R, H)
        return control.affine_policy_cost_batch(
            A_out, B_out, c_out, model_center.noise_std, H, quad, fb, off,
            model_center.x1,
        )

    return SynthesisBundle(g_batch, aff.d_x, model_center.phi.d_phi,
                           label="lqr_closed_form", max_batch=2048)


def _bump_bundle(model_center: SystemModel, cost: CostFunction, centers: np.ndarray,
                 goal: float, n_mc: int, rng: np.random.Generator) -> SynthesisBundle:
    H = model_center.horizon
    noise = model_center.noise_std * rng.standard_normal((n_mc, H, 1))

    def g_batch(stack: np.ndarray) -> np.ndarray:
        P = stack.shape[0]
        a = stack[:, 0, :]
        a2 = a[:, 1]
        bad = np.abs(a2) < 1e-6
        safe_a2 = np.where(bad, 1.0, a2)
        thetas = np.empty((P, centers.size + 2))
        thetas[:, 0] = -a[:, 0] / safe_a2
        thetas[:, 1:-1] = -a[:, 2:] / safe_a2[:, None]
        thetas[:, -1] = goal
        big_thetas = np.repeat(thetas, n_mc, axis=0)
        x0 = np.zeros((P * n_mc, 1))
        big_noise = np.tile(noise, (P, 1, 1))

        def act(h, X):
            return control.bump_act_theta_batch(big_thetas, X, centers)

        X, U = simulate_batch(model_center.A, model_center.phi, x0, H, act, big_noise)
        g = trajectory_cost_batch(cost, X, U).reshape(P, n_mc).mean(axis=1)
        return np.where(bad, np.inf, g)

    return SynthesisBundle(g_batch, 1, model_center.phi.d_phi,
                           label="bump_matching_mc", max_batch=512)


def _search_bundle(model_center: SystemModel, cost: CostFunction,
                   family: SamplingFamily, n_pool: int, n_rollouts: int,
                   temperature_scale: float,
                   rng: np.random.Generator) -> SynthesisBundle:
    """Frozen softmin pool: candidates, synthesis noise, and outer evaluation.

    g(A') re-scores the fixed pool on A' with common random numbers and takes
    the softmin-weighted average of the (fixed) outer-model candidate costs.
    """
    H, d_x = model_center.horizon, model_center.phi.d_x
    thetas = family.sample(n_pool, rng)
    noise_syn = model_center.noise_std * rng.standard_normal((n_rollouts, H, d_x))
    noise_out = model_center.noise_std * rng.standard_normal((n_rollouts, H, d_x))
    j_out = pool_costs_on_model(model_center, cost, family, thetas, noise_out)
    j_center = pool_costs_on_model(model_center, cost, family, thetas, noise_syn)
    keep = np.isfinite(j_out) & np.isfinite(j_center)
    thetas, j_out, j_center = thetas[keep], j_out[keep], j_center[keep]
    if thetas.shape[0] == 0:
        raise ConfigurationError("no finite candidates in the curvature pool")
    spread = float(j_center.std()) if j_center.size > 1 else 0.0
    temperature = max(temperature_scale * spread, 1e-12)

    n_kept = thetas.shape[0]
    phi = model_center.phi
    x1 = model_center.x1

    def g_batch(stack: np.ndarray) -> np.ndarray:
        # One fused pass scoring the whole pool on every perturbed model in
        # the chunk: rows are ordered (perturbation, candidate, rollout).
        P = stack.shape[0]
        Bp = n_kept * n_rollouts
        big_thetas = np.tile(np.repeat(thetas, n_rollouts, axis=0), (P, 1))
        X = np.broadcast_to(x1, (P * Bp, d_x)).copy()
        AT = stack.transpose(0, 2, 1)
        total = np.zeros(P * Bp)
        with np.errstate(over="ignore", invalid="ignore"):
            for h in range(H):
                U = family.act_theta_batch(big_thetas, h, X)
                F = phi.eval_batch(X, U)
                Xn = (F.reshape(P, Bp, phi.d_phi) @ AT).reshape(P * Bp, d_x)
                Xn += np.tile(noise_syn[:, h], (P * n_kept, 1))
                total += cost.per_step_batch(h, Xn, U)
                X = Xn
        total = np.where(np.isfinite(total), total, np.inf)
        j_syn = total.reshape(P, n_kept, n_rollouts).mean(axis=2)
        out = np.empty(P)
        for p in range(P):
            out[p] = float(softmin_weights(j_syn[p], temperature) @ j_out)
        return out

    return SynthesisBundle(g_batch, d_x, model_center.phi.d_phi,
                           label="softmin_pool_mc", max_batch=12)


# ---------------------------------------------------------------------------
# Built-in scenario configs
# ---------------------------------------------------------------------------

BUMP_CENTERS = [10.0, -14.0, -11.0, -8.0, -5.0, -2.0, 1.0, 4.0, 7.0, -17.0]

DRONE_A = np.array([
    [1, 0, 0, 0.1, 0, 0, 0, 0, 0, 0],
    [0, 1, 0, 0, 0.1, 0, 0, 0, 0, 0],
    [0, 0, 1, 0, 0, 0.1, 0, 0, 0, 0],
    [0, 0, 0, 1, 0, 0, 0.1, 0, 0, 0],
    [0, 0, 0, 0, 1, 0, 0, 0.1, 0, 0],
    [0, 0, 0, 0, 0, 1, 0, 0, 0.1, -0.98],
], dtype=float)

CAR_A = np.array([
    [1, 0, 0.1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 1, 0, 0.1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0.1, 0, 0, 0],
    [0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0.1, 0, 0],
    [0, 0, 0, 0, 1, 0.1, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 1, 0, 0.1, 0, 0, 0, 0, 0, 0],
], dtype=float)


def _car_cost_blocks() -> tuple[np.ndarray, np.ndarray]:
    """Q over [x; u] = (0.1 I + v1 v1^T + v2 v2^T) / opnorm, split into blocks.

    v1 weights position, v2 heading; there are no state-input cross terms so
    the joint quadratic splits exactly.
    """
    v1 = np.zeros(8)
    v1[0] = v1[1] = 1.0
    v2 = np.zeros(8)
    v2[4] = 1.0
    Qz = 0.1 * np.eye(8) + np.outer(v1, v1) + np.outer(v2, v2)
    Qz /= np.linalg.eigvalsh(Qz)[-1]
    return Qz[:6, :6], Qz[6:, 6:]


def default_scenario_config(name: str) -> dict:
    if name == "bump1d":
        return {
            "name": "bump1d",
            "feature_map": {"kind": "bump1d", "params": {"centers": list(BUMP_CENTERS)}},
            "A_star": [[0.8, 1.0] + [-3.0] * 10],
            "noise_std": math.sqrt(0.1),
            "horizon": 10,
            "gamma_sq": 100.0,
            "n_warmup": 10,
            "x1": [0.0],
            "cost": {"kind": "quadratic", "Q": [[1.0]], "R": [[0.01]], "x_ref": [10.0]},
            "synthesizer": {"kind": "bump_matching", "goal": 10.0},
            "hessian": {"method": "gauss_newton", "n_mc": 256},
            "op_norm_bound": 10.0,
            "B_phi": 25.0,
            "lam_min_star": 0.01,
            "mpc": {"n_candidates": 256, "replan": True},
            "estimation": {"ridge": None},
            "eval": {"n_rollouts": 50000, "n_star_rollouts": 50000},
            "mineig_threshold_frac": 0.01,
        }
    if name == "drone":
        return {
            "name": "drone",
            "feature_map": {"kind": "affine_linear", "params": {"d_x": 6, "d_u": 3}},
            "A_star": DRONE_A.tolist(),
            "noise_std": math.sqrt(0.1),
            "horizon": 50,
            "gamma_sq": 500.0,
            "n_warmup": 10,
            "x1": [0.0] * 6,
            "cost": {
                "kind": "quadratic",
                "Q": (0.02 * np.eye(6)).tolist(),
                "R": (0.2 * np.eye(3)).tolist(),
            },
            "synthesizer": {"kind": "lqr"},
            "hessian": {"method": "finite_difference"},
            "op_norm_bound": 2.0,
            "B_phi": 25.0,
            "lam_min_star": 0.05,
            "mpc": {"n_candidates": 256, "replan": True},
            "estimation": {"ridge": None},
            "eval": {"n_rollouts": 2000, "n_star_rollouts": 20000},
            "mineig_threshold_frac": 0.01,
        }
    if name == "car":
        Qx, Ru = _car_cost_blocks()
        return {
            "name": "car",
            "feature_map": {"kind": "car", "params": {}},
            "A_star": CAR_A.tolist(),
            "noise_std": math.sqrt(0.1),
            "horizon": 50,
            "gamma_sq": 500.0,
            "n_warmup": 100,
            "x1": [0.0] * 6,
            "cost": {"kind": "quadratic", "Q": Qx.tolist(), "R": Ru.tolist()},
            "synthesizer": {
                "kind": "random_search",
                "family": "car",
                "n_candidates": 300,
                "n_eval_rollouts": 30,
                "temperature_scale": 0.1,
            },
            "hessian": {"method": "gauss_newton"},
            "op_norm_bound": 2.0,
            "B_phi": 25.0,
            "lam_min_star": 0.01,
            "mpc": {"n_candidates": 256, "replan": True},
            "estimation": {"ridge": None},
            "eval": {"n_rollouts": 2000, "n_star_rollouts": 20000},
            "mineig_threshold_frac": 0.01,
        }
    raise ConfigurationError(f"unknown scenario {name!r}")


FAMILIES: dict[str, Callable[[], SamplingFamily]] = {"car": car_family}


def scenario_from_config(cfg: dict) -> Scenario:
    """Build a scenario from a resolved config tree."""
    cfg = copy.deepcopy(cfg)
    fm_cfg = cfg["feature_map"]
    if fm_cfg["kind"] not in FEATURE_MAPS:
        raise ConfigurationError(f"unknown feature map {fm_cfg['kind']!r}")
    phi = FEATURE_MAPS[fm_cfg["kind"]](**fm_cfg.get("params", {}))
    phi = dataclasses.replace(phi, nominal_bound=float(cfg.get("B_phi", phi.nominal_bound)))
    model = SystemModel(
        np.asarray(cfg["A_star"], dtype=float),
        phi,
        float(cfg["noise_std"]),
        int(cfg["horizon"]),
        float(cfg.get("op_norm_bound", 1.0)),
        np.asarray(cfg.get("x1", np.zeros(phi.d_x)), dtype=float),
    )
    cost_cfg = cfg["cost"]
    if cost_cfg["kind"] != "quadratic":
        raise ConfigurationError(f"unknown cost kind {cost_cfg['kind']!r}")
    quad = QuadraticCost(
        np.asarray(cost_cfg["Q"], dtype=float),
        np.asarray(cost_cfg["R"], dtype=float),
        np.asarray(cost_cfg["x_ref"], dtype=float) if cost_cfg.get("x_ref") is not None else None,
    )
    cost = CostFunction.from_quadratic(f"{cfg['name']}_cost", quad)
    syn = cfg["synthesizer"]
    family = None
    if syn["kind"] == "random_search":
        family = FAMILIES[syn.get("family", "car")]()
    constants = TheoryConstants.for_model(
        model, float(cfg.get("B_phi", 25.0)), float(cfg.get("lam_min_star", 0.01))
    )
    mpc_cfg = cfg.get("mpc", {})
    return Scenario(
        name=cfg["name"],
        model=model,
        cost=cost,
        gamma_sq=float(cfg["gamma_sq"]),
        n_warmup=int(cfg["n_warmup"]),
        synthesizer_kind=syn["kind"],
        hessian_method=cfg["hessian"]["method"],
        constants=constants,
        mpc=MpcConfig(
            n_candidates=int(mpc_cfg.get("n_candidates", 256)),
            replan=bool(mpc_cfg.get("replan", True)),
            power_budget=float(cfg["gamma_sq"]),
        ),
        estimator=EstimatorConfig(ridge=cfg.get("estimation", {}).get("ridge")),
        config=cfg,
        goal_center=float(syn["goal"]) if "goal" in syn else None,
        family=family,
        n_search_candidates=int(syn.get("n_candidates", 300)),
        n_search_rollouts=int(syn.get("n_eval_rollouts", 30)),
        temperature_scale=float(syn.get("temperature_scale", 0.1)),
        hessian_n_mc=int(cfg["hessian"].get("n_mc", 256)),
        n_eval_rollouts=int(cfg.get("eval", {}).get("n_rollouts", 2000)),
        n_star_rollouts=int(cfg.get("eval", {}).get("n_star_rollouts", 20000)),
        mineig_threshold_frac=float(cfg.get("mineig_threshold_frac", 0.01)),
    )


def build_scenario(name: str, overrides: dict | None = None) -> Scenario:
    cfg = default_scenario_config(name)
    for key, value in (overrides or {}).items():
        _apply_dotted(cfg, key, value)
    return scenario_from_config(cfg)


def _apply_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


# ---------------------------------------------------------------------------
# Trial data accumulation
# ---------------------------------------------------------------------------


class DataStore:
    """Every trajectory a trial has produced, with per-episode statistics.

    Slicing by episode count supports checkpoint fitting at arbitrary points
    of the run without replaying anything.
    """

    def __init__(self, phi: FeatureMap):
        self.phi = phi
        self.trajectories: list[Trajectory] = []
        self.psis: list[np.ndarray] = []
        self.crosses: list[np.ndarray] = []
        self.lam_total = np.zeros((phi.d_phi, phi.d_phi))
        self.cross_total = np.zeros((phi.d_x, phi.d_phi))

    def add(self, traj: Trajectory, policy=None) -> None:
        F = traj.features(self.phi)
        psi = F.T @ F
        cross = traj.states[1:].T @ F
        self.trajectories.append(traj)
        self.psis.append(psi)
        self.crosses.append(cross)
        self.lam_total += psi
        self.cross_total += cross

    @property
    def n_episodes(self) -> int:
        return len(self.trajectories)

    def stats_at(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        lam = np.sum(self.psis[:count], axis=0) if count else np.zeros_like(self.lam_total)
        cross = np.sum(self.crosses[:count], axis=0) if count else np.zeros_like(self.cross_total)
        return 0.5 * (lam + lam.T), cross

    def fit_at(self, count: int, cfg: EstimatorConfig) -> np.ndarray:
        lam, cross = self.stats_at(count)
        return least_squares_from_stats(lam, cross, cfg)

    def posterior(self, cfg: EstimatorConfig) -> tuple[np.ndarray, Covariates]:
        lam = 0.5 * (self.lam_total + self.lam_total.T)
        A_hat = least_squares_from_stats(lam, self.cross_total, cfg)
        return A_hat, Covariates(lam.copy(), self.n_episodes)


def run_policy_episode(live: LiveSystem, policy) -> EpisodeResult:
    """One live episode as an EpisodeResult, recording divergence."""
    phi = live.model.phi
    try:
        traj = live.run_episode(policy)
        return episode_result(traj, phi, policy)
    except DivergedRolloutError as exc:
        if exc.partial is not None:
            return episode_result(exc.partial, phi, policy, diverged=True)
        return EpisodeResult(None, np.zeros((0, phi.d_phi)),
                             np.zeros((phi.d_phi, phi.d_phi)), policy, True)


# ---------------------------------------------------------------------------
# Exploration methods
# ---------------------------------------------------------------------------


@dataclass
class EpochCheckpoint:
    episodes: int
    A_hat: np.ndarray
    synthesis: SynthesisResult | None


@dataclass
class TrialData:
    store: DataStore
    episodes_used: int
    epoch_checkpoints: list[EpochCheckpoint] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _warmup_policy(scenario: Scenario, rng: np.random.Generator) -> RandomInputPolicy:
    return RandomInputPolicy(scenario.model.phi.d_u, scenario.sigma_u_matched,
                             seed=int(rng.integers(2**63)))


def run_warmup(scenario: Scenario, live: LiveSystem,
               rng: np.random.Generator) -> list[EpisodeResult]:
    return [run_policy_episode(live, _warmup_policy(scenario, rng))
            for _ in range(min(scenario.n_warmup, live.remaining))]


def make_warmup_runner(scenario: Scenario, live: LiveSystem, rng: np.random.Generator):
    def warmup(K: int) -> list[EpisodeResult]:
        return [run_policy_episode(live, _warmup_policy(scenario, rng))
                for _ in range(K)]

    return warmup


def make_oracle_factory(scenario: Scenario, live: LiveSystem, store: DataStore,
                        rng: np.random.Generator):
    """Thompson-sampling MPC oracle bound to the trial's live data."""

    def factory():
        def oracle(cost_matrix: np.ndarray, K: int) -> list[EpisodeResult]:
            A_hat, cov = store.posterior(scenario.estimator)
            return thompson_mpc_oracle(
                A_hat, cov, scenario.model.noise_std, cost_matrix, K,
                scenario.mpc, live, rng,
            )

        return oracle

    return factory


def make_replayer(live: LiveSystem):
    def replay(policies: list) -> list[EpisodeResult]:
        return [run_policy_episode(live, p) for p in policies]

    return replay


def _sample_exploration_model(scenario: Scenario, store: DataStore,
                              rng: np.random.Generator) -> SystemModel:
    A_hat, cov = store.posterior(scenario.estimator)
    ridge = oed.posterior_ridge(scenario.model, scenario.mpc)
    A_til = oed.sample_model_rows(A_hat, cov.lam, scenario.model.noise_std, ridge, rng)
    return scenario.model.with_A(A_til)


def run_random(scenario: Scenario, live: LiveSystem, store: DataStore,
               rng: np.random.Generator, sigma_u: float | None = None) -> None:
    sigma = sigma_u if sigma_u is not None else scenario.sigma_u_matched
    while live.remaining > 0:
        policy = RandomInputPolicy(scenario.model.phi.d_u, sigma,
                                   seed=int(rng.integers(2**63)))
        run_policy_episode(live, policy)


def run_uniform(scenario: Scenario, live: LiveSystem, store: DataStore,
                rng: np.random.Generator) -> None:
    """Maximize lambda_min of the accumulated covariates via sampling MPC."""
    while live.remaining > 0:
        sample = _sample_exploration_model(scenario, store, rng)
        policy = ThompsonMpcPolicy(
            sample,
            ScoreSpec("lambda_min", lam_base=store.lam_total.copy()),
            scenario.gamma_sq, scenario.mpc.n_candidates,
            seed=int(rng.integers(2**63)), replan=scenario.mpc.replan,
        )
        run_policy_episode(live, policy)


def run_costmin(scenario: Scenario, live: LiveSystem, store: DataStore,
                rng: np.random.Generator) -> None:
    """Explore by playing the power-constrained MPC minimizer of the task cost."""
    while live.remaining > 0:
        sample = _sample_exploration_model(scenario, store, rng)
        policy = ThompsonMpcPolicy(
            sample,
            ScoreSpec("cost_min", cost=scenario.cost),
            scenario.gamma_sq, scenario.mpc.n_candidates,
            seed=int(rng.integers(2**63)), replan=scenario.mpc.replan,
        )
        run_policy_episode(live, policy)


def epoch_schedule(total_T: int) -> list[int]:
    """Epoch sizes T_ell = 2^ell for ell = 1 .. ceil(log2(T / 8))."""
    if total_T < 16:
        raise ConfigurationError("total episode budget must be at least 16")
    n_epochs = max(1, math.ceil(math.log2(total_T / 8.0)))
    return [2**ell for ell in range(1, n_epochs + 1)]


def run_algorithm1(scenario: Scenario, live: LiveSystem, store: DataStore,
                   rng: np.random.Generator,
                   synth_rng: np.random.Generator | None = None) -> TrialData:
    """The task-driven epoch loop.

    Each epoch estimates the model-task curvature at the current estimate,
    learns exploration policies for it, replays them to the epoch scale, and
    re-estimates on all data collected so far.  Budget exhaustion anywhere
    finalizes the trial at exactly the granted number of episodes; leftover
    budget after the last epoch is spent replaying the newest policy set.
    """
    synth_rng = synth_rng if synth_rng is not None else rng
    data = TrialData(store=store, episodes_used=0)
    oracle_factory = make_oracle_factory(scenario, live, store, rng)
    warmup_runner = make_warmup_runner(scenario, live, rng)
    replayer = make_replayer(live)
    delta = 0.1
    mineig_cache: MinEigResult | None = None
    last_policies: list = []

    def checkpoint() -> None:
        A_hat, _ = store.posterior(scenario.estimator)
        synthesis = scenario.synthesize(scenario.model.with_A(A_hat), synth_rng)
        data.epoch_checkpoints.append(
            EpochCheckpoint(live.episodes_used, A_hat, synthesis))

    try:
        run_warmup(scenario, live, rng)
        warm_eig = float(np.linalg.eigvalsh(store.lam_total)[0])
        mineig_threshold = scenario.mineig_threshold_frac * max(
            warm_eig / max(store.n_episodes, 1), 0.0)
        for T_ell in epoch_schedule(live.budget):
            A_hat, _ = store.posterior(scenario.estimator)
            H_ell = scenario.task_hessian(A_hat, rng)
            cap = math.ceil(4.5 * T_ell) + 16 + (24 if mineig_cache is None else 0)
            result = learn_exp_policies(
                H_ell, scenario.model.phi.d_x, scenario.model.phi.d_phi,
                scale=T_ell, delta=delta,
                oracle_factory=oracle_factory, warmup=warmup_runner,
                replay=replayer, rng=rng, constants=scenario.constants,
                budget_cap=cap, mineig_cached=mineig_cache,
                mineig_threshold=mineig_threshold,
                mineig_cap=24,
                max_rounds=1,  # the epoch loop is the doubling schedule
            )
            mineig_cache = result.mineig
            if result.warning:
                data.warnings.append(f"epoch T={T_ell}: policy learning hit its cap")
            last_policies = result.policies
            n_sweeps = max(1, math.ceil(T_ell / max(len(result.policies), 1)))
            for _ in range(n_sweeps):
                for policy in result.policies:
                    run_policy_episode(live, policy)
            checkpoint()
        # Spend any remaining budget replaying the newest policies.
        while live.remaining > 0:
            for policy in (last_policies or [_warmup_policy(scenario, rng)]):
                if live.remaining <= 0:
                    break
                run_policy_episode(live, policy)
        checkpoint()
    except BudgetExhaustedError:
        checkpoint()
    data.episodes_used = live.episodes_used
    return data


def run_baseline(scenario: Scenario, method: str, live: LiveSystem, store: DataStore,
                 rng: np.random.Generator, sigma_u: float | None = None) -> TrialData:
    try:
        run_warmup(scenario, live, rng)
        if method == "random":
            run_random(scenario, live, store, rng, sigma_u=sigma_u)
        elif method == "uniform":
            run_uniform(scenario, live, store, rng)
        elif method == "costmin":
            run_costmin(scenario, live, store, rng)
        else:
            raise ConfigurationError(f"unknown baseline method {method!r}")
    except BudgetExhaustedError:
        pass
    return TrialData(store=store, episodes_used=live.episodes_used)


def run_trial(scenario: Scenario, method: str, total_T: int,
              trial_seq: np.random.SeedSequence,
              sigma_u: float | None = None) -> TrialData:
    """One (method, trial) cell: warmup plus exploration, exact budget."""
    noise_seq, alg_seq, synth_seq = trial_seq.spawn(3)
    store = DataStore(scenario.model.phi)
    live = LiveSystem(scenario.model, noise_seq, budget=total_T, observer=store)
    rng = np.random.default_rng(alg_seq)
    if method == "task":
        data = run_algorithm1(scenario, live, store, rng,
                              synth_rng=np.random.default_rng(synth_seq))
    elif method in METHODS:
        data = run_baseline(scenario, method, live, store, rng, sigma_u=sigma_u)
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    assert live.episodes_used == total_T, (
        f"budget accounting violated: used {live.episodes_used} of {total_T}"
    )
    return data


# ---------------------------------------------------------------------------
# Reference values and checkpoint evaluation
# ---------------------------------------------------------------------------


@dataclass
class ReferenceValues:
    """Per-scenario constants shared by every trial of a run."""

    j_star: float
    j_star_se: float
    m_star: np.ndarray          # reduced task Hessian at the true parameters
    theta_star: np.ndarray | None = None


def compute_reference(scenario: Scenario, seed_seq: np.random.SeedSequence) -> ReferenceValues:
    """True optimal cost (large evaluation budget) and true-task curvature.

    For search-based synthesizers the reference controller gets a 4x pool and
    extra evaluation rollouts, so per-trial syntheses essentially never beat
    it and excess loss stays nonnegative up to Monte-Carlo noise.
    """
    rng = np.random.default_rng(seed_seq)
    if scenario.synthesizer_kind == "random_search":
        synthesis = synthesize_random_search(
            scenario.model, scenario.cost, scenario.family,
            4 * scenario.n_search_candidates, max(100, scenario.n_search_rollouts),
            rng, temperature_scale=scenario.temperature_scale,
        )
    else:
        synthesis = scenario.synthesize(scenario.model, rng)
    j_star, se = _policy_cost_se(scenario, synthesis.policy, scenario.n_star_rollouts, rng)
    H_star = scenario.task_hessian(scenario.model.A, rng)
    m_star = oed.reduce_hessian(H_star, scenario.model.phi.d_x, scenario.model.phi.d_phi)
    theta = getattr(synthesis.policy, "theta", None)
    return ReferenceValues(j_star, se, m_star,
                           np.asarray(theta, dtype=float) if theta is not None else None)


def _policy_cost_se(scenario: Scenario, policy, n: int,
                    rng: np.random.Generator) -> tuple[float, float]:
    if (
        isinstance(policy, control.LinearAffinePolicy)
        and scenario.model.phi.affine is not None
        and scenario.cost.quadratic is not None
    ):
        return control.affine_policy_cost(scenario.model, scenario.cost.quadratic, policy), 0.0
    return control.monte_carlo_cost_se(scenario.model, scenario.cost, policy, n, rng)


@dataclass
class CheckpointRecord:
    episodes: int
    excess_loss: float
    excess_loss_se: float
    frob_error: float
    design_score: float


def evaluate_checkpoints(scenario: Scenario, store: DataStore, schedule: list[int],
                         reference: ReferenceValues,
                         eval_seq: np.random.SeedSequence) -> list[CheckpointRecord]:
    """Fit, synthesize, and score the stored data at each scheduled count."""
    records = []
    children = eval_seq.spawn(len(schedule))
    for count, child in zip(schedule, children):
        if count > store.n_episodes:
            log.warning("checkpoint %d beyond stored episodes %d", count, store.n_episodes)
            continue
        rng = np.random.default_rng(child)
        A_hat = store.fit_at(count, scenario.estimator)
        try:
            synthesis = scenario.synthesize(scenario.model.with_A(A_hat), rng)
            j_val, se = _policy_cost_se(scenario, synthesis.policy,
                                        scenario.n_eval_rollouts, rng)
        except SynthesisFailedError:
            j_val, se = float("inf"), float("inf")
        excess = j_val - reference.j_star
        excess_se = math.sqrt(se**2 + reference.j_star_se**2) if math.isfinite(se) else se
        lam, _ = store.stats_at(count)
        try:
            score = estimation.design_score(reference.m_star, Covariates(lam, count))
        except (SingularCovarianceError, IllConditionedError):
            score = float("inf")
        records.append(CheckpointRecord(
            episodes=count,
            excess_loss=float(excess),
            excess_loss_se=float(excess_se),
            frob_error=float(np.linalg.norm(A_hat - scenario.model.A)),
            design_score=float(score),
        ))
    return records


def default_schedule(scenario: Scenario, total_T: int) -> list[int]:
    """Warmup point, powers of two above it, and the final budget."""
    pts = {scenario.n_warmup, total_T}
    p = 1
    while p <= total_T:
        if p > scenario.n_warmup:
            pts.add(p)
        p *= 2
    return sorted(pts)
