"""Experiment design over the unknown covariance hull of exploration policies.

The central loop (``dynamic_oed``) is conditional gradient descent on a smooth
convex design objective, where each descent direction is obtained by handing a
gradient-induced quadratic feature cost to a regret oracle that interacts with
the live system.  The practical oracle is a Thompson-sampling + sampling-MPC
learner.  ``min_eig`` and ``learn_exp_policies`` compose the loop into the
full-rank bootstrap and the per-epoch policy-learning routine.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .control import CostFunction
from .dynamics import Covariates, FeatureMap, LiveSystem, SystemModel, Trajectory
from .errors import (
    BudgetExhaustedError,
    ConfigurationError,
    DesignFailedError,
    DivergedRolloutError,
    MinEigTimeoutError,
)
from .estimation import sum_diagonal_blocks

log = logging.getLogger("task_oed.oed")

COST_NORM_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# Design objectives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignObjective:
    """A smooth convex functional over d_phi x d_phi covariances.

    ``value`` and ``grad`` operate on the per-episode-normalized covariance.
    The gradient is the symmetric matrix Xi with directional derivative
    <Xi, G> along any symmetric direction G.
    """

    kind: str
    weight: np.ndarray   # M for weighted A-opt, identity for trace-inverse
    gamma0: np.ndarray   # regularizer added inside the inverse

    def _shifted(self, lam: np.ndarray) -> np.ndarray:
        return lam + self.gamma0

    def value(self, lam: np.ndarray) -> float:
        S = self._shifted(lam)
        return float(np.trace(np.linalg.solve(S, self.weight)))

    def grad(self, lam: np.ndarray) -> np.ndarray:
        S = self._shifted(lam)
        Sinv = np.linalg.inv(S)
        G = -Sinv @ self.weight @ Sinv
        return 0.5 * (G + G.T)


def weighted_a_opt(M: np.ndarray, gamma0: np.ndarray,
                   floor: float = 1e-8) -> DesignObjective:
    """tr(M (Lambda + Gamma0)^{-1}) with a tiny diagonal floor on Gamma0.

    The floor keeps the objective finite while early covariates are rank
    deficient (exactly-zero feature coordinates are routine before the first
    full-rank round); it is orders of magnitude below any informative data.
    """
    M = 0.5 * (M + M.T)
    d = M.shape[0]
    scale = max(1.0, float(np.trace(gamma0)) / d)
    gamma = gamma0 + floor * scale * np.eye(d)
    return DesignObjective("weighted_a_opt", M, gamma)


def reg_trace_inverse(lam_reg: float, d_phi: int) -> DesignObjective:
    """tr((Lambda + lam_reg I)^{-1}), the full-rank collection objective."""
    if lam_reg <= 0:
        raise ConfigurationError("lam_reg must be positive")
    return DesignObjective("reg_trace_inverse", np.eye(d_phi), lam_reg * np.eye(d_phi))


def reduce_hessian(hessian, d_x: int, d_phi: int) -> np.ndarray:
    """Sum of the d_x diagonal d_phi-blocks of a lifted vec(A)-space matrix.

    Makes tr(H (I (x) Lambda)^{-1}) computable as tr(M Lambda^{-1}); the
    equivalence is pinned by the dense-Kronecker oracle test.
    """
    H = np.asarray(getattr(hessian, "matrix", hessian), dtype=float)
    return sum_diagonal_blocks(H, d_x, d_phi)


# ---------------------------------------------------------------------------
# Theory-facing constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoryConstants:
    """Constants the guarantees are stated in; recorded config, not tuning.

    ``D`` bounds the trace of the per-episode lifted feature matrix
    (d_x * H * B_phi^2); the oracle regret constants describe the assumed
    regret envelope C_R log^{p_R}(T/delta) T^alpha.
    """

    D: float
    d_psi: int
    lam_min_star: float
    C_R: float
    p_R: float = 1.5
    alpha: float = 0.5
    M_bound: float = 1.0

    @classmethod
    def for_model(cls, model: SystemModel, B_phi: float,
                  lam_min_star: float = 0.01) -> "TheoryConstants":
        phi = model.phi
        H = model.horizon
        sigma = max(model.noise_std, 1e-6)
        C_R = H * math.sqrt(phi.d_phi * (phi.d_phi + phi.d_x + model.op_norm_bound)) * \
            math.log(1.0 + B_phi * H / sigma)
        return cls(
            D=phi.d_x * H * B_phi**2,
            d_psi=phi.d_x * phi.d_phi,
            lam_min_star=lam_min_star,
            C_R=C_R,
        )


# ---------------------------------------------------------------------------
# Episode bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    """One oracle episode: trajectory, per-step features, and their outer sum."""

    trajectory: Trajectory | None
    phis: np.ndarray      # (H_eff, d_phi)
    psi: np.ndarray       # (d_phi, d_phi) = phis^T phis
    policy: object
    diverged: bool = False


def episode_result(traj: Trajectory, phi: FeatureMap, policy,
                   diverged: bool = False) -> EpisodeResult:
    F = traj.features(phi)
    return EpisodeResult(traj, F, F.T @ F, policy, diverged)


@dataclass
class OedOutcome:
    """What a conditional-gradient run hands back.

    ``covariates`` is the unnormalized sum over every episode played
    (warmup included); every policy is replayable from its stored seed.
    """

    covariates: Covariates
    policies: list
    episodes_used: int
    final_iterate: np.ndarray         # per-episode-normalized average
    values: list[float] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)
    diverged_episodes: list[int] = field(default_factory=list)
    episode_results: list[EpisodeResult] = field(default_factory=list)


# ---------------------------------------------------------------------------
# DynamicOED: conditional gradient via a regret oracle
# ---------------------------------------------------------------------------


def dynamic_oed(
    objective: DesignObjective,
    N: int,
    K: int,
    oracle: Callable[[np.ndarray, int], list[EpisodeResult]],
    warmup: Callable[[int], list[EpisodeResult]],
    rng: np.random.Generator | None = None,
) -> OedOutcome:
    """Frank-Wolfe over the policy-induced covariance hull.

    Iterate 0 comes from K warmup episodes; at iteration n the objective
    gradient, normalized by the running empirical episode-cost bound, becomes
    the oracle's cost matrix for K more episodes, and the iterate moves with
    step 1/(n+1).  The returned covariates are the unnormalized feature sum
    over all (N+1)K episodes, which equals the final iterate times (N+1)K.
    """
    if N < 1 or K < 1:
        raise ConfigurationError("need N >= 1 and K >= 1")
    results = list(warmup(K))
    gamma = sum(r.psi for r in results) / K
    d = gamma.shape[0]
    values = [objective.value(gamma)]
    gaps: list[float] = []
    for n in range(1, N + 1):
        xi = objective.grad(gamma)
        if not np.all(np.isfinite(xi)):
            raise DesignFailedError(f"non-finite objective gradient at iteration {n}")
        m_hat = COST_NORM_FLOOR
        for r in results:
            q = np.einsum("hi,ij,hj->h", r.phis, xi, r.phis)
            m_hat = max(m_hat, float(np.abs(q).sum()))
        batch = oracle(xi / m_hat, K)
        results.extend(batch)
        y = sum(r.psi for r in batch) / K
        gaps.append(float(np.vdot(xi, gamma - y)))
        step = 1.0 / (n + 1)
        gamma = (1.0 - step) * gamma + step * y
        values.append(objective.value(gamma))
    total = sum(r.psi for r in results)
    cov = Covariates(0.5 * (total + total.T), len(results))
    return OedOutcome(
        covariates=cov,
        policies=[r.policy for r in results],
        episodes_used=len(results),
        final_iterate=gamma,
        values=values,
        gaps=gaps,
        diverged_episodes=[i for i, r in enumerate(results) if r.diverged],
        episode_results=results,
    )


# ---------------------------------------------------------------------------
# Thompson-sampling + sampling-MPC regret oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MpcConfig:
    """Sampling-MPC knobs: candidate count, re-planning, and power budget."""

    n_candidates: int = 256
    replan: bool = True
    power_budget: float = 1.0   # gamma^2 bound on sum_h ||u_h||^2
    posterior_ridge: float | None = None  # None: floor from op_norm_bound


@dataclass(frozen=True)
class ScoreSpec:
    """What the MPC candidate scorer minimizes over simulated input tails."""

    kind: str  # "quad_features" | "lambda_min" | "cost_min"
    xi: np.ndarray | None = None
    lam_base: np.ndarray | None = None
    cost: CostFunction | None = None


class ThompsonMpcPolicy:
    """Receding-horizon input selection on a sampled model.

    At each step the policy samples candidate input tails inside the remaining
    power budget, simulates them (noiselessly) on its stored model sample, and
    plays the first input of the best tail.  The candidate stream is seeded,
    so the policy replays identically in distribution.
    """

    family = "thompson_mpc"

    def __init__(self, model_sample: SystemModel, score: ScoreSpec,
                 power_budget: float, n_candidates: int, seed: int,
                 replan: bool = True):
        self.model_sample = model_sample
        self.score = score
        self.power_budget = float(power_budget)
        self.n_candidates = int(n_candidates)
        self.seed = int(seed)
        self.replan = replan
        self._rng = np.random.default_rng(self.seed)
        self._plan: np.ndarray | None = None

    def reset(self) -> None:
        self._rng = np.random.default_rng(self.seed)
        self._plan = None

    def _sample_tails(self, remaining_power: float, length: int) -> np.ndarray:
        """(n_candidates, length, d_u) tails with sum ||u||^2 <= remaining_power.

        Directions are uniform on the sphere at per-step power
        remaining_power / length, jittered by a uniform radial scale, so the
        budget is feasible by construction.
        """
        d_u = self.model_sample.phi.d_u
        n = self.n_candidates
        dirs = self._rng.standard_normal((n, length, d_u))
        norms = np.linalg.norm(dirs, axis=2, keepdims=True)
        norms[norms == 0] = 1.0
        dirs /= norms
        radius = math.sqrt(max(remaining_power, 0.0) / max(length, 1))
        scales = self._rng.uniform(0.0, 1.0, size=(n, length, 1))
        return radius * scales * dirs

    def _score_tails(self, h: int, x: np.ndarray, tails: np.ndarray,
                     prefix_psi: np.ndarray | None) -> np.ndarray:
        """Objective value of each candidate tail simulated on the model sample."""
        n, L, _ = tails.shape
        phi = self.model_sample.phi
        A = self.model_sample.A
        spec = self.score
        X = np.broadcast_to(x, (n, x.size)).copy()
        quad_total = np.zeros(n)
        psi_total = None
        if spec.kind == "lambda_min":
            psi_total = np.zeros((n, phi.d_phi, phi.d_phi))
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(L):
                U = tails[:, t]
                F = phi.eval_batch(X, U)
                if spec.kind == "quad_features":
                    quad_total += ((F @ spec.xi) * F).sum(axis=1)
                elif spec.kind == "lambda_min":
                    psi_total += F[:, :, None] * F[:, None, :]
                X_next = F @ A.T
                if spec.kind == "cost_min":
                    quad_total += spec.cost.per_step_batch(h + t, X_next, U)
                X = X_next
        if spec.kind == "lambda_min":
            base = spec.lam_base if spec.lam_base is not None else 0.0
            S = psi_total + base
            if prefix_psi is not None:
                S = S + prefix_psi
            bad = ~np.all(np.isfinite(S), axis=(1, 2))
            S = np.where(bad[:, None, None], np.eye(S.shape[1]), S)
            eigs = np.linalg.eigvalsh(S)
            eigs[bad] = -np.inf
            return _lex_eig_scores(eigs)
        return np.where(np.isfinite(quad_total), quad_total, np.inf)

    def act(self, h: int, states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        model = self.model_sample
        H = model.horizon
        if not self.replan and self._plan is not None:
            return self._plan[h]
        spent = float(np.sum(inputs**2))
        remaining = max(self.power_budget - spent, 0.0)
        length = H - h
        tails = self._sample_tails(remaining, length)
        prefix_psi = None
        if self.score.kind == "lambda_min" and h > 0:
            F = model.phi.eval_batch(states[:h], inputs[:h])
            prefix_psi = F.T @ F
        scores = self._score_tails(h, states[h], tails, prefix_psi)
        best = int(np.argmin(scores)) if scores.ndim == 1 else _lex_argmin(scores)
        if not self.replan:
            self._plan = np.concatenate([inputs[:h], tails[best]], axis=0)
            return self._plan[h]
        return tails[best, 0]


def _lex_eig_scores(eigs: np.ndarray) -> np.ndarray:
    """Rank candidates so argmin maximizes the sorted-eigenvalue tuple.

    Maximizing lambda_min with lexicographic refinement on the higher
    eigenvalues; ties break toward the lowest candidate index.  Returns a
    score vector whose argmin is the lexicographic winner.
    """
    n, d = eigs.shape
    keys = tuple(-eigs[:, k] for k in range(d - 1, -1, -1))
    order = np.lexsort(keys)
    scores = np.empty(n)
    scores[order] = np.arange(n, dtype=float)
    return scores


def _lex_argmin(scores: np.ndarray) -> int:
    return int(np.argmin(scores))


def sample_model_rows(A_hat: np.ndarray, lam: np.ndarray, sigma_w: float,
                      ridge: float, rng: np.random.Generator) -> np.ndarray:
    """Rowwise Gaussian draw A ~ N(A_hat, sigma_w^2 (lam + ridge I)^{-1})."""
    d = lam.shape[0]
    S = lam + ridge * np.eye(d)
    L = np.linalg.cholesky(0.5 * (S + S.T))
    Z = rng.standard_normal((A_hat.shape[0], d))
    import scipy.linalg

    delta = scipy.linalg.solve_triangular(L.T, Z.T, lower=False).T
    return A_hat + sigma_w * delta


def posterior_ridge(model: SystemModel, cfg: MpcConfig) -> float:
    """Ridge regularizing the Thompson posterior in unexplored coordinates.

    Floors the estimation ridge with sigma_w^2 / B_A^2 so that prior draws
    for never-excited coordinates stay at the scale of the operator-norm
    bound rather than diverging.
    """
    if cfg.posterior_ridge is not None:
        return cfg.posterior_ridge
    return (model.noise_std**2) / max(model.op_norm_bound, 1e-6) ** 2


def thompson_mpc_oracle(
    A_hat: np.ndarray,
    cov: Covariates,
    sigma_w: float,
    cost_matrix: np.ndarray,
    K: int,
    mpc_cfg: MpcConfig,
    live_system: LiveSystem,
    rng: np.random.Generator,
) -> list[EpisodeResult]:
    """K episodes of Thompson-sampled receding-horizon exploration.

    Per episode: draw a model sample from the rowwise least-squares posterior,
    run one sampling-MPC episode on the live system minimizing the quadratic
    feature cost, then fold the observed episode back into the posterior.
    Live-system divergence is recorded per episode, not raised.
    """
    model = live_system.model
    phi = model.phi
    ridge = posterior_ridge(model, mpc_cfg)
    lam = cov.lam.copy()
    # Cross moment consistent with the supplied estimate.
    cross = A_hat @ (lam + ridge * np.eye(lam.shape[0]))
    results: list[EpisodeResult] = []
    for k in range(K):
        S = lam + ridge * np.eye(lam.shape[0])
        A_cur = np.linalg.solve(S, cross.T).T
        A_til = sample_model_rows(A_cur, lam, sigma_w, ridge, rng)
        sample = SystemModel(A_til, phi, 0.0, model.horizon,
                             model.op_norm_bound, model.x1)
        policy = ThompsonMpcPolicy(
            sample,
            ScoreSpec("quad_features", xi=cost_matrix),
            mpc_cfg.power_budget,
            mpc_cfg.n_candidates,
            seed=int(rng.integers(2**63)),
            replan=mpc_cfg.replan,
        )
        try:
            traj = live_system.run_episode(policy)
            res = episode_result(traj, phi, policy)
        except DivergedRolloutError as exc:
            if exc.partial is not None:
                res = episode_result(exc.partial, phi, policy, diverged=True)
            else:
                res = EpisodeResult(None, np.zeros((0, phi.d_phi)),
                                    np.zeros((phi.d_phi, phi.d_phi)), policy, True)
        if res.phis.shape[0]:
            F = res.phis
            lam = lam + F.T @ F
            states = res.trajectory.states
            cross = cross + states[1:].T @ F
        results.append(res)
    return results


# ---------------------------------------------------------------------------
# MinEig: collect full-rank covariates
# ---------------------------------------------------------------------------


@dataclass
class MinEigResult:
    policies: list
    covariates: Covariates
    episodes_used: int
    lambda_min: float
    rounds: int


def round_sizes(j: int) -> tuple[int, int, int]:
    """Doubling schedule N_j = ceil(2^{j/3}) - 1, K_j = ceil(2^{2j/3})."""
    N = max(1, math.ceil(2 ** (j / 3)) - 1)
    K = math.ceil(2 ** (2 * j / 3))
    return N, K, (N + 1) * K


def sizes_for_budget(T: float) -> tuple[int, int]:
    """N, K sized directly from an episode budget: K ~ T^{2/3}, N ~ T^{1/3}."""
    T = max(2.0, float(T))
    N = max(1, math.ceil(T ** (1.0 / 3.0)) - 1)
    K = math.ceil(T ** (2.0 / 3.0))
    return N, K


def min_eig(
    oracle_factory: Callable[[], Callable[[np.ndarray, int], list[EpisodeResult]]],
    warmup: Callable[[int], list[EpisodeResult]],
    d_phi: int,
    target_scale: float,
    delta: float,
    constants: TheoryConstants,
    practical_threshold: float | None,
    budget_cap: int,
    rng: np.random.Generator,
    strict_theory: bool = False,
    start_round: int = 1,
) -> MinEigResult:
    """Doubling rounds of trace-inverse design until covariates are full rank.

    Termination compares lambda_min of the round's collected covariates to a
    per-episode target times the round's episode count (practical mode) or to
    the theory criterion 12544 D d_psi log(...) (strict mode, astronomically
    conservative at benchmark scale).  Exceeding ``budget_cap`` raises
    MinEigTimeoutError carrying the best round so far.
    """
    best: MinEigResult | None = None
    episodes = 0
    j = start_round
    while True:
        N_j, K_j, T_j = round_sizes(j)
        if episodes + T_j > budget_cap:
            raise MinEigTimeoutError(
                best.lambda_min if best else 0.0, partial=best,
            )
        lam_j = T_j ** (-1.0 / 18.0)
        out = dynamic_oed(reg_trace_inverse(lam_j, d_phi), N_j, K_j,
                          oracle_factory(), warmup, rng)
        episodes += out.episodes_used
        lmin = float(np.linalg.eigvalsh(out.covariates.lam)[0])
        result = MinEigResult(out.policies, out.covariates, episodes, lmin, j)
        if best is None or lmin > best.lambda_min:
            best = MinEigResult(out.policies, out.covariates, episodes, lmin, j)
        if strict_theory:
            threshold = 12544.0 * constants.D * constants.d_psi * math.log(
                2.0 * target_scale * (2.0 + 32.0 * T_j) / delta
            )
        else:
            per_episode = practical_threshold if practical_threshold is not None else 0.0
            threshold = per_episode * T_j
        log.debug("min_eig round %d: lambda_min=%.4g threshold=%.4g", j, lmin, threshold)
        if lmin >= threshold:
            return result
        j += 1


# ---------------------------------------------------------------------------
# LearnExpPi: learn exploration policies for a task Hessian
# ---------------------------------------------------------------------------


@dataclass
class LearnExpResult:
    """Policies whose replay approximately minimizes the weighted design score.

    ``policies`` is a multiset: the full-rank policies repeated to the round's
    scale plus one copy of every conditional-gradient policy, so one sweep of
    replays reproduces ``covariates`` in distribution.
    """

    policies: list
    covariates: Covariates
    gamma0: np.ndarray
    episodes_used: int
    warning: bool
    conditions: dict
    mineig: MinEigResult
    objective_value: float


def learn_exp_policies(
    task_hessian,
    d_x: int,
    d_phi: int,
    scale: float,
    delta: float,
    oracle_factory: Callable[[], Callable[[np.ndarray, int], list[EpisodeResult]]],
    warmup: Callable[[int], list[EpisodeResult]],
    replay: Callable[[list], list[EpisodeResult]],
    rng: np.random.Generator,
    constants: TheoryConstants,
    budget_cap: int,
    mineig_cached: MinEigResult | None = None,
    mineig_threshold: float | None = None,
    mineig_cap: int | None = None,
    objective_floor: float = 1e-8,
    max_rounds: int | None = None,
) -> LearnExpResult:
    """Rounds of (full-rank regularizer, weighted A-opt conditional gradient).

    Terminates when the practical analogues of the replay conditions hold:
    (a) the full-rank policy set fits the round scale, (b) the Frank-Wolfe
    duality-gap estimate is at most half the objective, (c, d) empirical
    replay-concentration margins computed from the observed episode spread.
    Hitting ``budget_cap`` (or ``max_rounds``, for callers that drive their
    own doubling) returns the best round so far with a warning flag.
    """
    M = reduce_hessian(task_hessian, d_x, d_phi)
    episodes = 0
    mineig = mineig_cached
    best: LearnExpResult | None = None
    round_idx = 0
    T_i = max(2.0, float(scale))
    while True:
        round_idx += 1
        if mineig is None:
            cap = mineig_cap if mineig_cap is not None else budget_cap
            try:
                mineig = min_eig(
                    oracle_factory, warmup, d_phi, target_scale=T_i, delta=delta,
                    constants=constants, practical_threshold=mineig_threshold,
                    budget_cap=min(cap, budget_cap - episodes), rng=rng,
                )
            except MinEigTimeoutError as exc:
                if exc.partial is None:
                    raise
                mineig = exc.partial
                log.warning("min_eig hit its cap; continuing with lambda_min=%.3g",
                            mineig.lambda_min)
            episodes += mineig.episodes_used

        n_mineig = max(len(mineig.policies), 1)
        n_replays = math.ceil(T_i / n_mineig)
        gamma0 = np.zeros((d_phi, d_phi))
        replay_results: list[EpisodeResult] = []
        for _ in range(n_replays):
            batch = replay(mineig.policies)
            replay_results.extend(batch)
            gamma0 += sum(r.psi for r in batch)
        episodes += len(replay_results)

        N_i, K_i = sizes_for_budget(T_i)
        objective = weighted_a_opt(M, gamma0 / T_i, floor=objective_floor)
        out = dynamic_oed(objective, N_i, K_i, oracle_factory(), warmup, rng)
        episodes += out.episodes_used

        policies = list(mineig.policies) * n_replays + list(out.policies)
        total = Covariates(out.covariates.lam + gamma0,
                           out.covariates.episode_count + len(replay_results))
        conditions = _replay_conditions(
            M, out, replay_results, gamma0, n_mineig, T_i, len(policies)
        )
        value = float(np.trace(np.linalg.solve(
            total.lam + objective.gamma0 - gamma0 / T_i, M)))
        result = LearnExpResult(
            policies=policies,
            covariates=total,
            gamma0=gamma0,
            episodes_used=episodes,
            warning=False,
            conditions=conditions,
            mineig=mineig,
            objective_value=value,
        )
        if best is None or value < best.objective_value:
            best = result
        if all(conditions.values()):
            return result
        next_round_cost = 2 * (2 * T_i)  # replays plus conditional gradient, doubled
        if (max_rounds is not None and round_idx >= max_rounds) or (
            episodes + next_round_cost > budget_cap
        ):
            best.warning = True
            best.conditions = conditions
            return best
        T_i *= 2.0


def _replay_conditions(M, out: OedOutcome, replay_results, gamma0, n_mineig,
                       T_i, n_out) -> dict:
    """Practical analogues of the termination inequalities.

    Theory constants are replaced by the empirical per-episode feature spread;
    a zero objective weight makes everything after (a) vacuous.
    """
    cond = {"mineig_fits_scale": n_mineig <= T_i}
    trM = float(np.trace(M))
    if trM <= 1e-300:
        cond.update(fw_gap=True, score_margin=True, eig_margin=True)
        return cond
    gamma_out = out.covariates.lam + gamma0
    lmin = float(np.linalg.eigvalsh(gamma_out)[0])
    score = float(np.trace(np.linalg.solve(
        gamma_out + 1e-12 * max(1.0, np.trace(gamma_out)) * np.eye(gamma_out.shape[0]), M)))
    gap = out.gaps[-1] if out.gaps else np.inf
    cond["fw_gap"] = bool(gap <= 0.5 * out.values[-1])
    episodes = list(out.episode_results) + list(replay_results)
    psis = np.array([r.psi for r in episodes])
    spread = float(np.linalg.norm(psis - psis.mean(axis=0), axis=(1, 2)).mean())
    radius = spread * math.sqrt(max(n_out, 1))
    cond["score_margin"] = bool(lmin > 0 and trM * radius * 2.0 / lmin**2 <= score)
    cond["eig_margin"] = bool(radius <= 0.5 * lmin)
    return cond
