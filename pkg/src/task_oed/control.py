"""Control-policy families, cost evaluation, and certainty-equivalence synthesis.

Cost convention (fixed package-wide): the step-h cost is charged on the input
u_h together with the state it produces, J = E[ sum_{h=1}^H cost_h(x_{h+1}, u_h) ].
The initial state is fixed (and zero in every benchmark scenario), so this
differs from charging concurrent pairs only by constants that cancel in excess
loss; it is the convention under which the closed-form regulator below is
exactly optimal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import (
    DIVERGENCE_NORM,
    AffineStructure,
    FeatureMap,
    SystemModel,
    rollout,
    simulate_batch,
)
from .errors import ConfigurationError, DivergedRolloutError, SynthesisFailedError


@dataclass(frozen=True)
class QuadraticCost:
    """Per-step cost (x - x_ref)^T Q (x - x_ref) + u^T R u, cross terms zero."""

    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        if self.x_ref is not None:
            object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float))


@dataclass(frozen=True)
class CostFunction:
    """Nonnegative per-step cost with a vectorized evaluator.

    ``per_step_batch(h, X, U)`` maps stacked (B, d_x), (B, d_u) rows to (B,)
    costs.  ``quadratic`` carries the (Q, R) spec when the cost has that form,
    which unlocks the closed-form evaluation path for affine systems.
    """

    name: str
    per_step_batch: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    quadratic: Optional[QuadraticCost] = None

    def per_step(self, h: int, x: np.ndarray, u: np.ndarray) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return float(self.per_step_batch(h, x[None, :], u[None, :])[0])

    @classmethod
    def from_quadratic(cls, name: str, quad: QuadraticCost) -> "CostFunction":
        Q, R, x_ref = quad.Q, quad.R, quad.x_ref

        def per_step_batch(h, X, U):
            dX = X - x_ref if x_ref is not None else X
            return ((dX @ Q) * dX).sum(axis=1) + ((U @ R) * U).sum(axis=1)

        return cls(name, per_step_batch, quadratic=quad)


def trajectory_cost_batch(cost: CostFunction, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Total episode cost for batched trajectories; diverged rollouts get +inf.

    X is (B, H+1, d_x), U is (B, H, d_u).  A rollout counts as diverged when
    any state is non-finite or exceeds the divergence norm.
    """
    B, H = U.shape[0], U.shape[1]
    total = np.zeros(B)
    with np.errstate(over="ignore", invalid="ignore"):
        for h in range(H):
            total += cost.per_step_batch(h, X[:, h + 1], U[:, h])
        diverged = np.linalg.norm(X, axis=2).max(axis=1) > DIVERGENCE_NORM
    bad = diverged | ~np.isfinite(total)
    return np.where(bad, np.inf, total)


# ---------------------------------------------------------------------------
# Policy families
# ---------------------------------------------------------------------------


class LinearAffinePolicy:
    """Time-varying linear-affine state feedback u_h = F_h x + f_h."""

    family = "linear_affine"

    def __init__(self, fb: np.ndarray, offset: np.ndarray):
        self.fb = np.asarray(fb, dtype=float)        # (H, d_u, d_x)
        self.offset = np.asarray(offset, dtype=float)  # (H, d_u)
        if self.fb.ndim != 3 or self.offset.shape != self.fb.shape[:2]:
            raise ConfigurationError("fb must be (H, d_u, d_x) and offset (H, d_u)")

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.fb.ravel(), self.offset.ravel()])

    def reset(self) -> None:
        pass

    def act_batch(self, h: int, X: np.ndarray) -> np.ndarray:
        return X @ self.fb[h].T + self.offset[h]

    def act(self, h, states, inputs) -> np.ndarray:
        return self.act_batch(h, states[-1][None, :])[0]


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2 * np.pi) - np.pi


class CarHierarchicalPolicy:
    """Four-parameter hierarchical controller for the planar car.

    A PD rule on position/velocity produces a goal push direction; the gas
    input is its projection on the current heading and the steering input
    regulates the heading toward the push direction.
    """

    family = "car_hierarchical"

    def __init__(self, theta: np.ndarray):
        self.theta = np.asarray(theta, dtype=float).reshape(4)

    def reset(self) -> None:
        pass

    def act_batch(self, h: int, X: np.ndarray) -> np.ndarray:
        return car_act_theta_batch(self.theta[None, :], X)

    def act(self, h, states, inputs) -> np.ndarray:
        return self.act_batch(h, states[-1][None, :])[0]


def car_act_theta_batch(thetas: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Car controller vectorized over rows; thetas is (B, 4) or (1, 4)."""
    t1, t2, t3, t4 = thetas[:, 0], thetas[:, 1], thetas[:, 2], thetas[:, 3]
    ug = -t1[:, None] * X[:, 0:2] - t2[:, None] * X[:, 2:4]
    heading = X[:, 4]
    c, s = np.cos(heading), np.sin(heading)
    gas = ug[:, 0] * c + ug[:, 1] * s
    beta = np.arctan2(ug[:, 1], ug[:, 0])
    steer = -t3 * _wrap_angle(heading - beta) - t4 * X[:, 5]
    return np.stack([gas, steer], axis=1)


class BumpMatchingPolicy:
    """Controller for the 1-D bump system, mirroring its feature structure.

    u = theta_1 x + sum_i theta_{i+1} bump_i(x) + theta_12.
    """

    family = "bump_matching"

    def __init__(self, theta: np.ndarray, centers: np.ndarray):
        self.theta = np.asarray(theta, dtype=float).reshape(-1)
        self.centers = np.asarray(centers, dtype=float)
        if self.theta.size != self.centers.size + 2:
            raise ConfigurationError("theta must have one entry per bump plus gain and offset")

    def reset(self) -> None:
        pass

    def act_batch(self, h: int, X: np.ndarray) -> np.ndarray:
        return bump_act_theta_batch(self.theta[None, :], X, self.centers)

    def act(self, h, states, inputs) -> np.ndarray:
        return self.act_batch(h, states[-1][None, :])[0]


def bump_features(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """max(1 - 100 (x - c_i)^2, 0) for each center; x is (B,)."""
    return np.maximum(1.0 - 100.0 * (x[:, None] - centers[None, :]) ** 2, 0.0)


def bump_act_theta_batch(thetas: np.ndarray, X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    x = X[:, 0]
    bumps = bump_features(x, centers)
    u = thetas[:, 0] * x + np.sum(bumps * thetas[:, 1:-1], axis=1) + thetas[:, -1]
    return u[:, None]


@dataclass
class CandidatePool:
    """Random-search pool retained for softmin differentiation."""

    thetas: np.ndarray       # (n, d_theta)
    costs: np.ndarray        # (n,)
    weights: np.ndarray      # (n,) softmin weights
    temperature: float


@dataclass
class SynthesisResult:
    policy: object
    estimated_cost: float
    candidate_pool: CandidatePool | None = None


@dataclass(frozen=True)
class SamplingFamily:
    """A searchable controller family: a theta box plus vectorized evaluation.

    ``sampler`` may replace the default uniform-box draw (e.g. to pin an
    explicit candidate pool).
    """

    name: str
    d_theta: int
    low: np.ndarray
    high: np.ndarray
    build: Callable[[np.ndarray], object]
    act_theta_batch: Callable[[np.ndarray, int, np.ndarray], np.ndarray]
    sampler: Optional[Callable[[int, np.random.Generator], np.ndarray]] = None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.sampler is not None:
            return self.sampler(n, rng)
        return rng.uniform(self.low, self.high, size=(n, self.d_theta))


def car_family() -> SamplingFamily:
    return SamplingFamily(
        name="car_hierarchical",
        d_theta=4,
        low=np.zeros(4),
        high=2.0 * np.ones(4),
        build=lambda th: CarHierarchicalPolicy(th),
        act_theta_batch=lambda thetas, h, X: car_act_theta_batch(thetas, X),
    )


# ---------------------------------------------------------------------------
# Cost evaluation
# ---------------------------------------------------------------------------


def _affine_parts(model: SystemModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    aff = model.phi.affine
    if aff is None:
        raise ConfigurationError("model's feature map has no [x, u, 1] structure")
    return aff.split(model.A)


def affine_policy_cost(
    model: SystemModel, cost: QuadraticCost, policy: LinearAffinePolicy
) -> float:
    """Exact expected cost of an affine policy on an affine-linear system."""
    A, Bm, c = _affine_parts(model)
    return affine_policy_cost_batch(
        A, Bm, c, model.noise_std, model.horizon, cost,
        policy.fb[None, ...], policy.offset[None, ...], model.x1,
    )[0]


def affine_policy_cost_batch(
    A: np.ndarray,
    Bm: np.ndarray,
    c: np.ndarray,
    noise_std: float,
    H: int,
    cost: QuadraticCost,
    fb: np.ndarray,
    offset: np.ndarray,
    x1: np.ndarray,
) -> np.ndarray:
    """Quadratic cost propagation for a stack of affine policies.

    fb is (P, H, d_u, d_x), offset is (P, H, d_u); the system may also be a
    stack (A (P, d_x, d_x) etc.).  Returns (P,) exact expected costs.
    """
    if cost.x_ref is not None and np.any(cost.x_ref):
        raise ConfigurationError("closed-form path requires a zero-centered cost")
    P_count = fb.shape[0]
    d_x = A.shape[-1]
    Q, R = cost.Q, cost.R
    m = np.broadcast_to(x1, (P_count, d_x)).copy()
    S = np.zeros((P_count, d_x, d_x))
    total = np.zeros(P_count)
    sig2 = noise_std**2
    eye = sig2 * np.eye(d_x)
    if A.ndim == 3:
        A_, B_, c_ = A, Bm, c
    else:
        A_, B_, c_ = A[None], Bm[None], c[None]
    for h in range(H):
        F, f = fb[:, h], offset[:, h]
        u_mean = (F @ m[..., None])[..., 0] + f
        total += ((u_mean @ R) * u_mean).sum(axis=1)
        RFS = (R @ F) @ S  # tr(F^T R F S) = sum(F o (R F S))
        total += (F * RFS).sum(axis=(1, 2))
        Acl = A_ + B_ @ F
        m = (Acl @ m[..., None])[..., 0] + (B_ @ f[..., None])[..., 0] + c_
        S = Acl @ S @ Acl.transpose(0, 2, 1) + eye
        total += ((m @ Q) * m).sum(axis=1)
        total += (S * Q).sum(axis=(1, 2))
    return total


def evaluate_cost(
    model: SystemModel,
    cost: CostFunction,
    policy,
    n_rollouts: int,
    rng: np.random.Generator,
) -> float:
    """Mean episode cost of ``policy`` on ``model``.

    Linear-affine policies on affine-linear models with quadratic cost are
    evaluated exactly in closed form; everything else is Monte Carlo.
    Diverged rollouts contribute +inf (recorded, not thrown) so unstable
    controllers rank last.
    """
    if n_rollouts < 1:
        raise ConfigurationError("n_rollouts must be >= 1")
    if (
        isinstance(policy, LinearAffinePolicy)
        and model.phi.affine is not None
        and cost.quadratic is not None
    ):
        return affine_policy_cost(model, cost.quadratic, policy)
    return monte_carlo_cost(model, cost, policy, n_rollouts, rng)


def monte_carlo_cost(
    model: SystemModel,
    cost: CostFunction,
    policy,
    n_rollouts: int,
    rng: np.random.Generator,
) -> float:
    mean, _ = monte_carlo_cost_se(model, cost, policy, n_rollouts, rng)
    return mean


def monte_carlo_cost_se(
    model: SystemModel,
    cost: CostFunction,
    policy,
    n_rollouts: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte-Carlo cost with its standard error."""
    costs = rollout_costs(model, cost, policy, n_rollouts, rng)
    if not np.all(np.isfinite(costs)):
        return float("inf"), float("inf")
    if n_rollouts == 1:
        return float(costs[0]), 0.0
    return float(costs.mean()), float(costs.std(ddof=1) / np.sqrt(n_rollouts))


def rollout_costs(
    model: SystemModel,
    cost: CostFunction,
    policy,
    n_rollouts: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-rollout episode costs, batched when the policy is state feedback."""
    H, d_x = model.horizon, model.phi.d_x
    if hasattr(policy, "act_batch"):
        x0 = np.broadcast_to(model.x1, (n_rollouts, d_x))
        noise = (
            model.noise_std * rng.standard_normal((n_rollouts, H, d_x))
            if model.noise_std > 0
            else None
        )
        X, U = simulate_batch(model.A, model.phi, x0, H, policy.act_batch, noise)
        return trajectory_cost_batch(cost, X, U)
    out = np.empty(n_rollouts)
    for i in range(n_rollouts):
        try:
            traj = rollout(model, policy, rng)
        except DivergedRolloutError:
            out[i] = np.inf
            continue
        out[i] = trajectory_cost_batch(
            cost, traj.states[None, ...], traj.inputs[None, ...]
        )[0]
    return out


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def lqr_affine_batch(
    A: np.ndarray, Bm: np.ndarray, c: np.ndarray, Q: np.ndarray, R: np.ndarray, H: int
) -> tuple[np.ndarray, np.ndarray]:
    """Backward Riccati recursion with an affine value-function term.

    Dynamics blocks may be stacked (P, ...) for vectorized synthesis across a
    stack of models.  Returns feedback gains (P, H, d_u, d_x) and offsets
    (P, H, d_u) minimizing sum_h u_h^T R u_h + x_{h+1}^T Q x_{h+1}.
    """
    single = A.ndim == 2
    if single:
        A, Bm, c = A[None], Bm[None], c[None]
    P_count, d_x, d_u = A.shape[0], A.shape[1], Bm.shape[2]
    fb = np.empty((P_count, H, d_u, d_x))
    off = np.empty((P_count, H, d_u))
    # P, q track the quadratic/affine parts of the value of the *next* state.
    Pmat = np.zeros((P_count, d_x, d_x))
    q = np.zeros((P_count, d_x))
    BmT = Bm.transpose(0, 2, 1)
    for h in range(H - 1, -1, -1):
        Pt = Pmat + Q  # arrival cost folds into the continuation value
        BtP = BmT @ Pt
        G = R + BtP @ Bm
        K = -np.linalg.solve(G, BtP @ A)
        rhs = BmT @ ((Pt @ c[..., None]) + q[..., None])
        k = -np.linalg.solve(G, rhs)[..., 0]
        fb[:, h] = K
        off[:, h] = k
        Acl = A + Bm @ K
        Bk_c = (Bm @ k[..., None])[..., 0] + c
        q = (K.transpose(0, 2, 1) @ ((k @ R)[..., None]))[..., 0] + (
            Acl.transpose(0, 2, 1) @ ((Pt @ Bk_c[..., None]) + q[..., None])
        )[..., 0]
        Pmat = K.transpose(0, 2, 1) @ (R @ K) + Acl.transpose(0, 2, 1) @ Pt @ Acl
        Pmat = 0.5 * (Pmat + np.transpose(Pmat, (0, 2, 1)))
    return fb, off


def synthesize_lqr_affine(model_hat: SystemModel, cost: QuadraticCost) -> SynthesisResult:
    """Closed-form certainty-equivalence synthesis on an affine-linear model."""
    eigs = np.linalg.eigvalsh(cost.R)
    if eigs[0] <= 0:
        raise ConfigurationError("R must be positive definite")
    A, Bm, c = _affine_parts(model_hat)
    fb, off = lqr_affine_batch(A, Bm, c, cost.Q, cost.R, model_hat.horizon)
    policy = LinearAffinePolicy(fb[0], off[0])
    est = affine_policy_cost(model_hat, cost, policy)
    return SynthesisResult(policy=policy, estimated_cost=est)


def pool_costs_on_model(
    model: SystemModel,
    cost: CostFunction,
    family: SamplingFamily,
    thetas: np.ndarray,
    noise: np.ndarray | None,
) -> np.ndarray:
    """Mean episode cost of each candidate theta, with common random numbers.

    ``noise`` is (n_eval, H, d_x) shared across candidates (None for the
    noiseless model).  Returns (n_candidates,) mean costs; diverged candidates
    get +inf.  Fused simulate-and-score loop: no state history is stored.
    """
    n_cand = thetas.shape[0]
    H, d_x = model.horizon, model.phi.d_x
    n_eval = 1 if noise is None else noise.shape[0]
    B = n_cand * n_eval
    big_thetas = np.repeat(thetas, n_eval, axis=0)
    X = np.broadcast_to(model.x1, (B, d_x)).copy()
    AT = model.A.T
    total = np.zeros(B)
    peak = np.zeros(B)
    with np.errstate(over="ignore", invalid="ignore"):
        for h in range(H):
            U = family.act_theta_batch(big_thetas, h, X)
            F = model.phi.eval_batch(X, U)
            Xn = F @ AT
            if noise is not None:
                Xn += np.tile(noise[:, h], (n_cand, 1))
            total += cost.per_step_batch(h, Xn, U)
            np.maximum(peak, np.linalg.norm(Xn, axis=1), out=peak)
            X = Xn
    bad = ~np.isfinite(total) | (peak > DIVERGENCE_NORM)
    total = np.where(bad, np.inf, total)
    return total.reshape(n_cand, n_eval).mean(axis=1)


def softmin_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    """Softmin distribution over pool costs; hard argmin as temperature -> 0."""
    finite = np.isfinite(costs)
    if not np.any(finite):
        raise SynthesisFailedError("every candidate in the pool diverged")
    shifted = np.where(finite, costs - costs[finite].min(), np.inf)
    if temperature <= 0:
        w = (shifted == 0).astype(float)
    else:
        with np.errstate(over="ignore", under="ignore"):
            w = np.where(finite, np.exp(-shifted / temperature), 0.0)
    return w / w.sum()


def synthesize_random_search(
    model_hat: SystemModel,
    cost: CostFunction,
    family: SamplingFamily,
    n_candidates: int,
    n_eval_rollouts: int,
    rng: np.random.Generator,
    softmin_temperature: float | None = None,
    temperature_scale: float = 0.1,
) -> SynthesisResult:
    """Random-search synthesis with a softmin-weighted candidate pool.

    Candidates share common random numbers so their ranking is a deterministic
    function of (model, pool).  The softmin temperature defaults to
    ``temperature_scale`` times the pool's finite-cost standard deviation.
    """
    if n_candidates < 1:
        raise ConfigurationError("n_candidates must be >= 1")
    thetas = family.sample(n_candidates, rng)
    noise = (
        model_hat.noise_std
        * rng.standard_normal((n_eval_rollouts, model_hat.horizon, model_hat.phi.d_x))
        if model_hat.noise_std > 0
        else None
    )
    costs = pool_costs_on_model(model_hat, cost, family, thetas, noise)
    if not np.any(np.isfinite(costs)):
        raise SynthesisFailedError("every candidate in the pool diverged")
    if softmin_temperature is None:
        finite = costs[np.isfinite(costs)]
        spread = float(finite.std()) if finite.size > 1 else 0.0
        softmin_temperature = temperature_scale * spread
    weights = softmin_weights(costs, softmin_temperature)
    best = int(np.argmin(np.where(np.isfinite(costs), costs, np.inf)))
    pool = CandidatePool(thetas, costs, weights, float(softmin_temperature))
    return SynthesisResult(
        policy=family.build(thetas[best]),
        estimated_cost=float(costs[best]),
        candidate_pool=pool,
    )


def synthesize_bump_matching(
    A_hat: np.ndarray,
    goal_center: float,
    centers: np.ndarray,
    model_hat: SystemModel | None = None,
    cost: CostFunction | None = None,
    n_eval_rollouts: int = 256,
    rng: np.random.Generator | None = None,
) -> SynthesisResult:
    """Match-and-cancel synthesis for the 1-D bump system.

    theta_{1:11} cancel the estimated state and bump dynamics through the
    estimated input gain; the constant term is the goal center itself.  When a
    model/cost pair is supplied the estimated cost is filled by Monte Carlo.
    """
    A_hat = np.asarray(A_hat, dtype=float).reshape(-1)
    n_bumps = centers.size
    if A_hat.size != n_bumps + 2:
        raise ConfigurationError(
            f"A_hat has {A_hat.size} entries, expected {n_bumps + 2} for the bump layout"
        )
    a1, a2 = A_hat[0], A_hat[1]
    if abs(a2) < 1e-6:
        raise SynthesisFailedError(f"estimated input gain {a2:.3g} is uncontrollable")
    theta = np.empty(n_bumps + 2)
    theta[0] = -a1 / a2
    theta[1:-1] = -A_hat[2:] / a2
    theta[-1] = goal_center
    policy = BumpMatchingPolicy(theta, centers)
    est = float("nan")
    if model_hat is not None and cost is not None and rng is not None:
        est = monte_carlo_cost(model_hat, cost, policy, n_eval_rollouts, rng)
    return SynthesisResult(policy=policy, estimated_cost=est)
