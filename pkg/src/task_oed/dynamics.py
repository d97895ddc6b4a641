"""Nonlinear regulator models x' = A phi(x, u) + w and episode simulation.

The feature map phi is known; the parameter matrix A is what gets estimated.
Everything downstream (estimation, experiment design, control synthesis)
consumes the artifacts defined here: trajectories and feature covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, runtime_checkable

import numpy as np

from .errors import BudgetExhaustedError, ConfigurationError, DivergedRolloutError

# Rollouts whose state norm exceeds this are treated as diverged rather than
# silently clamped; unstable controllers must be visible to the benchmark.
DIVERGENCE_NORM = 1e8


@dataclass(frozen=True)
class AffineStructure:
    """Marks a feature map with the exact layout phi(x, u) = [x, u, 1].

    With this layout the parameter matrix splits into a linear state block,
    an input block, and a constant drift column, which enables closed-form
    control synthesis and cost evaluation.
    """

    d_x: int
    d_u: int

    def split(self, A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (state block, input block, drift column) of A."""
        dx, du = self.d_x, self.d_u
        return A[:, :dx], A[:, dx : dx + du], A[:, dx + du]


@dataclass(frozen=True)
class FeatureMap:
    """A known deterministic featurization of (state, input) pairs.

    ``eval`` maps a single (x, u) pair to a length-d_phi vector; ``eval_batch``
    maps stacked rows (B, d_x), (B, d_u) -> (B, d_phi) and is the hot path for
    candidate simulation.  ``nominal_bound`` is a theory-facing bound on
    ||phi||; it is recorded configuration, never enforced at runtime (the
    benchmark maps include unbounded raw state).
    """

    name: str
    d_x: int
    d_u: int
    d_phi: int
    eval_batch: Callable[[np.ndarray, np.ndarray], np.ndarray]
    nominal_bound: float = 1.0
    affine: Optional[AffineStructure] = None

    def eval(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return self.eval_batch(x[None, :], u[None, :])[0]


@dataclass(frozen=True)
class SystemModel:
    """The regulator model x_{h+1} = A phi(x_h, u_h) + w_h.

    Used both as ground-truth simulator and as the container for estimates;
    ``noise_std`` is the scale of the isotropic Gaussian noise (0 gives
    deterministic rollouts).  ``op_norm_bound`` is theory-facing config.
    """

    A: np.ndarray
    phi: FeatureMap
    noise_std: float
    horizon: int
    op_norm_bound: float = 1.0
    x1: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        object.__setattr__(self, "A", A)
        if A.shape != (self.phi.d_x, self.phi.d_phi):
            raise ConfigurationError(
                f"A has shape {A.shape}, expected {(self.phi.d_x, self.phi.d_phi)}"
            )
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be nonnegative")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be a positive integer")
        x1 = self.x1
        x1 = np.zeros(self.phi.d_x) if x1 is None else np.asarray(x1, dtype=float)
        if x1.shape != (self.phi.d_x,):
            raise ConfigurationError(f"x1 has shape {x1.shape}, expected ({self.phi.d_x},)")
        object.__setattr__(self, "x1", x1)

    def with_A(self, A: np.ndarray) -> "SystemModel":
        return SystemModel(A, self.phi, self.noise_std, self.horizon,
                           self.op_norm_bound, self.x1)


@dataclass
class Trajectory:
    """One episode: H+1 states and H inputs, in play order."""

    states: np.ndarray  # (H+1, d_x)
    inputs: np.ndarray  # (H, d_u)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if len(self.states) != len(self.inputs) + 1:
            raise ConfigurationError(
                f"{len(self.states)} states and {len(self.inputs)} inputs; "
                "need len(states) == len(inputs) + 1"
            )

    @property
    def horizon(self) -> int:
        return len(self.inputs)

    def features(self, phi: FeatureMap) -> np.ndarray:
        """Per-step features phi(x_h, u_h), shape (H, d_phi)."""
        return phi.eval_batch(self.states[:-1], self.inputs)


@dataclass
class Covariates:
    """Accumulated feature second moment  sum_h phi phi^T  over episodes.

    Symmetrized on every update.  The lifted version I_{d_x} (x) lambda is a
    view used implicitly by estimation code and is never materialized.
    """

    lam: np.ndarray
    episode_count: int = 0

    @classmethod
    def zeros(cls, d_phi: int) -> "Covariates":
        return cls(np.zeros((d_phi, d_phi)), 0)

    def add_trajectory(self, traj: Trajectory, phi: FeatureMap) -> None:
        F = traj.features(phi)
        self.add_feature_matrix(F)

    def add_feature_matrix(self, F: np.ndarray) -> None:
        """Accumulate F^T F for a (H, d_phi) block of per-step features."""
        self.lam = _symmetrize(self.lam + F.T @ F)
        self.episode_count += 1

    def copy(self) -> "Covariates":
        return Covariates(self.lam.copy(), self.episode_count)


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


@runtime_checkable
class Policy(Protocol):
    """Anything that can drive an episode.

    ``act`` may condition on the full prefix (states[: h + 1], inputs[: h]).
    ``reset`` is called once at the start of every episode; policies with
    internal randomness must reseed there so replays are reproducible.
    """

    def reset(self) -> None: ...

    def act(self, h: int, states: np.ndarray, inputs: np.ndarray) -> np.ndarray: ...


class ZeroPolicy:
    """Plays the zero input."""

    def __init__(self, d_u: int):
        self.d_u = d_u

    def reset(self) -> None:
        pass

    def act(self, h, states, inputs) -> np.ndarray:
        return np.zeros(self.d_u)


class RandomInputPolicy:
    """Open-loop Gaussian inputs u_h ~ N(0, sigma_u^2 I), replayable via seed."""

    def __init__(self, d_u: int, sigma_u: float, seed: int):
        self.d_u = d_u
        self.sigma_u = float(sigma_u)
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)

    def reset(self) -> None:
        self._rng = np.random.default_rng(self.seed)

    def act(self, h, states, inputs) -> np.ndarray:
        return self.sigma_u * self._rng.standard_normal(self.d_u)


def step(model: SystemModel, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """One transition A phi(x, u) + w, exactly."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if x.shape != (model.phi.d_x,) or u.shape != (model.phi.d_u,) or w.shape != (model.phi.d_x,):
        raise ConfigurationError(
            f"dimension mismatch: x{x.shape} u{u.shape} w{w.shape} for "
            f"d_x={model.phi.d_x}, d_u={model.phi.d_u}"
        )
    return model.A @ model.phi.eval(x, u) + w


def rollout(model: SystemModel, policy: Policy, rng: np.random.Generator) -> Trajectory:
    """Run one H-step episode of ``policy`` with noise drawn from ``rng``.

    Raises DivergedRolloutError (with the step index) if the state becomes
    non-finite or its norm exceeds DIVERGENCE_NORM.
    """
    H, d_x, d_u = model.horizon, model.phi.d_x, model.phi.d_u
    states = np.empty((H + 1, d_x))
    inputs = np.empty((H, d_u))
    states[0] = model.x1
    policy.reset()
    for h in range(H):
        u = np.asarray(policy.act(h, states[: h + 1], inputs[:h]), dtype=float).reshape(d_u)
        if model.noise_std > 0:
            w = model.noise_std * rng.standard_normal(d_x)
        else:
            w = np.zeros(d_x)
        x_next = step(model, states[h], u, w)
        inputs[h] = u
        if not np.all(np.isfinite(x_next)) or np.linalg.norm(x_next) > DIVERGENCE_NORM:
            partial = Trajectory(states[: h + 1].copy(), inputs[:h].copy()) if h > 0 else None
            raise DivergedRolloutError(h + 1, partial=partial)
        states[h + 1] = x_next
    return Trajectory(states, inputs)


def estimate_policy_covariance(
    model: SystemModel, policy: Policy, n_rollouts: int, rng: np.random.Generator
) -> Covariates:
    """Monte-Carlo estimate of the expected per-episode covariance of ``policy``.

    Returns (1/n) sum over rollouts of sum_h phi phi^T; ``episode_count`` is
    set to n_rollouts.  Diverged rollouts propagate.
    """
    if n_rollouts < 1:
        raise ConfigurationError("n_rollouts must be >= 1")
    total = np.zeros((model.phi.d_phi, model.phi.d_phi))
    for _ in range(n_rollouts):
        traj = rollout(model, policy, rng)
        F = traj.features(model.phi)
        total += F.T @ F
    return Covariates(_symmetrize(total / n_rollouts), n_rollouts)


def simulate_batch(
    A: np.ndarray,
    phi: FeatureMap,
    x0: np.ndarray,
    H: int,
    inputs: np.ndarray | Callable[[int, np.ndarray], np.ndarray],
    noise: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized simulation of B trajectories on a model (or stack of models).

    A is (d_x, d_phi) or (B, d_x, d_phi); x0 is (B, d_x); ``inputs`` is either
    a (B, H, d_u) array of open-loop inputs or a callable (h, X) -> (B, d_u)
    state-feedback rule; ``noise`` is (B, H, d_x) or None for deterministic
    rollouts.  Returns (states (B, H+1, d_x), inputs (B, H, d_u)).  Non-finite
    blowups are not raised here; callers inspect the result (diverged
    candidates must simply rank last).
    """
    x0 = np.asarray(x0, dtype=float)
    B, d_x = x0.shape
    batched_A = A.ndim == 3
    U_out = np.empty((B, H, phi.d_u))
    X = np.empty((B, H + 1, d_x))
    X[:, 0] = x0
    cur = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for h in range(H):
            U = inputs(h, cur) if callable(inputs) else inputs[:, h]
            F = phi.eval_batch(cur, U)
            if batched_A:
                nxt = (A @ F[..., None])[..., 0]
            else:
                nxt = F @ A.T
            if noise is not None:
                nxt = nxt + noise[:, h]
            U_out[:, h] = U
            X[:, h + 1] = nxt
            cur = nxt
    return X, U_out


def batch_feature_outer_sum(phi: FeatureMap, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Per-trajectory sum_h phi phi^T for batched states/inputs.

    X is (B, H+1, d_x), U is (B, H, d_u); returns (B, d_phi, d_phi).
    """
    B, H = U.shape[0], U.shape[1]
    F = phi.eval_batch(X[:, :-1].reshape(B * H, -1), U.reshape(B * H, -1))
    F = F.reshape(B, H, phi.d_phi)
    return np.einsum("bhi,bhj->bij", F, F)


class LiveSystem:
    """The real system behind a strict episode budget.

    Every interaction with the ground truth goes through ``run_episode`` so
    that budget accounting is exact: once ``budget`` episodes have been played
    the system refuses further episodes.  An observer (the trial's data store)
    sees every completed trajectory.
    """

    def __init__(
        self,
        model: SystemModel,
        noise_seq: np.random.SeedSequence,
        budget: int,
        observer=None,
    ):
        self.model = model
        self.budget = int(budget)
        self.episodes_used = 0
        self._noise_seq = noise_seq
        self.observer = observer

    @property
    def remaining(self) -> int:
        return self.budget - self.episodes_used

    def run_episode(self, policy: Policy) -> Trajectory:
        if self.episodes_used >= self.budget:
            raise BudgetExhaustedError(f"budget of {self.budget} episodes consumed")
        rng = np.random.default_rng(self._noise_seq.spawn(1)[0])
        try:
            traj = rollout(self.model, policy, rng)
        except DivergedRolloutError as exc:
            # The episode was played against the real system: it counts.
            self.episodes_used += 1
            if self.observer is not None and exc.partial is not None:
                self.observer.add(exc.partial, policy)
            raise
        self.episodes_used += 1
        if self.observer is not None:
            self.observer.add(traj, policy)
        return traj
