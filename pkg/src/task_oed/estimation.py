"""Least-squares identification of A and task-weighted error metrics.

The vec convention is fixed package-wide: vec(A) stacks the rows of A
(numpy C order), so the lifted covariance I_{d_x} (x) Lambda acts blockwise,
one d_phi block per output row.  All Hessian code uses the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dynamics import Covariates, FeatureMap, Trajectory
from .errors import ConfigurationError, IllConditionedError, SingularCovarianceError

# Refuse solves past this condition number instead of silently pseudo-inverting;
# silent pseudo-inversion corrupts the benchmark's early epochs.
MAX_CONDITION = 1e14


@dataclass(frozen=True)
class EstimatorConfig:
    """Tikhonov regularization added to Lambda before the solve.

    ``ridge=None`` selects the default 1e-8 * tr(Lambda) / d_phi, which is
    invisible once full-rank data exists but prevents hard failure on the
    first epoch's rank-deficient covariates.
    """

    ridge: float | None = None

    def __post_init__(self):
        if self.ridge is not None and self.ridge < 0:
            raise ConfigurationError("ridge must be nonnegative")

    def resolve(self, lam: np.ndarray) -> float:
        if self.ridge is not None:
            return self.ridge
        return 1e-8 * np.trace(lam) / lam.shape[0]


def _spd_solve(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve S X = B for symmetric positive-definite S, refusing bad systems."""
    eigs = np.linalg.eigvalsh(S)
    if eigs[-1] <= 0 or eigs[0] <= 0 or eigs[-1] / eigs[0] > MAX_CONDITION:
        raise IllConditionedError(
            f"covariate system condition {eigs[-1] / max(eigs[0], 1e-300):.3g} exceeds "
            f"{MAX_CONDITION:.0e}"
        )
    c = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    return scipy.linalg.cho_solve(c, B, check_finite=False)


def gram_and_cross(
    trajectories: list[Trajectory], phi: FeatureMap
) -> tuple[np.ndarray, np.ndarray]:
    """Covariates Lambda = sum phi phi^T and cross moment sum x_next phi^T."""
    lam = np.zeros((phi.d_phi, phi.d_phi))
    cross = np.zeros((phi.d_x, phi.d_phi))
    for traj in trajectories:
        F = traj.features(phi)
        lam += F.T @ F
        cross += traj.states[1:].T @ F
    return 0.5 * (lam + lam.T), cross


def least_squares_from_stats(
    lam: np.ndarray, cross: np.ndarray, cfg: EstimatorConfig = EstimatorConfig()
) -> np.ndarray:
    """Ridge least squares from precomputed sufficient statistics."""
    ridge = cfg.resolve(lam)
    S = lam + ridge * np.eye(lam.shape[0])
    return _spd_solve(S, cross.T).T


def least_squares(
    trajectories: list[Trajectory], phi: FeatureMap, cfg: EstimatorConfig = EstimatorConfig()
) -> np.ndarray:
    """argmin_A sum_t sum_h ||x_{h+1} - A phi(x_h, u_h)||^2 + ridge ||A||_F^2.

    One symmetric solve of (Lambda + ridge I) against the cross-moment matrix.
    Raises IllConditionedError when the regularized system is numerically
    singular (condition > 1e14).
    """
    if not trajectories:
        raise ConfigurationError("need at least one trajectory")
    lam, cross = gram_and_cross(trajectories, phi)
    return least_squares_from_stats(lam, cross, cfg)


def _as_matrix(hessian) -> np.ndarray:
    """Accept either a ModelTaskHessian or a raw (d_x d_phi)^2 array."""
    return np.asarray(getattr(hessian, "matrix", hessian), dtype=float)


def sum_diagonal_blocks(H: np.ndarray, d_x: int, d_phi: int) -> np.ndarray:
    """M = sum of the d_x diagonal d_phi-blocks of H.

    This is the reduction making tr(H (I (x) Lambda)^{-1}) = tr(M Lambda^{-1}).
    """
    if H.shape != (d_x * d_phi, d_x * d_phi):
        raise ConfigurationError(
            f"hessian has shape {H.shape}, expected {(d_x * d_phi,) * 2}"
        )
    blocks = H.reshape(d_x, d_phi, d_x, d_phi)
    return np.einsum("iaib->ab", blocks)


def weighted_error(A_hat: np.ndarray, A_star: np.ndarray, hessian) -> float:
    """vec(A_hat - A_star)^T H vec(A_hat - A_star), row-major vec convention."""
    A_hat = np.asarray(A_hat, dtype=float)
    A_star = np.asarray(A_star, dtype=float)
    if A_hat.shape != A_star.shape:
        raise ConfigurationError(f"shape mismatch: {A_hat.shape} vs {A_star.shape}")
    H = _as_matrix(hessian)
    v = (A_hat - A_star).reshape(-1)
    if H.shape != (v.size, v.size):
        raise ConfigurationError(f"hessian shape {H.shape} incompatible with {A_hat.shape}")
    return float(v @ H @ v)


def design_score(hessian, cov: Covariates | np.ndarray) -> float:
    """tr(H (I (x) Lambda)^{-1}), computed blockwise as tr(M Lambda^{-1}).

    Never materializes the Kronecker product.  Raises SingularCovarianceError
    when Lambda is not positive definite.
    """
    lam = cov.lam if isinstance(cov, Covariates) else np.asarray(cov, dtype=float)
    H = _as_matrix(hessian)
    d_phi = lam.shape[0]
    d_lift = H.shape[0]
    if d_lift % d_phi != 0:
        raise ConfigurationError(
            f"hessian dimension {d_lift} is not a multiple of d_phi={d_phi}"
        )
    M = sum_diagonal_blocks(H, d_lift // d_phi, d_phi)
    eigs = np.linalg.eigvalsh(lam)
    if eigs[0] <= 0 or eigs[-1] / eigs[0] > MAX_CONDITION:
        raise SingularCovarianceError(
            f"covariates are singular (min eigenvalue {eigs[0]:.3g})"
        )
    c = scipy.linalg.cho_factor(lam, lower=True, check_finite=False)
    return float(np.trace(scipy.linalg.cho_solve(c, M, check_finite=False)))
