"""Model-task curvature: which parameters of A matter for the control task.

Both operations differentiate the scalar map g(A') = J(pi*(A'); A) through a
frozen synthesis bundle: central second differences for the full curvature
matrix, or a gradient outer product G G^T when the synthesizer is only
piecewise smooth (random search behind a softmin).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, HessianFailedError


@dataclass(frozen=True)
class SynthesisBundle:
    """A frozen, deterministic evaluator of g(A') = J(pi*(A'); A).

    ``g_batch`` maps a stack (P, d_x, d_phi) of parameter matrices to (P,)
    costs.  Any sampling the synthesizer or evaluator needs (candidate pools,
    rollout noise) must be drawn once at bundle construction and reused for
    every perturbed input, so that differences through the bundle are smooth.
    ``max_batch`` limits evaluation chunk sizes for memory-heavy bundles.
    """

    g_batch: Callable[[np.ndarray], np.ndarray]
    d_x: int
    d_phi: int
    label: str = ""
    max_batch: int | None = None


@dataclass
class ModelTaskHessian:
    """PSD-projected curvature of the task loss over vec(A) (row-major).

    ``pre_projection_min_eig`` records the most negative eigenvalue seen
    before clamping; the stored matrix is symmetric and numerically PSD.
    """

    matrix: np.ndarray
    method: str  # "finite_difference" | "gauss_newton"
    fd_step: float
    pre_projection_min_eig: float = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def default_fd_step(A: np.ndarray) -> float:
    d = A.size
    return 1e-3 * (1.0 + np.linalg.norm(A) / np.sqrt(d))


def _evaluate_points(bundle: SynthesisBundle, A: np.ndarray, offsets: np.ndarray,
                     h: float) -> np.ndarray:
    """Evaluate g at A + h * offset for each vec-space offset row."""
    P = offsets.shape[0]
    stack = A[None, :, :] + h * offsets.reshape(P, A.shape[0], A.shape[1])
    chunk = bundle.max_batch or P
    out = np.empty(P)
    for start in range(0, P, chunk):
        out[start : start + chunk] = bundle.g_batch(stack[start : start + chunk])
    return out


def _clip_psd(M: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetrize and clamp negative eigenvalues at zero.

    Returns the projected matrix (numerically PSD as measured by eigvalsh)
    and the pre-projection minimum eigenvalue.
    """
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    pre_min = float(w[0])
    out = (V * np.clip(w, 0.0, None)) @ V.T
    out = 0.5 * (out + out.T)
    # Reconstruction roundoff can leave eigenvalues a few ulp below zero.
    for _ in range(3):
        lo = np.linalg.eigvalsh(out)[0]
        if lo >= 0:
            break
        out = out + (2.0 * -lo) * np.eye(out.shape[0])
    return out, pre_min


def hessian_fd(A: np.ndarray, bundle: SynthesisBundle,
               fd_step: float | None = None) -> ModelTaskHessian:
    """Full curvature by central second differences over vec(A) coordinates.

    H[i, j] = ( g(+e_i+e_j) - g(+e_i-e_j) - g(-e_i+e_j) + g(-e_i-e_j) )
              / (4 fd_step^2),
    then symmetrized and eigenvalue-clamped to PSD.  Costs ~2 d^2 evaluations
    of g; accepted for d = d_x * d_phi at benchmark sizes.
    """
    A = np.asarray(A, dtype=float)
    if A.shape != (bundle.d_x, bundle.d_phi):
        raise ConfigurationError(f"A has shape {A.shape}, bundle expects "
                                 f"{(bundle.d_x, bundle.d_phi)}")
    h = fd_step if fd_step is not None else default_fd_step(A)
    d = bundle.d_x * bundle.d_phi

    offsets = [np.zeros(d)]
    index = {}
    for i in range(d):
        for sign in (2.0, -2.0):
            v = np.zeros(d)
            v[i] = sign
            index[(i, i, sign)] = len(offsets)
            offsets.append(v)
    for i in range(d):
        for j in range(i + 1, d):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                v = np.zeros(d)
                v[i], v[j] = si, sj
                index[(i, j, si, sj)] = len(offsets)
                offsets.append(v)
    g = _evaluate_points(bundle, A, np.array(offsets), h)

    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        keys = list(index.keys())
        which = keys[bad[0] - 1] if bad[0] > 0 else (0, 0)
        raise HessianFailedError((which[0], which[1]))

    H = np.empty((d, d))
    g0 = g[0]
    denom = 4.0 * h * h
    for i in range(d):
        H[i, i] = (g[index[(i, i, 2.0)]] - 2.0 * g0 + g[index[(i, i, -2.0)]]) / denom
    for i in range(d):
        for j in range(i + 1, d):
            val = (
                g[index[(i, j, 1, 1)]]
                - g[index[(i, j, 1, -1)]]
                - g[index[(i, j, -1, 1)]]
                + g[index[(i, j, -1, -1)]]
            ) / denom
            H[i, j] = val
            H[j, i] = val
    matrix, pre_min = _clip_psd(H)
    return ModelTaskHessian(matrix, "finite_difference", h, pre_min)


def gradient_fd(A: np.ndarray, bundle: SynthesisBundle,
                fd_step: float | None = None) -> np.ndarray:
    """Central-difference gradient of g over vec(A), shape (d_x * d_phi,)."""
    A = np.asarray(A, dtype=float)
    h = fd_step if fd_step is not None else default_fd_step(A)
    d = bundle.d_x * bundle.d_phi
    offsets = np.concatenate([np.eye(d), -np.eye(d)], axis=0)
    g = _evaluate_points(bundle, A, offsets, h)
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        i = int(bad[0] % d)
        raise HessianFailedError((i, i))
    return (g[:d] - g[d:]) / (2.0 * h)


def hessian_gauss_newton(A: np.ndarray, bundle: SynthesisBundle,
                         fd_step: float | None = None) -> ModelTaskHessian:
    """Gradient outer-product surrogate G G^T, PSD by construction.

    Used where the synthesizer is a softmin-smoothed random search and full
    second differences would be dominated by search noise.
    """
    A = np.asarray(A, dtype=float)
    if A.shape != (bundle.d_x, bundle.d_phi):
        raise ConfigurationError(f"A has shape {A.shape}, bundle expects "
                                 f"{(bundle.d_x, bundle.d_phi)}")
    h = fd_step if fd_step is not None else default_fd_step(A)
    G = gradient_fd(A, bundle, h)
    matrix, pre_min = _clip_psd(np.outer(G, G))
    return ModelTaskHessian(matrix, "gauss_newton", h, pre_min)
