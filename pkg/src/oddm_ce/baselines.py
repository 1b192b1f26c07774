"""Reference estimators: orthogonal matching pursuit and dense LMMSE oracles."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

logger = logging.getLogger(__name__)


class RegularizedSolveWarning(RuntimeWarning):
    pass


@dataclass
class OmpConfig:
    """OMP stopping rules: at most ``sparsity`` atoms, or stop once
    ``||r||^2 <= residual_tol``."""

    sparsity: int
    residual_tol: float = 0.0

    def __post_init__(self):
        if self.sparsity < 1:
            raise ValueError("sparsity must be >= 1")
        if self.residual_tol < 0:
            raise ValueError("residual tolerance must be non-negative")


@dataclass
class OmpResult:
    estimate: np.ndarray
    support: list
    residual_norms: list


def _lstsq(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    x, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < A.shape[1]:
        warnings.warn("rank-deficient OMP support; using a regularized solve",
                      RegularizedSolveWarning, stacklevel=3)
        G = A.conj().T @ A
        G[np.diag_indices_from(G)] += 1e-10 * max(np.trace(G).real / G.shape[0], 1e-300)
        x = np.linalg.solve(G, A.conj().T @ y)
    return x


def omp_estimate(Phi: np.ndarray, y: np.ndarray, config: OmpConfig,
                 full_output: bool = False):
    """Greedy sparse estimate of ``h`` in ``y = Phi h + n``.

    Each step adds the column with the largest normalized correlation with
    the residual and re-solves least squares on the support.
    """
    Phi = np.asarray(Phi)
    y = np.asarray(y, dtype=complex)
    m, n = Phi.shape
    norms = np.linalg.norm(Phi, axis=0)
    norms[norms == 0] = np.inf
    x = np.zeros(n, dtype=complex)
    support: list[int] = []
    r = y.copy()
    res = [float(np.vdot(r, r).real)]
    coef = np.zeros(0, dtype=complex)
    # an exact fit (residual at round-off level) also ends the search
    stop = max(config.residual_tol, 1e-24 * res[0])
    while len(support) < min(config.sparsity, n, m) and res[-1] > stop:
        score = np.abs(Phi.conj().T @ r) / norms
        score[support] = -1
        j = int(np.argmax(score))
        if score[j] <= 0:
            break
        support.append(j)
        coef = _lstsq(Phi[:, support], y)
        r = y - Phi[:, support] @ coef
        res.append(float(np.vdot(r, r).real))
    x[support] = coef if support else x[support]
    if full_output:
        return OmpResult(x, support, res)
    return x


def lmmse_oracle(Phi: np.ndarray, y: np.ndarray, v_g: float, noise_var: float) -> np.ndarray:
    """``v_g Phi^H (v_g Phi Phi^H + noise_var I)^{-1} y`` via the smaller system."""
    Phi = np.asarray(Phi)
    y = np.asarray(y, dtype=complex)
    m, n = Phi.shape
    if not np.any(y):
        return np.zeros(n, dtype=complex)
    if m <= n:
        S = v_g * (Phi @ Phi.conj().T)
        S[np.diag_indices(m)] += noise_var
        z = _psd_solve(S, y)
        return v_g * (Phi.conj().T @ z)
    # push-through form: (Phi^H Phi + (noise/v_g) I)^{-1} Phi^H y
    S = Phi.conj().T @ Phi
    S[np.diag_indices(n)] += noise_var / v_g
    return _psd_solve(S, Phi.conj().T @ y)


def _psd_solve(S: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return sla.cho_solve(sla.cho_factor(S), b)
    except np.linalg.LinAlgError:
        pass
    warnings.warn("singular LMMSE system; adding Tikhonov regularization",
                  RegularizedSolveWarning, stacklevel=3)
    reg = 1e-10 * max(np.trace(S).real / S.shape[0], 1e-300)
    return np.linalg.solve(S + reg * np.eye(S.shape[0]), b)


def genie_support_lmmse(Phi: np.ndarray, y: np.ndarray, support, v_g: float,
                        noise_var: float) -> np.ndarray:
    """LMMSE restricted to a known support; zero elsewhere."""
    Phi = np.asarray(Phi)
    x = np.zeros(Phi.shape[1], dtype=complex)
    support = np.asarray(support, dtype=int)
    if support.size == 0:
        return x
    if noise_var == 0:
        x[support] = np.linalg.lstsq(Phi[:, support], y, rcond=None)[0]
        return x
    x[support] = lmmse_oracle(Phi[:, support], y, v_g, noise_var)
    return x
