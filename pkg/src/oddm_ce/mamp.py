"""Memory approximate message passing (MAMP) for ``y = Phi h + n``.

One iteration runs a long-memory linear estimator (LLE) built from a
matrix-free Neumann-type recursion, then a Bernoulli-Gaussian denoiser
(NLE) whose output is orthogonalized against its input and damped against
earlier estimates.  Only operator applications and scalar/``ell x ell``
linear algebra are used; ``rho I + Phi Phi^H`` is never formed.

Internally the operator is rescaled so its largest squared singular value is
about one, which keeps the spectral moments ``w_k`` bounded for long runs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .operators import LinearOperator, ScaledOperator, dense_matrix, power_iteration

logger = logging.getLogger(__name__)

KAPPA_CAP = 1e6
LAMBDA_SAFETY = 1.02
DIVERGENCE_STREAK = 5


class MampError(RuntimeError):
    pass


class MampDivergenceError(MampError):
    """Raised when the error variance keeps increasing or turns non-finite."""


@dataclass
class MampConfig:
    """Solver settings.

    ``lam_min``/``lam_max`` bound the eigenvalues of ``Phi Phi^H`` in the
    caller's units; ``None`` estimates ``lam_max`` by power iteration (times
    a 1.02 safety factor) and uses ``lam_min = 0``.  ``memory`` truncates the
    long-memory expansion to the newest iterations; ``None`` keeps all of
    them.
    """

    noise_var: float
    sparsity: float = 1.0
    prior_mean: complex = 0.0
    prior_var: float = 1.0
    max_iterations: int = 50
    damping_window: int = 3
    tol: float = 1e-6
    lam_min: float | None = None
    lam_max: float | None = None
    memory: int | None = None
    moments: str = "auto"  # exact | hutchinson | auto
    moment_rel_tol: float = 0.01
    exact_moment_limit: int = 1024
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.sparsity <= 1:
            raise ValueError("sparsity must lie in (0, 1]")
        if self.prior_var <= 0:
            raise ValueError("prior variance must be positive")
        if self.noise_var < 0:
            raise ValueError("noise variance must be non-negative")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.damping_window < 1 or self.max_iterations < 1:
            raise ValueError("damping window and iteration count must be >= 1")
        if self.memory is not None and self.memory < 1:
            raise ValueError("memory must be >= 1")
        if (self.lam_min is not None and self.lam_max is not None
                and self.lam_min > self.lam_max):
            raise ValueError("lam_min exceeds lam_max")
        if self.moments not in ("auto", "exact", "hutchinson"):
            raise ValueError(f"unknown moment method {self.moments!r}")


# --- scalar pieces ------------------------------------------------------------

def compute_theta(lam_min: float, lam_max: float, rho: float) -> float:
    """Relaxation ``theta = 1 / (lam_bar + rho)``."""
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return 1.0 / (0.5 * (lam_min + lam_max) + rho)


def theta_radius(lam_min: float, lam_max: float, rho: float) -> float:
    """Bound on the spectral radius of ``theta B``."""
    return (lam_max - lam_min) / (lam_min + lam_max + 2 * rho)


def w_bar(w, lam_bar: float, i: int, j: int) -> float:
    return lam_bar * w[i + j] - w[i + j + 1] - w[i] * w[j]


def memory_weights(thetas, kappas, start: int = 1) -> np.ndarray:
    """``eta_{t,i}`` for ``i = start..t`` (1-based), ``t = len(kappas)``.

    ``eta_{t,t} = kappa_t`` and ``eta_{t,i} = kappa_i prod_{j>i} theta_j``.
    """
    t = len(kappas)
    eta = np.empty(t - start + 1)
    acc = 1.0
    for i in range(t, start - 1, -1):
        eta[i - start] = kappas[i - 1] * acc
        acc *= thetas[i - 1]
    return eta


@dataclass
class ETerms:
    e0: float
    e1: float
    e2: float
    e3: float

    def variance(self, kappa: float, w0: float) -> float:
        """LLE error variance as a function of the step ``kappa``."""
        num = self.e1 * kappa ** 2 - 2 * self.e2 * kappa + self.e3
        return num / (w0 ** 2 * (kappa + self.e0) ** 2)


def e_terms(t: int, eta_prev: np.ndarray, w, lam_bar: float, sigma2: float,
            V: np.ndarray, start: int = 1) -> ETerms:
    """Coefficients of the LLE variance at iteration ``t`` (1-based).

    ``eta_prev`` holds ``eta_{t,i}`` for ``i = start..t-1``; ``V`` holds the
    input error covariances ``nu^gamma`` indexed from zero.
    """
    w0 = w[0]
    e1 = sigma2 * w0 + V[t - 1, t - 1] * w_bar(w, lam_bar, 0, 0)
    if t == 1 or eta_prev.size == 0:
        return ETerms(0.0, e1, 0.0, 0.0)
    W = np.array([w[k] for k in range(2 * t)])
    lags = t - np.arange(start, t)  # t - i for each memory term
    V_t = V[t - 1, start - 1:t - 1]
    V_ij = V[start - 1:t - 1, start - 1:t - 1]
    e0 = float(eta_prev @ W[lags] / w0)
    e2 = -float(eta_prev @ (sigma2 * W[lags] + V_t * (lam_bar * W[lags] - W[lags + 1] - w0 * W[lags])))
    S = lags[:, None] + lags[None, :]
    wb = lam_bar * W[S] - W[S + 1] - np.outer(W[lags], W[lags])
    e3 = eta_prev @ (sigma2 * W[S] + V_ij * wb) @ eta_prev
    return ETerms(e0, e1, e2, float(e3))


def compute_kappa_opt(t: int, et: ETerms) -> float:
    """Step size minimizing the LLE error variance."""
    if t == 1:
        return 1.0
    den = et.e1 * et.e0 + et.e2
    if den == 0:
        return KAPPA_CAP
    return float(np.clip((et.e2 * et.e0 + et.e3) / den, -KAPPA_CAP, KAPPA_CAP))


# --- spectral moments -------------------------------------------------------

class SpectralMoments:
    """Lazy ``w_k = tr(A^H B^k A) / n`` with ``B = lam_bar I - A A^H``.

    ``exact`` iterates the smaller Gram matrix ``G`` and uses
    ``w_k = tr(G (lam_bar - G)^k) / n`` with the split
    ``w_{2k} = <P_k, G P_k>``, ``w_{2k+1} = <P_k, G (lam_bar - G) P_k>`` where
    ``P_k = (lam_bar - G)^k``.  ``hutchinson`` pushes unit-modulus probes
    through the operator instead, on whichever side is smaller, and keeps adding probes until the standard
    error of each requested moment is at most ``rel_tol / 3`` of
    ``max(|w_k|, floor * w_0 * lam_bar^k)``; the second term stops moments
    that are nearly zero from demanding unbounded probe counts.  With
    ``lam_min >= 0``, ``lam_bar^k`` bounds ``|w_k| / w_0``.
    """

    def __init__(self, op: LinearOperator, lam_bar: float, method: str = "auto",
                 rel_tol: float = 0.01, normalizer: float | None = None,
                 exact_limit: int = 1024, rng: np.random.Generator | None = None,
                 probes: int = 16, max_probes: int = 4096, floor: float = 0.1):
        self.op = op
        self.lam_bar = float(lam_bar)
        m, n = op.shape
        self.norm = float(n if normalizer is None else normalizer)
        A = dense_matrix(op)
        if method == "auto":
            method = "exact" if A is not None and min(m, n) <= exact_limit else "hutchinson"
        if method == "exact" and A is None:
            A = op.to_dense()
        self.method = method
        self.rel_tol = rel_tol
        self.floor = floor
        self._w: list[float] = []
        if method == "exact":
            G = A.conj().T @ A if n <= m else A @ A.conj().T
            self._G = G
            self._P = np.eye(G.shape[0], dtype=G.dtype)
            self._GP = G.copy()
            self._exact_level = 0
        elif method == "hutchinson":
            rng = np.random.default_rng(0) if rng is None else rng
            # tr(A^H B^k A) = tr(A A^H B^k): probe whichever side is smaller.
            # Probes are randomly phased DFT columns drawn without replacement,
            # so they are unit-modulus and exact once every column is used.
            self._rows = m < n
            d = min(m, n)
            self._dim = d
            self._phase = np.exp(2j * np.pi * rng.random(d))
            self._order = rng.permutation(d)
            self._used = 0
            self.max_probes = min(max_probes, d)
            self._levels: tuple[list, list] = ([], [])
            self._Z = self._probes(min(probes, d))
        else:
            raise ValueError(f"unknown moment method {method!r}")

    def _probes(self, count: int) -> np.ndarray:
        d = self._dim
        cols = self._order[self._used:self._used + count]
        self._used += cols.size
        return self._phase[:, None] * np.exp(2j * np.pi * np.outer(np.arange(d), cols) / d)

    def __getitem__(self, k: int) -> float:
        if k < 0:
            raise IndexError(k)
        while len(self._w) <= k:
            self._extend(len(self._w))
        return self._w[k]

    def values(self, count: int) -> np.ndarray:
        self[count]  # later moments may refine earlier ones, so read afterwards
        return np.array(self._w[:count + 1])

    # exact ------------------------------------------------------------------
    def _extend_exact(self, k: int):
        # one Gram product per level: P_{k+1} = lam P_k - G P_k, and since G is
        # Hermitian <P, G G P> = ||G P||^2
        half = k // 2
        while self._exact_level < half:
            self._P = self.lam_bar * self._P - self._GP
            self._GP = self._G @ self._P
            self._exact_level += 1
        even = np.vdot(self._P, self._GP).real
        if k % 2 == 0:
            return even / self.norm
        return (self.lam_bar * even - np.vdot(self._GP, self._GP).real) / self.norm

    # stochastic -------------------------------------------------------------
    def _grow(self, levels: tuple[list, list], Z: np.ndarray, depth: int) -> None:
        # V[j] = B^j A Z for column probes, B^j Z for row probes; X[j] is the
        # factor whose inner products give the samples (A^H V[j] for rows)
        V, X = levels
        if not V:
            V.append(Z if self._rows else self.op.matmat(Z))
        while len(V) <= depth:
            AH_V = self.op.rmatmat(V[-1])
            if self._rows and len(X) < len(V):
                X.append(AH_V)
            V.append(self.lam_bar * V[-1] - self.op.matmat(AH_V))
        if not self._rows:
            X[:] = V
        while len(X) <= depth:
            X.append(self.op.rmatmat(V[len(X)]))

    def _samples(self, k: int) -> np.ndarray:
        X = self._levels[1]
        P = X[k // 2]
        Q = X[k // 2 + 1] if k % 2 else P
        return np.einsum("ij,ij->j", P.conj(), Q).real

    def _extend_hutch(self, k: int):
        depth = (k + 1) // 2
        self._grow(self._levels, self._Z, depth)
        while True:
            s = self._samples(k)
            est = s.mean()
            fpc = max(0.0, 1.0 - s.size / self._dim)  # finite-population correction
            se = s.std(ddof=1) * math.sqrt(fpc / s.size) if s.size > 1 else np.inf
            w0 = self._w[0] * self.norm if self._w else abs(est)
            scale = max(abs(est), self.floor * w0 * self.lam_bar ** k)
            if se <= self.rel_tol / 3 * scale:
                return est / self.norm
            if self._Z.shape[1] >= self.max_probes:
                raise MampError(f"moment w_{k}: trace estimator did not reach the target "
                                f"within {self.max_probes} probes")
            extra = self._probes(min(self._Z.shape[1], self.max_probes - self._Z.shape[1]))
            self._Z = np.hstack([self._Z, extra])
            more: tuple[list, list] = ([], [])
            self._grow(more, extra, len(self._levels[1]) - 1)
            self._levels = tuple([np.hstack([a, b]) for a, b in zip(old, new)]
                                 for old, new in zip(self._levels, more))
            # earlier moments are re-estimated on the enlarged probe set
            self._w = [self._samples(j).mean() / self.norm for j in range(len(self._w))]

    def _extend(self, k: int):
        if self.method == "exact":
            self._w.append(float(self._extend_exact(k)))
        else:
            self._w.append(float(self._extend_hutch(k)))


def spectral_moments(op: LinearOperator, lam_bar: float, count: int, method: str = "auto",
                     rel_tol: float = 0.01, normalizer: float | None = None,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """``w_0..w_count``; ``normalizer`` defaults to the column count."""
    return SpectralMoments(op, lam_bar, method, rel_tol, normalizer, rng=rng).values(count)


# --- denoiser -----------------------------------------------------------------

def nle_denoise(y, p: float, u_g, v_g: float, noise_var):
    """Posterior mean and variance of ``b g`` given ``y = b g + N(0, noise_var)``.

    ``b ~ Bernoulli(p)``, ``g ~ N(u_g, v_g)``, all real; vectorized over
    ``y`` and ``noise_var``.  The activity probability is evaluated in the
    log domain so large residuals cannot overflow.
    """
    y = np.asarray(y, dtype=float)
    s2 = np.asarray(noise_var, dtype=float)
    if v_g <= 0 or np.any(s2 <= 0):
        raise ValueError("variances must be positive")
    v_hat = 1.0 / (1.0 / v_g + 1.0 / s2)
    u_hat = v_hat * (u_g / v_g + y / s2)
    if p >= 1:
        p_post = np.ones_like(y)
    elif p <= 0:
        p_post = np.zeros_like(y)
    else:
        log_c = 0.5 * np.log1p(v_g / s2)
        d = (y - u_g) ** 2 / (2 * (s2 + v_g)) - y ** 2 / (2 * s2)
        p_post = expit(-(log_c + math.log1p(-p) - math.log(p) + d))
    x_post = p_post * u_hat
    v_post = p_post * (1 - p_post) * u_hat ** 2 + p_post * v_hat
    return x_post, v_post


def complex_denoise(mu: np.ndarray, p: float, u_g: complex, v_g: float, nu: float):
    """Apply :func:`nle_denoise` to real and imaginary parts separately.

    Each part gets prior variance ``v_g / 2`` and noise ``nu / 2``.  Returns
    the complex posterior mean and the per-entry total posterior variance.
    """
    u_g = complex(u_g)
    xr, vr = nle_denoise(mu.real, p, u_g.real, v_g / 2, nu / 2)
    xi, vi = nle_denoise(mu.imag, p, u_g.imag, v_g / 2, nu / 2)
    return xr + 1j * xi, vr + vi


# --- damping ------------------------------------------------------------------

def damping_weights(U: np.ndarray, cond_limit: float = 1e12):
    """Optimal combiner ``U^{-1} 1 / (1^T U^{-1} 1)`` and its variance.

    Returns ``None`` when ``U`` is not a usable covariance (non-finite, not
    positive definite or badly conditioned); callers then fall back to
    keeping the previous estimate.
    """
    U = np.asarray(U, dtype=float)
    if not np.all(np.isfinite(U)):
        return None
    U = 0.5 * (U + U.T)
    d = np.sqrt(np.diag(U))
    if np.any(d <= 0):
        return None
    corr = U / np.outer(d, d)
    try:
        L = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        return None
    if np.min(np.diag(L)) ** 2 < 1.0 / cond_limit:
        return None
    ones = np.ones(U.shape[0])
    x = np.linalg.solve(U, ones)
    s = ones @ x
    if not s > 0:
        return None
    return x / s, 1.0 / s


# --- main loop ----------------------------------------------------------------

@dataclass
class MampState:
    """Iteration history (all vectors in the caller's ``h`` units)."""

    op: LinearOperator
    y: np.ndarray
    sigma2: float
    lam_min: float
    lam_max: float
    moments: SpectralMoments
    config: MampConfig
    h: list = field(default_factory=list)          # LLE inputs h_1..h_t
    resid: list = field(default_factory=list)      # y - A h_i
    V: np.ndarray | None = None                    # nu^gamma_{i,j}
    thetas: list = field(default_factory=list)
    kappas: list = field(default_factory=list)
    r_hat: np.ndarray | None = None
    AH_r_hat: np.ndarray | None = None
    mu: np.ndarray | None = None
    nu_theta: list = field(default_factory=list)
    zetas: list = field(default_factory=list)
    etas: np.ndarray | None = None
    eterms: list = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.h)

    @property
    def lam_bar(self) -> float:
        return 0.5 * (self.lam_min + self.lam_max)

    def window_start(self, t: int) -> int:
        m = self.config.memory
        return 1 if m is None else max(1, t - m + 1)

    def apply_B(self, v: np.ndarray, AH_v: np.ndarray | None = None) -> np.ndarray:
        if AH_v is None:
            AH_v = self.op.rmatvec(v)
        return self.lam_bar * v - self.op.matvec(AH_v)


def lle_step(state: MampState):
    """Advance the LLE to iteration ``t = state.t``.

    Returns ``(mu_t, nu^theta_{t,t}, zeta_t)``.
    """
    t = state.t
    w = state.moments
    V = state.V
    rho = state.sigma2 / V[t - 1, t - 1]
    theta = compute_theta(state.lam_min, state.lam_max, rho)
    state.thetas.append(theta)
    start = state.window_start(t)
    eta_prev = memory_weights(state.thetas[:t - 1] + [theta], state.kappas + [1.0], start)[:-1] \
        if t > 1 else np.zeros(0)
    et = e_terms(t, eta_prev, w, state.lam_bar, state.sigma2, V, start)
    kappa = compute_kappa_opt(t, et)
    state.kappas.append(kappa)
    state.eterms.append(et)
    nu = et.variance(kappa, w[0])

    R_t = state.resid[t - 1]
    if state.config.memory is None or start == 1:
        if state.r_hat is None:
            r_hat = kappa * R_t
        else:
            r_hat = theta * state.apply_B(state.r_hat, state.AH_r_hat) + kappa * R_t
    else:
        r_hat = np.zeros_like(R_t)
        for i in range(start, t + 1):
            if i > start:
                r_hat = state.thetas[i - 1] * state.apply_B(r_hat)
            r_hat = r_hat + state.kappas[i - 1] * state.resid[i - 1]
    AH_r = state.op.rmatvec(r_hat)
    eta = memory_weights(state.thetas, state.kappas, start)
    zeta = float(sum(e * w[t - i] for e, i in zip(eta, range(start, t + 1))))
    if zeta == 0 or not np.isfinite(zeta):
        raise MampError(f"degenerate LLE normalization at iteration {t}")
    corr = sum(e * w[t - i] * state.h[i - 1] for e, i in zip(eta, range(start, t + 1)))
    mu = (AH_r + corr) / zeta

    state.r_hat, state.AH_r_hat, state.mu, state.etas = r_hat, AH_r, mu, eta
    state.zetas.append(zeta)
    state.nu_theta.append(nu)
    return mu, nu, zeta


def lle_expansion(state: MampState) -> np.ndarray:
    """``mu_t`` rebuilt from the explicit memory expansion (slow; for checks).

    ``mu_t = (1/zeta) sum_i eta_{t,i} (Phi^H B^{t-i} (y - Phi h_i) + w_{t-i} h_i)``.
    """
    t = state.t
    start = state.window_start(t)
    eta = memory_weights(state.thetas, state.kappas, start)
    w = state.moments
    acc = np.zeros(state.op.shape[1], dtype=complex)
    for e, i in zip(eta, range(start, t + 1)):
        v = state.y - state.op.matvec(state.h[i - 1])
        for _ in range(t - i):
            v = state.apply_B(v)
        acc += e * (state.op.rmatvec(v) + w[t - i] * state.h[i - 1])
    return acc / state.zetas[-1]


def _residual_cov(state: MampState, ra: np.ndarray, rb: np.ndarray) -> float:
    m, n = state.op.shape
    return (np.vdot(ra, rb).real - m * state.sigma2) / (n * state.moments[0])


def orthogonalize_and_damp(state: MampState, x_post: np.ndarray, v_post: np.ndarray,
                           nu_theta: float) -> bool:
    """Form ``h_{t+1}`` from the denoised output; returns False on fallback."""
    t = state.t
    mu = state.mu
    vbar = float(np.mean(v_post))
    eta = vbar / nu_theta
    V = state.V
    ok = 0 < vbar and eta < 1 - 1e-9
    if ok:
        u = (x_post - eta * mu) / (1 - eta)
        d_u = vbar * nu_theta / (nu_theta - vbar)
        r_u = state.y - state.op.matvec(u)
        c_uu = _residual_cov(state, r_u, r_u)
        cov_u = np.empty(t)
        for i in range(t):
            c_ii = _residual_cov(state, state.resid[i], state.resid[i])
            c_ui = _residual_cov(state, r_u, state.resid[i])
            bound = math.sqrt(d_u * V[i, i])
            if c_uu > 0 and c_ii > 0:
                cov_u[i] = np.clip(c_ui / math.sqrt(c_uu * c_ii), -1, 1) * bound
            else:
                cov_u[i] = np.clip(c_ui, -bound, bound)
        ell = state.config.damping_window
        win = list(range(max(0, t - (ell - 1)), t))
        k = len(win)
        U = np.empty((k + 1, k + 1))
        U[:k, :k] = V[np.ix_(win, win)]
        U[:k, k] = U[k, :k] = cov_u[win]
        U[k, k] = d_u
        res = damping_weights(U) if k else (np.ones(1), d_u)
        if res is None or (k and res[1] > V[t - 1, t - 1]) or not np.isfinite(res[1]):
            ok = False
    if not ok:
        logger.debug("iteration %d: damping fallback", t)
        state.h.append(state.h[-1])
        state.resid.append(state.resid[-1])
        V[t, :t] = V[:t, t] = V[t - 1, :t]
        V[t, t] = V[t - 1, t - 1]
        return False
    weights, nu_new = res
    h_new = weights[-1] * u
    r_new = weights[-1] * r_u
    row = weights[-1] * cov_u
    for a, i in enumerate(win):
        h_new = h_new + weights[a] * state.h[i]
        r_new = r_new + weights[a] * state.resid[i]
        row = row + weights[a] * V[i, :t]
    state.h.append(h_new)
    state.resid.append(r_new)
    V[t, :t] = V[:t, t] = row
    V[t, t] = nu_new
    return True


@dataclass
class MampResult:
    estimate: np.ndarray
    nmse_trace: list
    iterations: int
    converged: bool
    trace: list           # dicts: t, nu_gamma, nu_theta, kappa, theta, nmse
    state: MampState

    def __iter__(self):
        """Unpacks as ``(estimate, nmse_trace, iterations)``."""
        return iter((self.estimate, self.nmse_trace, self.iterations))

    def trace_csv_rows(self) -> list[str]:
        rows = ["t,nu_gamma,nu_theta,kappa,theta,nmse"]
        for r in self.trace:
            nm = "" if r["nmse"] is None else f"{r['nmse']:.10g}"
            rows.append(f"{r['t']},{r['nu_gamma']:.10g},{r['nu_theta']:.10g},"
                        f"{r['kappa']:.10g},{r['theta']:.10g},{nm}")
        return rows


def init_state(op: LinearOperator, y: np.ndarray, config: MampConfig) -> MampState:
    """Rescale the problem and set up ``h_1`` and its error variance."""
    y = np.asarray(y, dtype=complex)
    if y.shape != (op.shape[0],):
        raise ValueError(f"observation length {y.shape} does not match operator {op.shape}")
    rng = np.random.default_rng(config.seed)
    if config.lam_max is None:
        s2 = power_iteration(op, rng=rng)
        lam_min, lam_max = 0.0, LAMBDA_SAFETY
    else:
        s2 = float(config.lam_max)
        lam_min = 0.0 if config.lam_min is None else config.lam_min / s2
        lam_max = 1.0
    if not s2 > 0:
        raise MampError("operator is zero")
    s = math.sqrt(s2)
    A = ScaledOperator(op, 1.0 / s)
    ys = y / s
    floor = 1e-14 * float(np.mean(np.abs(ys) ** 2)) + 1e-300
    sigma2 = max(config.noise_var / s2, floor)
    moments = SpectralMoments(A, 0.5 * (lam_min + lam_max), config.moments,
                              config.moment_rel_tol, exact_limit=config.exact_moment_limit,
                              rng=np.random.default_rng([config.seed, 1]))
    n = op.shape[1]
    Tmax = config.max_iterations + 2
    state = MampState(A, ys, sigma2, lam_min, lam_max, moments, config)
    state.V = np.zeros((Tmax, Tmax))
    p, ug, vg = config.sparsity, complex(config.prior_mean), config.prior_var
    h1 = np.full(n, p * ug, dtype=complex)
    state.h.append(h1)
    state.resid.append(ys - A.matvec(h1) if ug != 0 else ys.copy())
    state.V[0, 0] = p * vg + p * (1 - p) * abs(ug) ** 2
    return state


def mamp_estimate(op: LinearOperator, y: np.ndarray, config: MampConfig,
                  truth: np.ndarray | None = None) -> MampResult:
    """Run MAMP; returns the posterior-mean estimate and diagnostics.

    Stops when the posterior mean moves by less than ``tol`` relative, or
    after ``max_iterations``.  Raises :class:`MampDivergenceError` if the
    input error variance grows for several consecutive iterations.
    """
    state = init_state(op, y, config)
    p, ug, vg = config.sparsity, config.prior_mean, config.prior_var
    nu_floor = 1e-15 * state.V[0, 0]
    prev = state.h[0]
    nmse_trace, trace = [], []
    truth_energy = None if truth is None else float(np.vdot(truth, truth).real)
    streak = 0
    converged = False
    x_post = prev
    for t in range(1, config.max_iterations + 1):
        mu, nu, _ = lle_step(state)
        if not np.isfinite(nu) or not np.all(np.isfinite(mu)):
            raise MampDivergenceError(f"non-finite LLE output at iteration {t}")
        nu = max(nu, nu_floor)
        x_post, v_post = complex_denoise(mu, p, ug, vg, nu)
        nm = None
        if truth is not None and truth_energy > 0:
            d = x_post - truth
            nm = float(np.vdot(d, d).real / truth_energy)
            nmse_trace.append(nm)
        nu_gamma = state.V[t - 1, t - 1]
        trace.append(dict(t=t, nu_gamma=nu_gamma, nu_theta=nu, kappa=state.kappas[-1],
                          theta=state.thetas[-1], nmse=nm))
        step = np.linalg.norm(x_post - prev)
        if step <= config.tol * np.linalg.norm(prev):
            converged = True
            break
        prev = x_post
        if t == config.max_iterations:
            break
        orthogonalize_and_damp(state, x_post, v_post, nu)
        new_nu = state.V[t, t]
        if not np.isfinite(new_nu):
            raise MampDivergenceError(f"non-finite error variance at iteration {t}")
        streak = streak + 1 if new_nu > nu_gamma else 0
        if streak >= DIVERGENCE_STREAK:
            raise MampDivergenceError(
                f"error variance increased {DIVERGENCE_STREAK} iterations in a row (t={t})")
    logger.debug("MAMP stopped after %d iterations (converged=%s)", t, converged)
    return MampResult(x_post, nmse_trace, t, converged, trace, state)
