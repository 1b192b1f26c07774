"""Departure-angle estimation from a spatial snapshot.

The snapshot is transformed with the normalized DFT, the strongest peaks
are picked, and each peak is refined with a phase rotation
``Diag(1, e^{j dtheta}, ..., e^{j (N_t - 1) dtheta})`` that re-centres the
off-grid tone onto its DFT bin.  Bins are 1-based throughout: bin ``n``
corresponds to spatial frequency ``(n - 1) / N_t``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5) - 1) / 2


class AngleWarning(UserWarning):
    """Non-fatal estimation diagnostics (missing peaks, merged paths, clamping)."""


@dataclass(frozen=True)
class AngleEstimate:
    bin: int            # 1-based DFT bin
    rotation: float     # phase rotation in [-pi/N_t, pi/N_t]
    angle: float        # radians
    power: float = 0.0  # rotated peak power


def dft_spectrum(snapshot: np.ndarray) -> np.ndarray:
    """``|U^H y|^2`` with the unitary DFT; preserves total power."""
    y = np.asarray(snapshot, dtype=complex)
    return np.abs(np.fft.fft(y) / math.sqrt(y.size)) ** 2


def find_peaks(power: np.ndarray, P: int) -> list[int]:
    """1-based bins of the ``P`` strongest circular local maxima.

    A bin is a local maximum when it is at least its left neighbour and
    strictly above its right neighbour (so plateaus yield one bin), and
    above round-off relative to the strongest bin.  Picked peaks keep a
    one-bin guard zone.  Warns when fewer than ``P`` exist.
    """
    power = np.asarray(power, dtype=float)
    n = power.size
    if P < 1 or P > max(1, n // 2):
        raise ValueError(f"P must be in [1, N_t/2], got {P}")
    if n == 1:
        return [1]
    left, right = np.roll(power, 1), np.roll(power, -1)
    floor = 1e-12 * power.max()  # ignore round-off ripple in empty bins
    cand = np.flatnonzero((power > floor) & (power >= left) & (power > right))
    cand = cand[np.argsort(-power[cand], kind="stable")]
    chosen: list[int] = []
    for c in cand:
        if all(min((c - s) % n, (s - c) % n) > 1 for s in chosen):
            chosen.append(int(c))
        if len(chosen) == P:
            break
    if len(chosen) < P:
        warnings.warn(f"found {len(chosen)} resolvable peaks, expected {P}", AngleWarning,
                      stacklevel=2)
    return [c + 1 for c in chosen]


def _bin_coefficients(snapshot: np.ndarray, n_p: int) -> np.ndarray:
    y = np.asarray(snapshot, dtype=complex)
    N = y.size
    k = np.arange(N)
    return y * np.exp(-2j * np.pi * k * (n_p - 1) / N) / math.sqrt(N)


def rotated_power(snapshot: np.ndarray, n_p: int, rotation) -> np.ndarray:
    """Power in bin ``n_p`` after applying the rotation ``e^{j k dtheta}``."""
    c = _bin_coefficients(snapshot, n_p)
    k = np.arange(c.size)
    rot = np.atleast_1d(np.asarray(rotation, dtype=float))
    vals = np.abs(np.exp(1j * np.outer(rot, k)) @ c) ** 2
    return vals if np.ndim(rotation) else float(vals[0])


def refine_rotation(snapshot: np.ndarray, n_p: int, grid_size: int = 65,
                    tol: float = 1e-8) -> float:
    """Rotation in ``[-pi/N_t, pi/N_t]`` maximizing the power in bin ``n_p``.

    Uniform grid (including zero), golden-section search on the bracket
    around the best grid point, then a few safeguarded Newton steps on the
    analytic derivative.
    """
    if grid_size < 3:
        raise ValueError("grid_size must be at least 3")
    c = _bin_coefficients(snapshot, n_p)
    N = c.size
    k = np.arange(N)
    half = math.pi / N
    if grid_size % 2 == 0:
        grid_size += 1  # keep zero on the grid
    grid = np.linspace(-half, half, grid_size)
    f = lambda d: abs(np.exp(1j * k * d) @ c) ** 2  # noqa: E731
    vals = rotated_power(snapshot, n_p, grid)
    i = int(np.argmax(vals))
    step = grid[1] - grid[0]
    a, b = max(-half, grid[i] - step), min(half, grid[i] + step)
    x1, x2 = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = f(x1)
    best = 0.5 * (a + b)
    fbest = f(best)
    for _ in range(5):
        e = np.exp(1j * k * best)
        S, S1, S2 = e @ c, (1j * k * e) @ c, (-(k ** 2) * e) @ c
        g = 2 * (np.conj(S) * S1).real
        hss = 2 * (abs(S1) ** 2 + (np.conj(S) * S2).real)
        if hss >= 0 or g == 0:
            break
        cand = min(half, max(-half, best - g / hss))
        fc = f(cand)
        if fc < fbest:
            break
        best, fbest = cand, fc
    if vals[grid_size // 2] > fbest:  # never worse than no rotation
        best = 0.0
    return float(best)


def bins_to_angles(estimates, N_t: int, spacing: float) -> list[float]:
    """Map ``(bin, rotation)`` pairs to angles in radians.

    Bins up to ``N_t * spacing`` use the direct branch, the rest the wrapped
    (negative-angle) branch.  Out-of-range arcsin arguments are clamped with
    a warning.
    """
    if not 0 < spacing <= 0.5:
        raise ValueError("antenna spacing must lie in (0, 1/2] wavelengths")
    out = []
    for est in estimates:
        n_p, rot = (est.bin, est.rotation) if isinstance(est, AngleEstimate) else est
        offset = n_p - 1 if n_p <= N_t * spacing else n_p - N_t - 1
        arg = offset / (N_t * spacing) - rot / (2 * math.pi * spacing)
        if abs(arg) > 1:
            warnings.warn(f"arcsin argument {arg:.6g} clamped to [-1, 1]", AngleWarning,
                          stacklevel=2)
            arg = max(-1.0, min(1.0, arg))
        out.append(math.asin(arg))
    return out


def estimate_angles(snapshot: np.ndarray, P: int, spacing: float = 0.5,
                    grid_size: int = 65) -> list[AngleEstimate]:
    """Full pipeline: spectrum, peaks, rotation refinement, angle mapping.

    Peaks whose refined frequencies coincide are merged into one estimate
    with a warning.
    """
    y = np.asarray(snapshot, dtype=complex)
    N_t = y.size
    peaks = find_peaks(dft_spectrum(y), P)
    results: list[AngleEstimate] = []
    seen: list[float] = []
    for n_p in peaks:
        rot = refine_rotation(y, n_p, grid_size)
        freq = ((n_p - 1) / N_t - rot / (2 * math.pi)) % 1.0
        if any(min(abs(freq - s), 1 - abs(freq - s)) < 0.5 / N_t for s in seen):
            warnings.warn(f"peak at bin {n_p} merges with an earlier path", AngleWarning,
                          stacklevel=2)
            continue
        seen.append(freq)
        theta = bins_to_angles([(n_p, rot)], N_t, spacing)[0]
        results.append(AngleEstimate(n_p, rot, theta, rotated_power(y, n_p, rot)))
    return results
