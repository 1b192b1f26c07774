"""Continuous-time ODDM synthesis and matched filtering at small size.

This is a slow validation oracle for the discrete input-output relation:
frames are modulated with a square-root raised-cosine pulse train, pushed
through a delay-Doppler channel on a fine time grid, and demodulated with
the matched filter sampled on the delay-Doppler grid.  Integrals become
Riemann sums on a grid of ``oversampling`` samples per delay resolution.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .channel import PathSet

logger = logging.getLogger(__name__)

MAX_ORACLE_M = 64
MAX_ORACLE_N = 16
DEFAULT_ROLLOFF = 0.25


def srrc(t: np.ndarray, symbol_period: float, rolloff: float) -> np.ndarray:
    """Unnormalized square-root raised-cosine impulse response."""
    x = np.asarray(t, dtype=float) / symbol_period
    b = rolloff
    out = np.empty_like(x)
    at_zero = np.isclose(x, 0.0, atol=1e-12)
    at_sing = np.isclose(np.abs(4 * b * x), 1.0, atol=1e-9) if b > 0 else np.zeros_like(at_zero)
    regular = ~(at_zero | at_sing)
    xr = x[regular]
    num = np.sin(np.pi * xr * (1 - b)) + 4 * b * xr * np.cos(np.pi * xr * (1 + b))
    den = np.pi * xr * (1 - (4 * b * xr) ** 2)
    out[regular] = num / den
    out[at_zero] = 1 - b + 4 * b / np.pi
    if b > 0:
        out[at_sing] = (b / np.sqrt(2)) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                          + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
    return out


class OddmWaveform:
    """Sampled ODDM modulator/demodulator for one ``M x N`` frame.

    Parameters
    ----------
    M, N : int
        Delay and Doppler grid sizes.
    Q : int
        Pulse half-length in delay resolutions; the pulse spans ``2Q T/M``.
    oversampling : int
        Samples per delay resolution ``T/M``.
    rolloff : float
        SRRC roll-off factor.
    extension : int or None
        Pulses added before and after the ``N``-pulse train so the transmit
        signal is periodic over every receive window.  Defaults to enough
        periods to cover the pulse tails plus one frame-period wrap.
    """

    def __init__(self, M: int, N: int, Q: int = 20, oversampling: int = 8,
                 rolloff: float = DEFAULT_ROLLOFF, extension: int | None = None):
        if M > MAX_ORACLE_M or N > MAX_ORACLE_N:
            raise ValueError(f"waveform oracle limited to M <= {MAX_ORACLE_M}, N <= {MAX_ORACLE_N}")
        if oversampling < 4:
            raise ValueError("oversampling must be at least 4 samples per delay resolution")
        if Q < 1 or not 0 <= rolloff <= 1:
            raise ValueError("invalid pulse parameters")
        self.M, self.N, self.Q, self.os, self.rolloff = M, N, Q, oversampling, rolloff
        self.ext = math.ceil(Q / M) + 1 if extension is None else int(extension)
        self.T = 1.0  # all times in units of T
        self.dt = 1.0 / (M * oversampling)
        half = Q * oversampling
        tp = np.arange(-half, half + 1) * self.dt
        a = srrc(tp, 1.0 / M, rolloff)
        a /= np.sqrt(np.sum(a ** 2) * self.dt * N)  # energy 1/N
        self.pulse = a
        self.pulse_half = half
        # sample grid covering the extended train plus a slot-delay margin
        first = -(self.ext * M + Q) * oversampling
        last = ((N + self.ext) * M + M + Q) * oversampling
        self.n0 = -first
        self.num_samples = last - first + 1
        self.t = (np.arange(self.num_samples) - self.n0) * self.dt

    def _train(self, start_slot: int, first_pulse: int, last_pulse: int) -> np.ndarray:
        """Pulse train starting at slot ``start_slot``, pulses ``first..last`` inclusive."""
        g = np.zeros(self.num_samples)
        L = self.pulse.size
        for k in range(first_pulse, last_pulse + 1):
            centre = self.n0 + (start_slot + k * self.M) * self.os
            lo = centre - self.pulse_half
            g[lo:lo + L] += self.pulse
        return g

    def modulate(self, X: np.ndarray, periodic: bool = True) -> np.ndarray:
        """Transmit samples ``x(t)`` on ``self.t``."""
        M, N = self.M, self.N
        if X.shape != (M, N):
            raise ValueError(f"frame must be {M}x{N}")
        ext = self.ext if periodic else 0
        x = np.zeros(self.num_samples, dtype=complex)
        n = np.arange(N)
        for m in range(M):
            g = self._train(m, -ext, N - 1 + ext)
            support = np.flatnonzero(g)
            tau = self.t[support] - m / M
            carriers = np.exp(2j * np.pi * np.outer(tau, n) / N) @ X[m]
            x[support] += g[support] * carriers
        return x

    def channel(self, x: np.ndarray, paths: PathSet) -> np.ndarray:
        """``sum_p h_p x(t - tau_p) exp(j2pi nu_p (t - tau_p))`` with integer grid shifts."""
        y = np.zeros_like(x)
        for p in paths:
            shift = int(p.delay_index) * self.os
            delayed = np.zeros_like(x)
            delayed[shift:] = x[:x.size - shift] if shift else x
            nu = p.doppler_index / self.N  # in units of 1/T
            tau = p.delay_index / self.M
            y += p.gain * delayed * np.exp(2j * np.pi * nu * (self.t - tau))
        return y

    def demodulate(self, y: np.ndarray) -> np.ndarray:
        """Matched-filter outputs sampled at ``(mT/M, n/(NT))``."""
        M, N = self.M, self.N
        Y = np.zeros((M, N), dtype=complex)
        n = np.arange(N)
        for m in range(M):
            g = self._train(m, 0, N - 1)
            support = np.flatnonzero(g)
            tau = self.t[support] - m / M
            kernel = np.exp(-2j * np.pi * np.outer(n, tau) / N)
            Y[m] = kernel @ (g[support] * y[support]) * self.dt
        return Y

    def run(self, X: np.ndarray, paths: PathSet, periodic: bool = True) -> np.ndarray:
        return self.demodulate(self.channel(self.modulate(X, periodic), paths))

    def ambiguity_residual(self, max_doppler: int = 0) -> float:
        """Worst relative leakage of a single symbol off its ideal grid position.

        A unit symbol is placed at the frame centre on the first, middle and
        last subcarrier, shifted by each Doppler index in
        ``[-max_doppler, max_doppler]``, demodulated and compared with the
        ideal one-entry response.  Edge subcarriers exercise the Doppler
        wrap, where the pulse-train orthogonality is weakest.  Returns an
        amplitude ratio.
        """
        from .modem import shift_frame

        M, N = self.M, self.N
        worst = 0.0
        for n0 in sorted({0, N // 2, N - 1}):
            X = np.zeros((M, N), dtype=complex)
            X[M // 2, n0] = 1.0
            for l in range(-max_doppler, max_doppler + 1):
                paths = PathSet.from_paths([(1.0, 0, l, 0.0)])
                Y = self.run(X, paths)
                ideal = shift_frame(X, 0, l)
                worst = max(worst, np.linalg.norm(Y - ideal) / np.linalg.norm(ideal))
        return float(worst)


def waveform_oracle(X: np.ndarray, paths: PathSet, oversampling: int = 8, Q: int = 20,
                    rolloff: float = DEFAULT_ROLLOFF) -> np.ndarray:
    """Received delay-Doppler frame computed from the continuous-time model."""
    X = np.asarray(X)
    if X.ndim == 3:
        if X.shape[0] != 1:
            raise ValueError("waveform oracle handles a single antenna")
        X = X[0]
    wf = OddmWaveform(X.shape[0], X.shape[1], Q=Q, oversampling=oversampling, rolloff=rolloff)
    return wf.run(X, paths)


def db(ratio_amplitude: float) -> float:
    return 20 * np.log10(max(ratio_amplitude, 1e-300))
