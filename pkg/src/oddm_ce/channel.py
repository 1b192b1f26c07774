"""Physical multipath channels on the delay-Doppler grid.

A channel is a small set of paths, each with a real gain, an integer delay
index, an integer Doppler index and a departure angle.  Paths are drawn from
a tapped power-delay profile and quantized to the grid of an ODDM frame with
``M`` delay bins and ``N`` Doppler bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

SPEED_OF_LIGHT = 2.998e8  # m/s

# 3GPP Extended Vehicular A taps.
EVA_DELAYS_NS = (0.0, 30.0, 150.0, 310.0, 370.0, 710.0, 1090.0, 1730.0, 2510.0)
EVA_POWERS_DB = (0.0, -1.5, -1.4, -3.6, -0.6, -9.1, -7.0, -12.0, -16.9)

MAX_COLLISION_RESAMPLES = 100


class ChannelError(ValueError):
    """Invalid channel specification or path set."""


@dataclass(frozen=True)
class PowerProfile:
    name: str
    delays_ns: tuple[float, ...]
    powers_db: tuple[float, ...]

    def __post_init__(self):
        if len(self.delays_ns) != len(self.powers_db) or not self.delays_ns:
            raise ChannelError("profile needs matching, non-empty delay and power lists")
        d = np.asarray(self.delays_ns)
        if np.any(d < 0) or np.any(np.diff(d) <= 0):
            raise ChannelError("profile delays must be non-negative and strictly increasing")

    @property
    def linear_powers(self) -> np.ndarray:
        return 10.0 ** (np.asarray(self.powers_db) / 10.0)


EVA = PowerProfile("eva", EVA_DELAYS_NS, EVA_POWERS_DB)
PROFILES = {"eva": EVA}


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


def load_profile(path: str | Path) -> PowerProfile:
    """Read a power-delay profile from a ``key = value`` text file.

    Recognised keys are ``name``, ``delay_ns`` and ``power_db``; list values
    are comma or whitespace separated.  Lines starting with ``#`` are ignored.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ChannelError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    missing = {"delay_ns", "power_db"} - values.keys()
    if missing:
        raise ChannelError(f"{path}: missing keys {sorted(missing)}")
    return PowerProfile(
        values.get("name", Path(path).stem),
        _parse_float_list(values["delay_ns"]),
        _parse_float_list(values["power_db"]),
    )


def get_profile(name_or_path: str) -> PowerProfile:
    if name_or_path.lower() in PROFILES:
        return PROFILES[name_or_path.lower()]
    return load_profile(name_or_path)


@dataclass(frozen=True)
class ChannelSpec:
    """Scenario parameters needed to draw and grid a channel.

    ``num_delay_bins`` (M) and ``num_doppler_bins`` (N) are the ODDM frame
    dimensions; they fix the delay resolution ``1/(M*df)`` and the Doppler
    resolution ``df/N``.  ``delay_scale`` stretches the profile delays before
    quantization; ``None`` stretches the largest profile delay onto the last
    delay bin, which lets small frames keep a multi-bin delay spread.
    """

    num_paths: int
    max_delay_index: int  # L
    max_doppler_index: int  # K
    num_antennas: int = 1
    num_delay_bins: int = 512  # M
    num_doppler_bins: int = 32  # N
    carrier_freq_hz: float = 5e9
    subcarrier_spacing_hz: float = 15e3
    speed_kmh: float = 250.0
    antenna_spacing: float = 0.5  # d_BS / lambda_c
    profile: PowerProfile = EVA
    delay_scale: float | None = 1.0
    complex_gains: bool = False
    normalize: bool = True

    def __post_init__(self):
        if self.num_paths < 1:
            raise ChannelError("num_paths must be >= 1")
        if self.max_delay_index < 1:
            raise ChannelError("max_delay_index (L) must be >= 1")
        if self.max_doppler_index < 0:
            raise ChannelError("max_doppler_index (K) must be >= 0")
        if self.num_antennas < 1:
            raise ChannelError("num_antennas must be >= 1")
        if not 0.0 < self.antenna_spacing <= 0.5:
            raise ChannelError("antenna_spacing must lie in (0, 0.5] to avoid angle ambiguity")
        if self.max_delay_index > self.num_delay_bins:
            raise ChannelError("L cannot exceed the number of delay bins M")
        if 2 * self.max_doppler_index + 1 > self.num_doppler_bins:
            raise ChannelError("2K+1 cannot exceed the number of Doppler bins N")
        if self.speed_kmh < 0 or self.carrier_freq_hz <= 0 or self.subcarrier_spacing_hz <= 0:
            raise ChannelError("speed, carrier frequency and subcarrier spacing must be positive")

    @property
    def num_cells(self) -> int:
        return (2 * self.max_doppler_index + 1) * self.max_delay_index

    @property
    def delay_resolution_s(self) -> float:
        return 1.0 / (self.num_delay_bins * self.subcarrier_spacing_hz)

    @property
    def doppler_resolution_hz(self) -> float:
        return self.subcarrier_spacing_hz / self.num_doppler_bins

    @property
    def max_doppler_hz(self) -> float:
        return max_doppler_hz(self.speed_kmh, self.carrier_freq_hz)

    def scaled_delays_s(self) -> np.ndarray:
        delays = np.asarray(self.profile.delays_ns) * 1e-9
        if self.delay_scale is None:
            span = delays[-1]
            scale = 1.0 if span == 0 else (self.max_delay_index - 1) * self.delay_resolution_s / span
        else:
            scale = self.delay_scale
        return delays * scale

    def validate_for_sampling(self) -> None:
        """Reject profiles or speeds that cannot fit on the delay-Doppler grid."""
        tol = 1e-9
        delay_bins = self.scaled_delays_s()[-1] / self.delay_resolution_s
        if delay_bins > self.max_delay_index - 1 + tol:
            raise ChannelError(
                f"profile spans {delay_bins:.3f} delay bins, grid allows {self.max_delay_index - 1}"
            )
        doppler_bins = self.max_doppler_hz / self.doppler_resolution_hz
        if doppler_bins > self.max_doppler_index + tol:
            raise ChannelError(
                f"max Doppler spans {doppler_bins:.3f} bins, grid allows {self.max_doppler_index}"
            )


def max_doppler_hz(speed_kmh: float, carrier_freq_hz: float) -> float:
    return speed_kmh / 3.6 * carrier_freq_hz / SPEED_OF_LIGHT


class PathParams(NamedTuple):
    gain: float | complex
    delay_index: int
    doppler_index: int
    angle: float


@dataclass
class PathSet:
    """P paths stored column-wise."""

    gains: np.ndarray
    delay_indices: np.ndarray
    doppler_indices: np.ndarray
    angles: np.ndarray
    gain_variances: np.ndarray = field(default=None)

    def __post_init__(self):
        self.gains = np.asarray(self.gains)
        self.delay_indices = np.asarray(self.delay_indices, dtype=int)
        self.doppler_indices = np.asarray(self.doppler_indices, dtype=int)
        self.angles = np.asarray(self.angles, dtype=float)
        n = len(self.gains)
        if not (len(self.delay_indices) == len(self.doppler_indices) == len(self.angles) == n):
            raise ChannelError("path arrays must have equal length")
        if self.gain_variances is None:
            self.gain_variances = np.abs(self.gains) ** 2

    def __len__(self) -> int:
        return len(self.gains)

    def __iter__(self) -> Iterator[PathParams]:
        for g, k, l, th in zip(self.gains, self.delay_indices, self.doppler_indices, self.angles):
            yield PathParams(g.item(), int(k), int(l), float(th))

    @classmethod
    def from_paths(cls, paths: Sequence[PathParams]) -> "PathSet":
        if not paths:
            return cls(np.zeros(0), np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        g, k, l, th = zip(*paths)
        return cls(np.array(g), np.array(k), np.array(l), np.array(th))


def sample_paths(spec: ChannelSpec, rng: np.random.Generator) -> PathSet:
    """Draw a random path set for ``spec``.

    Taps are chosen from the profile without replacement with probability
    proportional to their power (with replacement once the profile is
    exhausted).  Each path gets its tap's quantized delay, a Doppler index
    ``round(nu_max * cos(phi) * N T)`` with ``phi`` uniform, a zero-mean
    Gaussian gain with the tap's relative variance and a uniform angle.  A
    path landing on an occupied grid cell redraws ``phi``; after
    ``MAX_COLLISION_RESAMPLES`` failures it switches to another tap, and if
    no tap fits a :class:`ChannelError` is raised.
    """
    spec.validate_for_sampling()
    P = spec.num_paths
    delays = np.rint(spec.scaled_delays_s() / spec.delay_resolution_s).astype(int)
    powers = spec.profile.linear_powers
    ntaps = len(powers)
    nu_bins = spec.max_doppler_hz / spec.doppler_resolution_hz

    order = list(rng.choice(ntaps, size=min(P, ntaps), replace=False, p=powers / powers.sum()))
    while len(order) < P:
        order.append(int(rng.choice(ntaps, p=powers / powers.sum())))

    occupied: set[tuple[int, int]] = set()
    taps, dly, dop = [], [], []
    for first_tap in order:
        candidates = [first_tap] + [int(t) for t in rng.permutation(ntaps) if t != first_tap]
        for tap in candidates:
            k = int(delays[tap])
            for _ in range(MAX_COLLISION_RESAMPLES):
                l = int(np.rint(nu_bins * math.cos(rng.uniform(0.0, 2 * math.pi))))
                if (k, l) not in occupied:
                    break
            else:
                continue
            break
        else:
            raise ChannelError(f"could not place {P} paths on distinct delay-Doppler cells")
        occupied.add((k, l))
        taps.append(tap)
        dly.append(k)
        dop.append(l)

    var = powers[taps]
    if spec.normalize:
        var = var / var.sum()
    if spec.complex_gains:
        gains = np.sqrt(var / 2) * (rng.standard_normal(P) + 1j * rng.standard_normal(P))
    else:
        gains = np.sqrt(var) * rng.standard_normal(P)
    angles = rng.uniform(-math.pi / 2, math.pi / 2, size=P)
    return PathSet(gains, np.array(dly), np.array(dop), angles, gain_variances=var)


@dataclass
class DDGrid:
    """Gain grid ``G`` (2K+1 Doppler rows x L delay columns) and angle map.

    Row ``d2 + K`` holds Doppler index ``d2``; column ``d1`` holds delay
    index ``d1``.  ``alpha`` stores the spatial frequency
    ``(d/lambda) * sin(theta)`` of the path on each occupied cell.
    """

    gains: np.ndarray
    alpha: np.ndarray

    @property
    def K(self) -> int:
        return (self.gains.shape[0] - 1) // 2

    @property
    def L(self) -> int:
        return self.gains.shape[1]

    def occupied(self) -> list[tuple[int, int]]:
        """(delay, doppler) pairs of the nonzero cells, in row-major order."""
        rows, cols = np.nonzero(self.gains)
        return [(int(c), int(r) - self.K) for r, c in zip(rows, cols)]

    def to_paths(self, spacing: float) -> PathSet:
        paths = []
        for d1, d2 in self.occupied():
            a = self.alpha[d2 + self.K, d1]
            paths.append(PathParams(self.gains[d2 + self.K, d1].item(), d1, d2,
                                    math.asin(np.clip(a / spacing, -1, 1))))
        return PathSet.from_paths(paths)


def to_grid(paths: PathSet, spec: ChannelSpec) -> DDGrid:
    K, L = spec.max_doppler_index, spec.max_delay_index
    dtype = complex if np.iscomplexobj(paths.gains) else float
    G = np.zeros((2 * K + 1, L), dtype=dtype)
    alpha = np.zeros((2 * K + 1, L))
    seen = set()
    for p in paths:
        if not (0 <= p.delay_index < L and -K <= p.doppler_index <= K):
            raise ChannelError(f"path {p} lies outside the {2 * K + 1}x{L} grid")
        row = p.doppler_index + K
        if (row, p.delay_index) in seen:
            raise ChannelError(f"duplicate cell (delay={p.delay_index}, doppler={p.doppler_index})")
        seen.add((row, p.delay_index))
        G[row, p.delay_index] = p.gain
        alpha[row, p.delay_index] = spec.antenna_spacing * math.sin(p.angle)
    return DDGrid(G, alpha)


def steering_vector(theta: float, num_antennas: int, spacing: float) -> np.ndarray:
    """ULA response ``exp(j 2 pi n spacing sin(theta))``, n = 0..N_t-1."""
    if num_antennas < 1:
        raise ValueError("num_antennas must be >= 1")
    n = np.arange(num_antennas)
    return np.exp(2j * np.pi * n * spacing * np.sin(theta))
