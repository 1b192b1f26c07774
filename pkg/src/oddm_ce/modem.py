"""Discrete ODDM input-output relation and the effective linear model.

Conventions
-----------
* Frames are arrays ``X[n_t, m, n]`` with ``m`` the delay (time-slot) index
  and ``n`` the Doppler (subcarrier) index.
* ``vec`` of an ``M x N`` frame is the row-major flattening, entry
  ``m * N + n``; each block of ``N`` consecutive entries is one delay slot.
* Channel-vector entries are ordered antenna-major, delay-middle,
  Doppler-minor: ``n_t * (2K+1) * L + d1 * (2K+1) + (d2 + K)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .channel import DDGrid
from .operators import DenseOperator, LinearOperator

DEFAULT_ELEMENT_BUDGET = 2 ** 26

CONSTELLATIONS = {
    "bpsk": np.array([1.0, -1.0], dtype=complex),
    "4qam": np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2),
    "16qam": (np.add.outer(np.array([-3, -1, 1, 3]), 1j * np.array([-3, -1, 1, 3])).ravel()
              / np.sqrt(10)),
}
CONSTELLATIONS["qpsk"] = CONSTELLATIONS["4qam"]


class DimensionError(ValueError):
    pass


def pilot_frames(num_antennas: int, M: int, N: int, rng: np.random.Generator,
                 constellation: str = "4qam") -> np.ndarray:
    """I.i.d. unit-energy pilot symbols, shape ``(N_t, M, N)``."""
    try:
        points = CONSTELLATIONS[constellation.lower()]
    except KeyError:
        raise ValueError(f"unknown constellation {constellation!r}") from None
    return points[rng.integers(len(points), size=(num_antennas, M, N))]


def grid_index(n_t: int, d1: int, d2: int, K: int, L: int) -> int:
    """Flat column index of (antenna, delay, Doppler)."""
    if not (0 <= d1 < L and -K <= d2 <= K and n_t >= 0):
        raise IndexError((n_t, d1, d2))
    return n_t * (2 * K + 1) * L + d1 * (2 * K + 1) + (d2 + K)


def unravel_grid_index(index: int, K: int, L: int) -> tuple[int, int, int]:
    cells = (2 * K + 1) * L
    n_t, rem = divmod(int(index), cells)
    d1, r = divmod(rem, 2 * K + 1)
    return n_t, d1, r - K


def shift_frame(X: np.ndarray, d1: int, d2: int) -> np.ndarray:
    """Delay-Doppler shift of one frame (or a stack of frames).

    ``out[m, n] = exp(j2pi d2 (m - d1) / MN) * X[m - d1, (n - d2) mod N]``
    for ``m >= d1``; rows ``m < d1`` read row ``m - d1 + M`` and pick up the
    extra factor ``exp(-j2pi n'' / N)`` with ``n'' = (n - d2) mod N``.
    """
    M, N = X.shape[-2:]
    src = X
    if d1:
        wrap = np.exp(-2j * np.pi * np.arange(N) / N)
        src = X.astype(complex, copy=True)
        src[..., M - d1:, :] *= wrap
    out = np.roll(np.roll(src, d1, axis=-2), d2, axis=-1)
    row_phase = np.exp(2j * np.pi * d2 * (np.arange(M) - d1) / (M * N))
    return out * row_phase[:, None]


def shift_frame_adjoint(Y: np.ndarray, d1: int, d2: int) -> np.ndarray:
    """Adjoint of :func:`shift_frame` for fixed ``(d1, d2)``."""
    M, N = Y.shape[-2:]
    row_phase = np.exp(-2j * np.pi * d2 * (np.arange(M) - d1) / (M * N))
    src = np.roll(np.roll(Y * row_phase[:, None], -d2, axis=-1), -d1, axis=-2)
    if d1:
        src[..., M - d1:, :] *= np.exp(2j * np.pi * np.arange(N) / N)
    return src


def apply_channel(frames: np.ndarray, grid: DDGrid, noise_var: float = 0.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Received ``M x N`` frame for per-antenna pilots ``frames``."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    Nt, M, N = frames.shape
    K, L = grid.K, grid.L
    if L > M or 2 * K + 1 > N:
        raise DimensionError(f"grid {2 * K + 1}x{L} does not fit frames of size {M}x{N}")
    Y = np.zeros((M, N), dtype=complex)
    n_t = np.arange(Nt)
    for d1, d2 in grid.occupied():
        h = grid.gains[d2 + K, d1]
        steer = np.exp(2j * np.pi * n_t * grid.alpha[d2 + K, d1])
        combined = np.tensordot(steer, frames, axes=1)
        Y += h * shift_frame(combined, d1, d2)
    if noise_var > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        Y += complex_noise(Y.shape, noise_var, rng)
    return Y


def complex_noise(shape, noise_var: float, rng: np.random.Generator) -> np.ndarray:
    s = np.sqrt(noise_var / 2)
    return s * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def build_h_tilde(grid: DDGrid, num_antennas: int) -> np.ndarray:
    """Stack of ``vec(G * F_nt)`` over antennas (column-major ``vec``)."""
    G = grid.gains
    mask = G != 0
    blocks = []
    for n_t in range(num_antennas):
        F = np.where(mask, np.exp(2j * np.pi * n_t * grid.alpha), 1.0)
        blocks.append((G * F).ravel(order="F"))
    return np.concatenate(blocks).astype(complex)


def cyclic_permutation(N: int) -> np.ndarray:
    """``C`` with ``(C v)[n] = v[n-1 mod N]``."""
    return np.roll(np.eye(N), 1, axis=0)


def wrap_phase(N: int) -> np.ndarray:
    return np.diag(np.exp(-2j * np.pi * np.arange(N) / N))


def build_dense_matrix(frames: np.ndarray, K: int, L: int) -> np.ndarray:
    """Materialize the equivalent coefficient matrix from its block structure.

    Column block ``(n_t, d1, d2)``, row block ``m`` holds
    ``exp(j2pi d2 i / MN) C^d2 x_i`` with ``i = m - d1`` when ``m >= d1``,
    and ``exp(j2pi d2 (i - M) / MN) C^d2 D x_i`` with ``i = m - d1 + M``
    otherwise, ``x_i`` being row ``i`` of the antenna's pilot frame.
    """
    Nt, M, N = frames.shape
    C = cyclic_permutation(N)
    D = wrap_phase(N)
    Cpow = [np.linalg.matrix_power(C, k % N) for k in range(-K, K + 1)]
    out = np.zeros((M * N, Nt * (2 * K + 1) * L), dtype=complex)
    for n_t in range(Nt):
        X = frames[n_t]
        for d1 in range(L):
            for d2 in range(-K, K + 1):
                col = grid_index(n_t, d1, d2, K, L)
                Ck = Cpow[d2 + K]
                for m in range(M):
                    if m >= d1:
                        i = m - d1
                        z = np.exp(2j * np.pi * d2 * i / (M * N)) * (Ck @ X[i])
                    else:
                        i = m - d1 + M
                        z = np.exp(2j * np.pi * d2 * (i - M) / (M * N)) * (Ck @ (D @ X[i]))
                    out[m * N:(m + 1) * N, col] = z
    return out


class ODDMOperator(LinearOperator):
    """Matrix-free equivalent coefficient matrix.

    ``apply`` combines the antennas first, then shifts once per delay-Doppler
    cell, so it never forms the ``MN x (2K+1) L N_t`` matrix.
    """

    def __init__(self, frames: np.ndarray, K: int, L: int):
        Nt, M, N = frames.shape
        super().__init__((M * N, Nt * (2 * K + 1) * L))
        self.frames = np.asarray(frames, dtype=complex)
        self.K, self.L = K, L
        self._flat = self.frames.reshape(Nt, M * N)

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]

    def _cells(self):
        for d1 in range(self.L):
            for d2 in range(-self.K, self.K + 1):
                yield d1, d2

    def _matvec(self, h):
        Nt, M, N = self.frames.shape
        H = h.reshape(Nt, -1)  # (antenna, cell)
        Z = (H.T @ self._flat).reshape(-1, M, N)  # combined frame per cell
        Y = np.zeros((M, N), dtype=complex)
        for c, (d1, d2) in enumerate(self._cells()):
            Y += shift_frame(Z[c], d1, d2)
        return Y.ravel()

    def _rmatvec(self, y):
        Nt, M, N = self.frames.shape
        Y = y.reshape(M, N)
        S = np.stack([shift_frame_adjoint(Y, d1, d2).ravel() for d1, d2 in self._cells()])
        return (self._flat.conj() @ S.T).ravel()

    def matmat(self, X):
        # batched over columns; one shift per cell for the whole block
        X = np.asarray(X)
        p = X.shape[1]
        self.counts["matvec"] += p
        Nt, M, N = self.frames.shape
        H = X.reshape(Nt, -1, p)
        Y = np.zeros((p, M, N), dtype=complex)
        for c, (d1, d2) in enumerate(self._cells()):
            Y += shift_frame((H[:, c, :].T @ self._flat).reshape(p, M, N), d1, d2)
        return Y.reshape(p, M * N).T

    def rmatmat(self, Y):
        Y = np.asarray(Y)
        p = Y.shape[1]
        self.counts["rmatvec"] += p
        Nt, M, N = self.frames.shape
        Ys = Y.T.reshape(p, M, N)
        out = np.empty((Nt, (2 * self.K + 1) * self.L, p), dtype=complex)
        flat_c = self._flat.conj()
        for c, (d1, d2) in enumerate(self._cells()):
            out[:, c, :] = flat_c @ shift_frame_adjoint(Ys, d1, d2).reshape(p, M * N).T
        return out.reshape(-1, p)


def build_effective_operator(frames: np.ndarray, K: int, L: int, mode: str = "auto",
                             budget: int = DEFAULT_ELEMENT_BUDGET) -> LinearOperator:
    """Equivalent coefficient matrix as a dense or matrix-free operator.

    ``mode`` is ``"dense"``, ``"matrix_free"`` or ``"auto"`` (dense while the
    matrix fits in ``budget`` complex entries).
    """
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    Nt, M, N = frames.shape
    if L > M or 2 * K + 1 > N:
        raise DimensionError(f"grid {2 * K + 1}x{L} does not fit frames of size {M}x{N}")
    entries = M * N * Nt * (2 * K + 1) * L
    if mode == "auto":
        mode = "dense" if entries <= budget else "matrix_free"
    if mode == "dense":
        if entries > budget:
            raise DimensionError(
                f"dense matrix needs {entries} entries (budget {budget}); use matrix_free mode")
        return DenseOperator(build_dense_matrix(frames, K, L))
    if mode == "matrix_free":
        return ODDMOperator(frames, K, L)
    raise ValueError(f"unknown operator mode {mode!r}")


@dataclass
class EffectiveModel:
    """``y = Phi h + n`` for one frame."""

    operator: LinearOperator
    h: np.ndarray
    y: np.ndarray
    noise_var: float
    frames: np.ndarray | None = None
    K: int = 0
    L: int = 1

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.h)

    def noiseless(self) -> np.ndarray:
        return self.operator.matvec(self.h)


def nmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """``||estimate - truth||^2 / ||truth||^2``."""
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    denom = np.vdot(truth, truth).real
    if denom == 0:
        raise ValueError("NMSE undefined for an all-zero truth vector")
    diff = estimate - truth
    return float(np.vdot(diff, diff).real / denom)


# --- flat binary fixtures ---------------------------------------------------
#
# record := magic b"ODCA" | u32 ndim | u32 dims[ndim] | complex64 LE payload (C order)
# model file := b"ODMF" | u32 K | u32 L | f64 noise_var | frames record | h record | y record

_ARRAY_MAGIC = b"ODCA"
_MODEL_MAGIC = b"ODMF"


def write_complex_array(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<c8")
    f.write(_ARRAY_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def read_complex_array(f: BinaryIO) -> np.ndarray:
    if f.read(4) != _ARRAY_MAGIC:
        raise ValueError("not a complex array record")
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(f.read(8 * count), dtype="<c8")
    if data.size != count:
        raise ValueError("truncated array payload")
    return data.reshape(shape).astype(complex)


def save_model(path: str | Path, model: EffectiveModel) -> None:
    if model.frames is None:
        raise ValueError("model has no frames to serialize")
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(struct.pack("<IId", model.K, model.L, float(model.noise_var)))
        for arr in (model.frames, model.h, model.y):
            write_complex_array(f, arr)


def load_model(path: str | Path, mode: str = "auto") -> EffectiveModel:
    with open(path, "rb") as f:
        if f.read(4) != _MODEL_MAGIC:
            raise ValueError("not a model file")
        K, L, noise_var = struct.unpack("<IId", f.read(16))
        frames, h, y = (read_complex_array(f) for _ in range(3))
    op = build_effective_operator(frames, K, L, mode=mode)
    return EffectiveModel(op, h, y, noise_var, frames=frames, K=K, L=L)
