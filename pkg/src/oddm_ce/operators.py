"""Linear operators with forward/adjoint application and usage counters."""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


class LinearOperator:
    """Minimal complex linear map ``C^n -> C^m``.

    Subclasses implement ``_matvec`` and ``_rmatvec``.  Every application is
    counted in ``counts`` so callers can check how much work an algorithm
    did.  Applications are read-only, so one operator may be shared between
    threads; the counters are then approximate.
    """

    def __init__(self, shape: tuple[int, int]):
        self.shape = (int(shape[0]), int(shape[1]))
        self.counts = {"matvec": 0, "rmatvec": 0}

    def matvec(self, x: np.ndarray) -> np.ndarray:
        self.counts["matvec"] += 1
        return self._matvec(np.asarray(x))

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        self.counts["rmatvec"] += 1
        return self._rmatvec(np.asarray(y))

    def matmat(self, X: np.ndarray) -> np.ndarray:
        return np.column_stack([self.matvec(np.ascontiguousarray(c)) for c in X.T])

    def rmatmat(self, Y: np.ndarray) -> np.ndarray:
        return np.column_stack([self.rmatvec(np.ascontiguousarray(c)) for c in Y.T])

    def reset_counts(self) -> None:
        for key in self.counts:
            self.counts[key] = 0

    def to_dense(self) -> np.ndarray:
        return self.matmat(np.eye(self.shape[1], dtype=complex))

    @property
    def H(self) -> "LinearOperator":
        return _Adjoint(self)

    def __matmul__(self, x):
        return self.matvec(x)

    def _matvec(self, x):
        raise NotImplementedError

    def _rmatvec(self, y):
        raise NotImplementedError


class DenseOperator(LinearOperator):
    def __init__(self, matrix: np.ndarray):
        super().__init__(matrix.shape)
        self.matrix = np.asarray(matrix)

    def _matvec(self, x):
        return self.matrix @ x

    def _rmatvec(self, y):
        return self.matrix.conj().T @ y

    def matmat(self, X):
        self.counts["matvec"] += X.shape[1]
        return self.matrix @ X

    def rmatmat(self, Y):
        self.counts["rmatvec"] += Y.shape[1]
        return self.matrix.conj().T @ Y

    def to_dense(self):
        return self.matrix


class ScaledOperator(LinearOperator):
    """``scale * op``; forwards counts to the wrapped operator."""

    def __init__(self, op: LinearOperator, scale: float):
        super().__init__(op.shape)
        self.op = op
        self.scale = float(scale)
        self.counts = op.counts

    def _matvec(self, x):
        return self.scale * self.op._matvec(x)

    def _rmatvec(self, y):
        return self.scale * self.op._rmatvec(y)

    def matmat(self, X):
        return self.scale * self.op.matmat(X)

    def rmatmat(self, Y):
        return self.scale * self.op.rmatmat(Y)

    def to_dense(self):
        return self.scale * self.op.to_dense()

    @property
    def dense(self) -> np.ndarray | None:
        m = getattr(self.op, "matrix", None)
        return None if m is None else self.scale * m


class _Adjoint(LinearOperator):
    def __init__(self, op: LinearOperator):
        super().__init__((op.shape[1], op.shape[0]))
        self.op = op
        self.counts = op.counts

    def matvec(self, x):
        return self.op.rmatvec(x)

    def rmatvec(self, y):
        return self.op.matvec(y)


def dense_matrix(op: LinearOperator) -> np.ndarray | None:
    """The explicit matrix behind ``op`` if it has one, else ``None``."""
    if isinstance(op, DenseOperator):
        return op.matrix
    if isinstance(op, ScaledOperator):
        return op.dense
    return None


def power_iteration(op: LinearOperator, iters: int = 50, rtol: float = 1e-4,
                    rng: np.random.Generator | None = None) -> float:
    """Largest eigenvalue of ``op op^H`` (squared spectral norm).

    Stops after ``iters`` steps or once the Rayleigh quotient changes by less
    than ``rtol`` relative.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = op.shape[1]
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for it in range(iters):
        z = op.rmatvec(op.matvec(x))
        lam_new = float(np.real(np.vdot(x, z)))
        nz = np.linalg.norm(z)
        if nz == 0:
            return 0.0
        x = z / nz
        if it > 0 and abs(lam_new - lam) <= rtol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    logger.debug("power iteration: lambda_max ~ %.6g after %d steps", lam, it + 1)
    return lam
