"""
Low-rank-plus-diagonal scale matrices, Sigma = B B^T + D^2.

B is m x k with a zero upper triangle and D = diag(d).  Every operation runs
through the k x k capacitance matrix C = I_k + B^T D^{-2} B (Woodbury identity
and matrix determinant lemma), so the m x m Sigma is never formed outside the
diagnostic ``fs_dense``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sc_linalg

from app.services.errors import ParameterError, SingularScaleError


def vech_size(m: int, k: int) -> int:
    """Number of free entries of an m x k lower-trapezoidal B."""
    return m * k - k * (k - 1) // 2


def _lower_mask(m: int, k: int) -> np.ndarray:
    return np.tril(np.ones((m, k), dtype=bool))


def vech_lower(B: np.ndarray) -> np.ndarray:
    """Column-major half-vectorisation skipping the upper triangle."""
    m, k = B.shape
    return B.T[_lower_mask(m, k).T]


def unvech_lower(b: np.ndarray, m: int, k: int) -> np.ndarray:
    """Inverse of vech_lower."""
    b = np.asarray(b, dtype=float)
    if b.size != vech_size(m, k):
        raise ParameterError(f"vech(B) for m={m}, k={k} needs {vech_size(m, k)} entries")
    bt = np.zeros((k, m))
    bt[_lower_mask(m, k).T] = b
    return bt.T


@dataclass(frozen=True)
class FactorScale:
    """The (B, d) pair behind Sigma = B B^T + D^2."""
    B: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape[0] != d.size:
            raise ParameterError(f"B has {B.shape[0]} rows but d has {d.size} entries")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "B", B)
        if np.any(np.triu(B, 1) != 0.0):
            raise ParameterError("B must be zero above its diagonal")

    @classmethod
    def from_vech(cls, b: np.ndarray, d: np.ndarray, k: int) -> FactorScale:
        d = np.atleast_1d(np.asarray(d, dtype=float))
        return cls(unvech_lower(b, d.size, k), d)

    @classmethod
    def diagonal(cls, d) -> FactorScale:
        d = np.atleast_1d(np.asarray(d, dtype=float))
        return cls(np.zeros((d.size, 0)), d)

    @property
    def m(self) -> int:
        return self.d.size

    @property
    def k(self) -> int:
        return self.B.shape[1]

    def vech(self) -> np.ndarray:
        return vech_lower(self.B)


def _capacitance(fs: FactorScale):
    """W = D^{-2} B and the Cholesky factor of C = I + B^T W."""
    if np.any(fs.d == 0.0):
        raise SingularScaleError("factor scale has a zero entry in d")
    d2 = fs.d * fs.d
    W = fs.B / d2[:, None]
    if fs.k == 0:
        return d2, W, None
    C = np.eye(fs.k) + fs.B.T @ W
    return d2, W, sc_linalg.cho_factor(C, lower=True)


def fs_solve(fs: FactorScale, v: np.ndarray) -> np.ndarray:
    """Sigma^{-1} v for v of shape (m,) or (m, j)."""
    d2, W, cho = _capacitance(fs)
    v = np.asarray(v, dtype=float)
    scaled = v / (d2 if v.ndim == 1 else d2[:, None])
    if fs.k == 0:
        return scaled
    return scaled - W @ sc_linalg.cho_solve(cho, W.T @ v)


def fs_logdet(fs: FactorScale) -> float:
    """log |Sigma| = log det C + 2 sum log |d_i|."""
    d2, _, cho = _capacitance(fs)
    inner = 2.0 * np.sum(np.log(np.diag(cho[0]))) if fs.k else 0.0
    return float(inner + np.sum(np.log(d2)))


def fs_sample_xi(fs: FactorScale, z: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """xi = B z + d * eps; rows of (n, k)/(n, m) inputs are independent draws."""
    z = np.asarray(z, dtype=float)
    return z @ fs.B.T + fs.d * np.asarray(eps, dtype=float)


def fs_diag(fs: FactorScale) -> np.ndarray:
    """Diagonal of Sigma."""
    return np.sum(fs.B * fs.B, axis=1) + fs.d * fs.d


def fs_matvec(fs: FactorScale, v: np.ndarray) -> np.ndarray:
    """Sigma v for v of shape (m,) or (m, j)."""
    v = np.asarray(v, dtype=float)
    d2 = fs.d * fs.d
    return fs.B @ (fs.B.T @ v) + (d2 * v if v.ndim == 1 else d2[:, None] * v)


def fs_inv_diag(fs: FactorScale) -> np.ndarray:
    """Diagonal of Sigma^{-1} without forming it."""
    d2, W, cho = _capacitance(fs)
    if fs.k == 0:
        return 1.0 / d2
    return 1.0 / d2 - np.sum(W * sc_linalg.cho_solve(cho, W.T).T, axis=1)


def fs_dense(fs: FactorScale) -> np.ndarray:
    """Dense Sigma; diagnostics and small-m oracles only."""
    return fs.B @ fs.B.T + np.diag(fs.d * fs.d)
