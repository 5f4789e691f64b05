"""Shared containers: observed matrices with missing entries and low-rank factor pairs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ObservedMatrix:
    """Data matrix Y together with the observation mask.

    ``y`` holds zeros at unobserved positions; ``mask`` is True where the
    entry is observed. Flat index arrays over the observed set are cached
    so per-entry operations can work on 1-D views.
    """

    y: np.ndarray
    mask: np.ndarray
    _rows: np.ndarray = field(init=False, repr=False)
    _cols: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.y.ndim != 2:
            raise ValueError("y must be a 2-D matrix")
        if self.mask.shape != self.y.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match y shape {self.y.shape}"
            )
        if not np.all(np.isfinite(self.y[self.mask])):
            raise ValueError("observed entries must be finite")
        self.y = np.where(self.mask, self.y, 0.0)
        self._rows, self._cols = np.nonzero(self.mask)

    @classmethod
    def from_dense(cls, y) -> "ObservedMatrix":
        """Wrap a dense matrix; NaN entries are treated as missing."""
        y = np.asarray(y, dtype=float)
        return cls(y=y, mask=np.isfinite(y))

    @property
    def shape(self) -> tuple[int, int]:
        return self.y.shape

    @property
    def n_obs(self) -> int:
        return self._rows.size

    @property
    def obs_rows(self) -> np.ndarray:
        return self._rows

    @property
    def obs_cols(self) -> np.ndarray:
        return self._cols

    @property
    def y_obs(self) -> np.ndarray:
        """Observed values as a flat vector (row-major order over the mask)."""
        return self.y[self._rows, self._cols]

    def norm_obs(self) -> float:
        """Frobenius norm over the observed entries."""
        return float(np.linalg.norm(self.y_obs))

    def residuals(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Flat vector of y_ij - u_i . v_j over the observed set."""
        fitted = np.einsum("ik,ik->i", u[self._rows], v[self._cols])
        return self.y_obs - fitted


@dataclass
class FactorPair:
    """Low-rank factors U (m x r) and V (n x r)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.ndim != 2 or self.v.ndim != 2:
            raise ValueError("factors must be 2-D")
        if self.u.shape[1] != self.v.shape[1]:
            raise ValueError("U and V must share the factor dimension")

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def product(self) -> np.ndarray:
        return self.u @ self.v.T

    def copy(self) -> "FactorPair":
        return FactorPair(self.u.copy(), self.v.copy())


def load_matrix_csv(path) -> np.ndarray:
    """Read a headerless CSV matrix; the token 'nan' marks missing entries."""
    arr = np.genfromtxt(path, delimiter=",", dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


def save_matrix_csv(path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=float), delimiter=",", fmt="%.17g")
