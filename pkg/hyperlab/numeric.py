"""Dense float64 linear algebra shared by the adapters, training and rank analysis.

Matrices are plain ``numpy`` arrays of dtype float64 (row-major, no strided views leak out of
this module). Every public function validates shapes and finiteness and returns fresh arrays.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from hyperlab.utils import DimensionError, FloatArray, NumericError

Matrix = FloatArray
Vector = FloatArray

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
EXACT_RANK_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class Spectrum:
    values: FloatArray
    sweeps: int = 0

    def __post_init__(self) -> None:
        assert self.values.ndim == 1
        assert np.all(self.values >= 0)
        assert np.all(np.diff(self.values) <= 0), "spectrum must be sorted descending"

    def __len__(self) -> int:
        return len(self.values)

    @property
    def top(self) -> float:
        return float(self.values[0]) if len(self.values) else 0.0


def as_matrix(data: object) -> Matrix:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-d matrix, got shape {arr.shape}")
    _check_finite(arr, "matrix")
    return np.ascontiguousarray(arr)


def _check_finite(arr: FloatArray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains NaN or Inf")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    out = np.ascontiguousarray(a @ b)
    _check_finite(out, "matmul result")
    return out


def scale_rows_cols(w0: Matrix, a: Vector, b: Vector) -> Matrix:
    """Return diag(a) @ w0 @ diag(b), computed elementwise in O(n*m)."""
    if w0.ndim != 2:
        raise DimensionError(f"expected a 2-d weight, got shape {w0.shape}")
    n, m = w0.shape
    if a.shape != (n,) or b.shape != (m,):
        raise DimensionError(
            f"row scale of length {a.shape} and column scale of length {b.shape} "
            f"do not match a {n}x{m} weight"
        )
    out = w0 * a[:, None] * b[None, :]
    _check_finite(out, "scaled weight")
    return out


def diagmat(v: Vector) -> Matrix:
    return np.diag(v).astype(np.float64)


def frobenius(m: Matrix) -> float:
    return float(np.linalg.norm(m))


def relative_error(actual: FloatArray, expected: FloatArray) -> float:
    """Frobenius relative error, falling back to absolute when ``expected`` is zero."""
    if actual.shape != expected.shape:
        raise DimensionError(f"shape mismatch: {actual.shape} vs {expected.shape}")
    denom = float(np.linalg.norm(expected))
    diff = float(np.linalg.norm(actual - expected))
    return diff / denom if denom > 0 else diff


# ==============================
# singular values
# ==============================


@functools.cache
def _round_robin(k: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # each round pairs up every column exactly once, so all rotations in a round commute
    players = list(range(k)) + ([-1] if k % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        left = []
        right = []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p >= 0 and q >= 0:
                left.append(min(p, q))
                right.append(max(p, q))
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(rounds)


def svd_jacobi(
    m: Matrix, *, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS
) -> Spectrum:
    """Singular values by one-sided (Hestenes) Jacobi.

    Columns are orthogonalised pairwise until every pair's cosine drops below ``tol``.
    Rotations preserve the Frobenius norm, so sum(sigma**2) matches ||m||_F**2 to rounding.
    """
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {m.shape}")
    _check_finite(m, "matrix")
    u = np.array(m.T if m.shape[0] < m.shape[1] else m, dtype=np.float64, order="F")
    k = u.shape[1]
    if k == 1:
        return Spectrum(np.array([np.linalg.norm(u[:, 0])]), 0)

    frob_sq = float(np.sum(u * u))
    if frob_sq == 0.0:
        return Spectrum(np.zeros(k), 0)
    # pairs whose norms are both at rounding level relative to the whole matrix are left alone
    floor = frob_sq * np.finfo(np.float64).eps ** 2

    rounds = _round_robin(k)
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        for left, right in rounds:
            up = u[:, left]
            uq = u[:, right]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            norm = np.sqrt(alpha * beta)
            active = (norm > floor) & (np.abs(gamma) > tol * norm)
            if not np.any(active):
                continue
            off = max(off, float(np.max(np.abs(gamma[active]) / norm[active])))
            zeta = (beta[active] - alpha[active]) / (2.0 * gamma[active])
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            p_idx = left[active]
            q_idx = right[active]
            col_p = u[:, p_idx]
            col_q = u[:, q_idx]
            u[:, p_idx] = c * col_p - s * col_q
            u[:, q_idx] = s * col_p + c * col_q
        if off <= tol:
            values = np.sort(np.sqrt(np.einsum("ij,ij->j", u, u)))[::-1]
            return Spectrum(np.ascontiguousarray(values), sweep)
    raise NumericError(
        f"one-sided Jacobi did not converge after {max_sweeps} sweeps "
        f"on a {m.shape[0]}x{m.shape[1]} matrix"
    )


def svd_values(m: Matrix) -> Spectrum:
    return svd_jacobi(m)


def numerical_rank(m: Matrix, abs_threshold: float) -> int:
    """Count singular values at or above an absolute cutoff."""
    if not abs_threshold > 0:
        raise ValueError(f"threshold must be positive, got {abs_threshold}")
    return int(np.count_nonzero(svd_values(m).values >= abs_threshold))


def rank_of_spectrum(spectrum: Spectrum, rtol: float = EXACT_RANK_RTOL) -> int:
    top = spectrum.top
    if top == 0.0:
        return 0
    return int(np.count_nonzero(spectrum.values >= rtol * top))


def exact_rank(m: Matrix, rtol: float = EXACT_RANK_RTOL) -> int:
    """Rank with a cutoff relative to the largest singular value."""
    return rank_of_spectrum(svd_values(m), rtol)
