"""Dense linear algebra primitives in float64.

Matrices are plain 2-D ``numpy.ndarray`` objects; :func:`as_matrix` is the
single validation point (2-D, finite, float64, C-contiguous).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConvergenceFailureError,
    DimensionMismatchError,
    IndefiniteBeyondToleranceError,
    NonFiniteError,
    NonSquareError,
    NotSymmetricError,
)

SYMMETRY_TOL = 1e-6
PSD_CLAMP_TOL = 1e-10
_SIGN_TIE_TOL = 1e-12


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionMismatchError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return m


@dataclass(frozen=True)
class EvdResult:
    eigvecs: np.ndarray  # columns are eigenvectors
    eigvals: np.ndarray  # descending, >= 0


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singvals: np.ndarray
    vt: np.ndarray


def canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Per-column sign flips making each column's largest-magnitude entry positive.

    Entries within a relative 1e-12 of the column maximum count as ties and
    the lowest row index wins. Zero columns keep sign +1.
    """
    mag = np.abs(vectors)
    peak = mag.max(axis=0)
    signs = np.ones(vectors.shape[1])
    for j in range(vectors.shape[1]):
        if peak[j] == 0.0:
            continue
        i = int(np.argmax(mag[:, j] >= peak[j] * (1.0 - _SIGN_TIE_TOL)))
        if vectors[i, j] < 0.0:
            signs[j] = -1.0
    return signs


def sym_evd(s) -> EvdResult:
    """Eigendecomposition of a symmetric PSD matrix, eigenvalues descending.

    The input is symmetrized as (s + s^T)/2. Negative eigenvalues no larger in
    magnitude than 1e-10 * lambda_max are roundoff and are clamped to zero;
    anything more negative raises.
    """
    s = as_matrix(s, "s")
    n, m = s.shape
    if n != m:
        raise NonSquareError(f"expected a square matrix, got {n}x{m}")
    norm = np.linalg.norm(s)
    asym = np.linalg.norm(s - s.T)
    if asym > SYMMETRY_TOL * norm:
        raise NotSymmetricError(f"||s - s^T||_F = {asym:.3e} exceeds {SYMMETRY_TOL} * ||s||_F")
    sym = 0.5 * (s + s.T)
    try:
        vals, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailureError(f"eigensolver did not converge: {exc}") from exc
    vals = vals[::-1].copy()
    vecs = vecs[:, ::-1].copy()
    lam_max = max(vals[0], 0.0)
    most_negative = vals[-1]
    if most_negative < 0.0:
        if -most_negative > PSD_CLAMP_TOL * lam_max:
            raise IndefiniteBeyondToleranceError(
                f"eigenvalue {most_negative:.3e} is below -{PSD_CLAMP_TOL} * lambda_max ({lam_max:.3e})"
            )
        vals[vals < 0.0] = 0.0
    vecs *= canonical_signs(vecs)
    return EvdResult(eigvecs=vecs, eigvals=vals)


def svd(m) -> SvdResult:
    """Thin SVD with descending singular values and canonical left-vector signs."""
    m = as_matrix(m, "m")
    try:
        u, sv, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailureError(f"SVD did not converge: {exc}") from exc
    signs = canonical_signs(u)
    u = u * signs
    vt = vt * signs[:, None]
    return SvdResult(u=np.ascontiguousarray(u), singvals=sv, vt=np.ascontiguousarray(vt))


def gram_accumulate(acc, x) -> np.ndarray:
    """Return ``acc + x @ x.T`` where ``x`` holds one token per column."""
    acc = np.asarray(acc, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1]:
        raise DimensionMismatchError(f"accumulator must be square, got {acc.shape}")
    if x.ndim != 2 or x.shape[0] != acc.shape[0]:
        raise DimensionMismatchError(f"batch rows {x.shape} do not match accumulator {acc.shape}")
    return acc + x @ x.T


def frobenius_sq(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.dot(m.ravel(), m.ravel()))
