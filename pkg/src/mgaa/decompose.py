"""Low-rank decomposition backends and energy profiles.

Every backend turns a dense weight ``W`` (d_out x d_in, applied as ``y = W x``)
into a :class:`FactorPair` with ``W ~ L @ R``. Feature-space backends (PCA,
AFM) work from the output Gram ``Y Y^T`` collected on calibration data;
weight-space backends (SVD, ASVD, AWSVD) work from an SVD of the optionally
column-scaled weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    AllZeroSpectrumError,
    DimensionMismatchError,
    InsufficientTokensError,
    RankTooLargeError,
    RatioOutOfRangeError,
    ShapeMismatchError,
)
from .linalg import EvdResult, SvdResult, as_matrix, svd, sym_evd

METHODS = ("svd", "asvd", "awsvd", "pca", "afm", "joint_qk")
SCALE_FLOOR = 1e-8


@dataclass
class FactorPair:
    """Low-rank replacement computing ``L @ (R @ x) + bias_correction``."""

    l: np.ndarray
    r_mat: np.ndarray
    rank: int
    bias_correction: Optional[np.ndarray] = None
    method: Optional[str] = None

    def __post_init__(self):
        if self.l.shape[1] != self.rank or self.r_mat.shape[0] != self.rank:
            raise DimensionMismatchError(
                f"factor shapes {self.l.shape} / {self.r_mat.shape} disagree with rank {self.rank}"
            )
        if self.rank > min(self.d_in, self.d_out):
            raise RankTooLargeError(f"rank {self.rank} exceeds min({self.d_out}, {self.d_in})")

    @property
    def d_out(self) -> int:
        return self.l.shape[0]

    @property
    def d_in(self) -> int:
        return self.r_mat.shape[1]

    @property
    def shape(self):
        return (self.d_out, self.d_in)

    @property
    def param_count(self) -> int:
        n = self.rank * (self.d_in + self.d_out)
        if self.bias_correction is not None:
            n += self.d_out
        return n

    @property
    def is_compressive(self) -> bool:
        return self.rank * (self.d_in + self.d_out) < self.d_in * self.d_out

    def dense(self) -> np.ndarray:
        return self.l @ self.r_mat

    def apply_rows(self, x: np.ndarray) -> np.ndarray:
        """Apply to row-major activations ``x`` (tokens x d_in) without forming ``L @ R``."""
        y = (x @ self.r_mat.T) @ self.l.T
        if self.bias_correction is not None:
            y = y + self.bias_correction
        return y


@dataclass(frozen=True)
class EnergyProfile:
    energies: np.ndarray
    cumulative: np.ndarray
    kind: str  # "eigen" or "singular_squared"

    @property
    def total(self) -> float:
        return float(np.sum(self.energies))

    def retained(self, rank: int) -> float:
        """Fraction of energy kept at ``rank`` (``c[rank]`` with 1-based ranks)."""
        if rank <= 0:
            return 0.0
        return float(self.cumulative[min(rank, len(self.cumulative)) - 1])

    def tail(self, rank: int) -> float:
        return float(np.sum(self.energies[rank:]))


@dataclass
class ScaleVector:
    scales: np.ndarray
    kind: str = "mean_abs"  # or "l2_norm"
    clamped: int = field(default=0, init=False)

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=np.float64).ravel()
        if not np.all(np.isfinite(s)):
            raise DimensionMismatchError("scale vector contains NaN or Inf")
        low = s < SCALE_FLOOR
        self.clamped = int(np.count_nonzero(low))
        self.scales = np.where(low, SCALE_FLOOR, s)


def rank_for_ratio(d_in: int, d_out: int, p: float) -> int:
    """Retained rank for compression ratio ``p``, clamped to ``[1, min(d_in, d_out)]``."""
    if d_in < 1 or d_out < 1:
        raise DimensionMismatchError(f"dimensions must be positive, got ({d_in}, {d_out})")
    if not (0.0 <= p < 1.0):
        raise RatioOutOfRangeError(f"compression ratio {p} not in [0, 1)")
    exact = d_in * d_out * (1.0 - p) / (d_in + d_out)
    # absorb representation error in (1 - p), e.g. 1 - 0.3 = 0.69999...
    r = math.floor(exact + 1e-9)
    return max(1, min(r, min(d_in, d_out)))


def energy_profile(energies_raw, kind: str = "eigen") -> EnergyProfile:
    e = np.asarray(energies_raw, dtype=np.float64).ravel()
    if e.size == 0:
        raise AllZeroSpectrumError("empty spectrum")
    if not np.all(np.isfinite(e)):
        raise AllZeroSpectrumError("spectrum contains NaN or Inf")
    top = float(e.max()) if e.size else 0.0
    if np.any(e < -1e-10 * max(top, 0.0)) and top > 0.0:
        raise ValueError("spectrum has negative energies beyond roundoff")
    e = np.sort(np.clip(e, 0.0, None))[::-1]
    total = float(np.sum(e))
    if not total > 0.0:
        raise AllZeroSpectrumError("spectrum has no positive energy")
    c = np.minimum(np.cumsum(e) / total, 1.0)
    c[-1] = 1.0
    return EnergyProfile(energies=e, cumulative=c, kind=kind)


def _check_rank(r: int, d_out: int, d_in: int):
    if r < 1:
        raise RankTooLargeError(f"rank must be >= 1, got {r}")
    if r > min(d_out, d_in):
        raise RankTooLargeError(f"rank {r} exceeds min({d_out}, {d_in})")


def pca_decompose(w, gram_y, r: int, evd: Optional[EvdResult] = None):
    """Project ``W`` onto the top-``r`` eigenvectors of the output Gram.

    Returns ``(pair, profile, predicted_loss)``; the predicted loss is the sum
    of the discarded eigenvalues, which equals ``||WX - LRX||_F^2`` on the
    batch that produced the Gram.
    """
    w = as_matrix(w, "w")
    d_out, d_in = w.shape
    _check_rank(r, d_out, d_in)
    if evd is None:
        gram_y = as_matrix(gram_y, "gram_y")
        if gram_y.shape != (d_out, d_out):
            raise DimensionMismatchError(f"Gram shape {gram_y.shape} does not match d_out={d_out}")
        evd = sym_evd(gram_y)
    ur = np.ascontiguousarray(evd.eigvecs[:, :r])
    pair = FactorPair(l=ur, r_mat=ur.T @ w, rank=r, method="pca")
    profile = energy_profile(evd.eigvals, "eigen")
    return pair, profile, float(np.sum(evd.eigvals[r:]))


def weighted_svd_decompose(w, s, r: int, svd_result: Optional[SvdResult] = None):
    """Truncated SVD of ``W diag(s)`` with the scaling folded back into ``R``."""
    w = as_matrix(w, "w")
    d_out, d_in = w.shape
    if not isinstance(s, ScaleVector):
        s = ScaleVector(s)
    if s.scales.shape[0] != d_in:
        raise DimensionMismatchError(f"scale length {s.scales.shape[0]} != d_in {d_in}")
    _check_rank(r, d_out, d_in)
    if svd_result is None:
        svd_result = svd(w * s.scales)
    sig = svd_result.singvals
    l = svd_result.u[:, :r] * sig[:r]
    rm = svd_result.vt[:r] / s.scales
    method = "asvd" if s.kind == "mean_abs" else "awsvd"
    pair = FactorPair(l=np.ascontiguousarray(l), r_mat=np.ascontiguousarray(rm), rank=r, method=method)
    return pair, energy_profile(sig**2, "singular_squared")


def plain_svd_decompose(w, r: int, svd_result: Optional[SvdResult] = None):
    w = as_matrix(w, "w")
    d_out, d_in = w.shape
    _check_rank(r, d_out, d_in)
    if svd_result is None:
        svd_result = svd(w)
    sig = svd_result.singvals
    pair = FactorPair(
        l=np.ascontiguousarray(svd_result.u[:, :r] * sig[:r]),
        r_mat=np.ascontiguousarray(svd_result.vt[:r]),
        rank=r,
        method="svd",
    )
    return pair, energy_profile(sig**2, "singular_squared")


def output_covariance(gram_y, mean_y, token_count: int) -> np.ndarray:
    if token_count < 2:
        raise InsufficientTokensError(f"covariance needs at least 2 tokens, got {token_count}")
    gram_y = as_matrix(gram_y, "gram_y")
    mu = np.asarray(mean_y, dtype=np.float64).ravel()
    if mu.shape[0] != gram_y.shape[0]:
        raise DimensionMismatchError("mean length does not match Gram dimension")
    c = gram_y / token_count - np.outer(mu, mu)
    return 0.5 * (c + c.T)


def afm_decompose(w, gram_y, mean_y, token_count: int, r: int, evd: Optional[EvdResult] = None):
    """PCA on the output covariance plus a bias term that restores the output mean."""
    w = as_matrix(w, "w")
    d_out, d_in = w.shape
    _check_rank(r, d_out, d_in)
    mu = np.asarray(mean_y, dtype=np.float64).ravel()
    if evd is None:
        evd = sym_evd(output_covariance(gram_y, mu, token_count))
    elif token_count < 2:
        raise InsufficientTokensError(f"covariance needs at least 2 tokens, got {token_count}")
    ur = np.ascontiguousarray(evd.eigvecs[:, :r])
    bias = None
    if np.any(mu != 0.0):
        bias = mu - ur @ (ur.T @ mu)
    pair = FactorPair(l=ur, r_mat=ur.T @ w, rank=r, bias_correction=bias, method="afm")
    return pair, energy_profile(evd.eigvals, "eigen")


def stack_qk(wq, wk) -> np.ndarray:
    wq = as_matrix(wq, "wq")
    wk = as_matrix(wk, "wk")
    if wq.shape != wk.shape:
        raise ShapeMismatchError(f"W_q {wq.shape} and W_k {wk.shape} differ")
    return np.vstack([wq, wk])


def split_joint(pair: FactorPair, d_q: int):
    """Split a factorization of the stacked [W_q; W_k] into two pairs sharing ``R``."""
    shared = pair.r_mat
    pq = FactorPair(l=np.ascontiguousarray(pair.l[:d_q]), r_mat=shared, rank=pair.rank, method="joint_qk")
    pk = FactorPair(l=np.ascontiguousarray(pair.l[d_q:]), r_mat=shared, rank=pair.rank, method="joint_qk")
    return pq, pk


def joint_qk_decompose(wq, wk, gram_qk=None, r: int = 1):
    """Factor ``[W_q; W_k]`` jointly; returns ``(pair_q, pair_k)`` with one shared ``R``.

    With ``gram_qk`` (the Gram of the concatenated query/key outputs) the
    stacked matrix is projected onto its principal output directions,
    otherwise a plain truncated SVD is used.
    """
    m = stack_qk(wq, wk)
    if gram_qk is None:
        pair, _ = plain_svd_decompose(m, r)
    else:
        pair, _, _ = pca_decompose(m, gram_qk, r)
    return split_joint(pair, m.shape[0] // 2)


@dataclass
class PreparedMatrix:
    """A matrix whose full spectrum has been computed once for a given backend.

    :meth:`factor` truncates at any rank without redoing the EVD/SVD, so
    allocation and factorization share one decomposition.
    """

    method: str
    w: np.ndarray
    profile: EnergyProfile
    basis: object  # EvdResult or SvdResult
    scales: Optional[ScaleVector] = None
    mean_y: Optional[np.ndarray] = None
    token_count: int = 0

    @property
    def max_rank(self) -> int:
        return min(self.w.shape[0], self.w.shape[1], len(self.profile.energies))

    def factor(self, r: int) -> FactorPair:
        if self.method == "pca":
            return pca_decompose(self.w, None, r, evd=self.basis)[0]
        if self.method == "afm":
            return afm_decompose(self.w, None, self.mean_y, self.token_count, r, evd=self.basis)[0]
        if self.method in ("asvd", "awsvd"):
            return weighted_svd_decompose(self.w, self.scales, r, svd_result=self.basis)[0]
        if self.method == "svd":
            return plain_svd_decompose(self.w, r, svd_result=self.basis)[0]
        raise ValueError(f"unknown method {self.method!r}")

    def predicted_loss(self, r: int) -> float:
        """Calibration output loss for PCA/AFM; weighted-weight-space loss for SVD backends."""
        tail = self.profile.tail(r)
        return tail * self.token_count if self.method == "afm" else tail


def prepare_matrix(method: str, w, gram_y=None, mean_y=None, token_count: int = 0, scales=None) -> PreparedMatrix:
    w = as_matrix(w, "w")
    if method == "pca":
        basis = sym_evd(as_matrix(gram_y, "gram_y"))
        if basis.eigvecs.shape[0] != w.shape[0]:
            raise DimensionMismatchError("Gram does not match d_out")
        return PreparedMatrix(method, w, energy_profile(basis.eigvals, "eigen"), basis, token_count=token_count)
    if method == "afm":
        basis = sym_evd(output_covariance(gram_y, mean_y, token_count))
        return PreparedMatrix(
            method, w, energy_profile(basis.eigvals, "eigen"), basis,
            mean_y=np.asarray(mean_y, dtype=np.float64), token_count=token_count,
        )
    if method in ("asvd", "awsvd"):
        if not isinstance(scales, ScaleVector):
            scales = ScaleVector(scales, kind="mean_abs" if method == "asvd" else "l2_norm")
        if scales.scales.shape[0] != w.shape[1]:
            raise DimensionMismatchError("scale length does not match d_in")
        basis = svd(w * scales.scales)
        return PreparedMatrix(method, w, energy_profile(basis.singvals**2, "singular_squared"), basis, scales=scales)
    if method == "svd":
        basis = svd(w)
        return PreparedMatrix(method, w, energy_profile(basis.singvals**2, "singular_squared"), basis)
    raise ValueError(f"unknown method {method!r}")
