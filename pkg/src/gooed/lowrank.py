"""Randomized symmetric eigendecomposition, truncation and EIG error bounds."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg as la

from .exceptions import ConfigError, DenseLimitError, DimensionMismatch

DENSE_EIG_LIMIT = 4096


@dataclass(frozen=True)
class SpectralFactor:
    """Orthonormal ``basis`` with nonincreasing, nonnegative ``eigenvalues``.

    ``extended`` keeps every eigenvalue the solver produced (for randomized
    solves that is ``k + p`` values) so tail sums can be estimated after
    truncation.  ``exact_spectrum`` is True when ``extended`` is the full
    spectrum of the source operator.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    source_dim: int
    extended: Optional[np.ndarray] = None
    exact_spectrum: bool = False
    rank_deficient: bool = False
    applications: int = 0

    def __post_init__(self):
        if self.basis.shape != (self.source_dim, self.eigenvalues.shape[0]):
            raise DimensionMismatch("basis and eigenvalues disagree on rank")

    @property
    def rank(self):
        return self.eigenvalues.shape[0]

    @property
    def spectrum(self):
        return self.eigenvalues if self.extended is None else self.extended

    def to_dense(self):
        U = self.basis
        return (U * self.eigenvalues) @ U.T


@dataclass(frozen=True)
class RandEigConfig:
    target_rank: int
    oversampling: int = 10
    power_iterations: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.target_rank < 1:
            raise ConfigError("target_rank must be positive")
        if self.oversampling < 0 or self.power_iterations < 0:
            raise ConfigError("oversampling and power_iterations must be nonnegative")

    @classmethod
    def clipped(cls, target_rank, d, oversampling=10, power_iterations=1, seed=0):
        """Config with rank and oversampling reduced to fit dimension ``d``."""
        k = max(1, min(int(target_rank), d))
        return cls(k, min(oversampling, d - k), power_iterations, seed)

    @property
    def sketch_size(self):
        return self.target_rank + self.oversampling


@dataclass(frozen=True)
class Tolerances:
    eps_zeta: float = 0.0
    eps_lambda: float = 0.0

    def __post_init__(self):
        if self.eps_zeta < 0 or self.eps_lambda < 0:
            raise ConfigError("tolerances must be nonnegative")


def gaussian_sketch(d, m, seed):
    """Standard normal ``d x m`` test matrix from a PCG64 generator."""
    return np.random.Generator(np.random.PCG64(seed)).standard_normal((d, m))


def randomized_eig(op_action: Callable, d: int, cfg: RandEigConfig) -> SpectralFactor:
    """Top eigenpairs of a symmetric PSD operator from block actions.

    Parameters
    ----------
    op_action : callable
        Maps a ``d x m`` block to the operator applied to each column.
    d : int
        Operator dimension.
    cfg : RandEigConfig

    Returns
    -------
    SpectralFactor
        ``cfg.target_rank`` eigenpairs, eigenvalues clamped at zero.
        ``applications`` equals ``(power_iterations + 2) * (k + p)``.
        ``rank_deficient`` is set when the sketch has numerical rank below
        ``target_rank``; the extra basis vectors then span an arbitrary
        orthonormal complement and carry (near) zero eigenvalues.
    """
    m = cfg.sketch_size
    if m > d:
        raise ConfigError(f"target_rank + oversampling = {m} exceeds dimension {d}")
    Omega = gaussian_sketch(d, m, cfg.seed)
    Y = np.asarray(op_action(Omega), dtype=float)
    n_apps = m
    for _ in range(cfg.power_iterations):
        Q, _ = np.linalg.qr(Y)
        Y = np.asarray(op_action(Q), dtype=float)
        n_apps += m
    Q, R = np.linalg.qr(Y)
    diag = np.abs(np.diag(R))
    scale = diag.max() if diag.size else 0.0
    numerical_rank = int(np.sum(diag > 1e3 * np.finfo(float).eps * max(d, m) * scale)) if scale > 0 else 0
    HQ = np.asarray(op_action(Q), dtype=float)
    n_apps += m
    B = Q.T @ HQ
    B = 0.5 * (B + B.T)
    evals, Z = la.eigh(B)
    order = np.argsort(evals)[::-1]
    evals, Z = np.clip(evals[order], 0.0, None), Z[:, order]
    k = cfg.target_rank
    return SpectralFactor(
        basis=Q @ Z[:, :k],
        eigenvalues=evals[:k].copy(),
        source_dim=d,
        extended=evals.copy(),
        exact_spectrum=(m == d),
        rank_deficient=numerical_rank < k,
        applications=n_apps,
    )


def truncate_by_tolerance(factor: SpectralFactor, eps: float) -> SpectralFactor:
    """Keep eigenpairs with eigenvalue ``>= eps``."""
    keep = int(np.sum(factor.eigenvalues >= eps))
    return replace(factor, basis=factor.basis[:, :keep], eigenvalues=factor.eigenvalues[:keep].copy())


def truncate_to_rank(factor: SpectralFactor, k: int) -> SpectralFactor:
    k = max(0, min(int(k), factor.rank))
    return replace(factor, basis=factor.basis[:, :k], eigenvalues=factor.eigenvalues[:k].copy())


def dense_eig_reference(M, limit=DENSE_EIG_LIMIT) -> SpectralFactor:
    """Full eigendecomposition of a dense symmetric matrix, sorted nonincreasing.

    Negative eigenvalues are returned as computed (not clamped).
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch("expected a square matrix")
    if M.shape[0] > limit:
        raise DenseLimitError(f"dense eigendecomposition limited to {limit}")
    scale = max(np.max(np.abs(M)), np.finfo(float).tiny) if M.size else 1.0
    if np.max(np.abs(M - M.T)) > 1e-8 * scale:
        raise DimensionMismatch("matrix is not symmetric")
    evals, evecs = la.eigh(0.5 * (M + M.T))
    evals, evecs = evals[::-1].copy(), evecs[:, ::-1].copy()
    return SpectralFactor(evecs, evals, M.shape[0], extended=evals.copy(), exact_spectrum=True)


def _validated_spectrum(values, name):
    s = np.asarray(values, dtype=float).ravel()
    if np.any(s < -1e-12):
        raise ConfigError(f"{name} spectrum has negative entries below -1e-12")
    s = np.clip(s, 0.0, None)
    if np.any(np.diff(s) > 1e-12 * max(s.max(initial=0.0), 1.0)):
        raise ConfigError(f"{name} spectrum must be nonincreasing")
    return s


def eig_error_bound(zeta, lam, k, l, sigma_min_sq, form="paired"):
    r"""Upper bound on ``|Psi^rho(W) - hat Psi^rho(W)|`` valid for every design.

    With ``zeta`` the spectrum of ``H_d^rho`` truncated at rank ``k`` and
    ``lam`` the spectrum of ``Delta H_d`` truncated at rank ``l``,

    ``form="paired"`` (default) returns

    .. math::

        \frac12 \sum_{i>k} \log(1 + \zeta_i/\sigma^2)
        + \frac12 \sum_{i=1}^{k} \log(1 + \zeta_i \lambda_{l+i}/\sigma^4),

    where each retained ``zeta_i`` is paired with the ``i``-th discarded
    eigenvalue of ``Delta H_d`` (zero past the end of ``lam``).

    ``form="unpaired"`` returns the formula with the second sum taken over
    ``lambda_{l+1}, ..., lambda_k`` and ``zeta_1``.  That expression vanishes
    whenever ``l >= k`` even though discarding part of ``Delta H_d`` still
    perturbs the EIG, so it is *not* a valid bound in general; it is kept
    for comparison only.

    Entries beyond the supplied arrays are treated as zero.
    """
    z = _validated_spectrum(zeta, "zeta")
    lm = _validated_spectrum(lam, "lambda")
    k, l = int(k), int(l)
    if k < 0 or l < 0:
        raise ConfigError("truncation ranks must be nonnegative")
    if sigma_min_sq <= 0:
        raise ConfigError("sigma_min_sq must be positive")
    s2 = float(sigma_min_sq)

    tail = 0.5 * np.sum(np.log1p(z[k:] / s2))
    if form == "paired":
        kk = min(k, z.size)
        lam_tail = np.zeros(kk)
        avail = lm[l:l + kk]
        lam_tail[:avail.size] = avail
        second = 0.5 * np.sum(np.log1p(z[:kk] * lam_tail / s2 ** 2))
    elif form == "unpaired":
        zeta1 = z[0] if z.size else 0.0
        second = 0.5 * np.sum(np.log1p(lm[l:k] * zeta1 / s2 ** 2)) if k > l else 0.0
    else:
        raise ConfigError(f"unknown bound form {form!r}")
    return float(tail + second)


@dataclass(frozen=True)
class BoundReport:
    value: float
    label: str  # "exact" when both spectra are complete, else "estimate"


def bound_from_factors(rho: SpectralFactor, delta: SpectralFactor, sigma_min_sq,
                       zeta_full=None, lambda_full=None) -> BoundReport:
    """Error bound for the truncation carried by two factors.

    Uses ``zeta_full`` / ``lambda_full`` when given (dense spectra), else the
    factors' extended spectra as a tail surrogate, labelled ``"estimate"``
    unless those are complete.
    """
    exact = True
    if zeta_full is None:
        zeta_full = rho.spectrum
        exact &= rho.exact_spectrum
    if lambda_full is None:
        lambda_full = delta.spectrum
        exact &= delta.exact_spectrum
    value = eig_error_bound(zeta_full, lambda_full, rho.rank, delta.rank, sigma_min_sq)
    return BoundReport(value, "exact" if exact else "estimate")
