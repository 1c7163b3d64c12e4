"""Linear Gaussian inverse-problem data model and offline assembly.

The objects here describe ``y = F_d m + noise`` restricted to a subset of
candidate sensors, a Gaussian prior on ``m``, and a linear goal
``rho = P m``.  Operators are only ever touched through
:class:`LinearOperatorHandle`, which counts every application so the
offline/online split can be checked mechanically.

A design (Boolean row-selection matrix ``W``) is represented by the sorted
index list in :class:`Design`; every ``W M W^T`` is a sub-matrix extraction.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import scipy.linalg as la

from .exceptions import (
    ConfigError,
    DenseLimitError,
    DimensionMismatch,
    NotPositiveDefiniteError,
    NumericalError,
)

DENSE_DATA_LIMIT = 512
DENSE_PARAMETER_LIMIT = 4096
SIGMA_JITTER = 1e-12


def symmetrize(M):
    return 0.5 * (M + M.T)


class LinearOperatorHandle:
    """Counted wrapper around a linear map and its adjoint.

    ``apply`` and ``apply_adjoint`` accept a single vector or a 2-D block whose
    columns are vectors.  Each column counts as one application, so a block of
    ``m`` columns increments the counter by ``m``.  Counter updates are guarded
    by a lock and safe under concurrent calls.
    """

    def __init__(self, apply: Callable, apply_adjoint: Callable,
                 domain_dim: int, range_dim: int, name: str = "operator"):
        if domain_dim < 1 or range_dim < 1:
            raise ConfigError("operator dimensions must be positive")
        self._apply = apply
        self._apply_adjoint = apply_adjoint
        self.domain_dim = int(domain_dim)
        self.range_dim = int(range_dim)
        self.name = name
        self._lock = threading.Lock()
        self._forward_count = 0
        self._adjoint_count = 0

    @classmethod
    def from_matrix(cls, A, name="matrix"):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2:
            raise DimensionMismatch("operator matrix must be 2-D")
        return cls(lambda v: A @ v, lambda w: A.T @ w,
                   A.shape[1], A.shape[0], name=name)

    def _bump(self, attr, x):
        n = 1 if x.ndim == 1 else x.shape[1]
        with self._lock:
            setattr(self, attr, getattr(self, attr) + n)

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.domain_dim:
            raise DimensionMismatch(
                f"{self.name}: expected input of length {self.domain_dim}, got {v.shape[0]}")
        self._bump("_forward_count", v)
        out = np.asarray(self._apply(v), dtype=float)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"{self.name}: non-finite output")
        return out

    def apply_adjoint(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape[0] != self.range_dim:
            raise DimensionMismatch(
                f"{self.name}: expected adjoint input of length {self.range_dim}, got {w.shape[0]}")
        self._bump("_adjoint_count", w)
        out = np.asarray(self._apply_adjoint(w), dtype=float)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"{self.name}: non-finite adjoint output")
        return out

    @property
    def forward_count(self):
        return self._forward_count

    @property
    def adjoint_count(self):
        return self._adjoint_count

    @property
    def solve_counter(self):
        """Total applications (forward plus adjoint) since construction."""
        return self._forward_count + self._adjoint_count

    def to_dense(self):
        """Materialize the operator matrix column by column."""
        return self.apply(np.eye(self.domain_dim))

    def dot_test(self, n_pairs=20, seed=0):
        """Largest relative adjoint mismatch over random vector pairs.

        Returns ``max |<A v, w> - <v, A^* w>| / (|v| |w|)``.
        """
        rng = np.random.default_rng(seed)
        V = rng.standard_normal((self.domain_dim, n_pairs))
        W = rng.standard_normal((self.range_dim, n_pairs))
        AV = self.apply(V)
        AtW = self.apply_adjoint(W)
        lhs = np.einsum("ij,ij->j", AV, W)
        rhs = np.einsum("ij,ij->j", V, AtW)
        scale = np.linalg.norm(V, axis=0) * np.linalg.norm(W, axis=0)
        return float(np.max(np.abs(lhs - rhs) / scale))

    def __repr__(self):
        return (f"LinearOperatorHandle({self.name!r}, {self.range_dim}x{self.domain_dim}, "
                f"solves={self.solve_counter})")


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian prior ``N(mean, C)`` given through operator actions.

    ``cov_factor_apply`` applies a factor ``L`` with ``L L^T = C`` and
    ``cov_factor_adjoint`` applies ``L^T``; when the latter is omitted the
    factor is taken to be self-adjoint.  All callables accept vectors or
    column blocks.
    """

    mean: np.ndarray
    cov_apply: Callable
    cov_factor_apply: Callable
    precision_apply: Optional[Callable] = None
    cov_factor_adjoint: Optional[Callable] = None

    def factor_adjoint(self, v):
        f = self.cov_factor_adjoint or self.cov_factor_apply
        return f(v)

    @property
    def dim(self):
        return self.mean.shape[0]

    @classmethod
    def from_covariance(cls, mean, cov):
        """Prior from a dense SPD covariance, factor taken as the symmetric root."""
        cov = symmetrize(np.asarray(cov, dtype=float))
        mean = np.asarray(mean, dtype=float)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise DimensionMismatch("covariance shape does not match mean")
        evals, evecs = la.eigh(cov)
        if evals[0] < -1e-12 * max(evals[-1], 1.0):
            raise ConfigError("prior covariance is not positive semidefinite")
        root = symmetrize((evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T)
        cho = la.cho_factor(cov, lower=True)
        return cls(mean=mean,
                   cov_apply=lambda v: cov @ v,
                   cov_factor_apply=lambda v: root @ v,
                   precision_apply=lambda v: la.cho_solve(cho, v))

    def pointwise_variance(self):
        return np.diag(self.cov_apply(np.eye(self.dim))).copy()


@dataclass(frozen=True)
class NoiseModel:
    """Uncorrelated Gaussian noise over the ``d`` candidate sensors."""

    variances: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float).ravel()
        if v.size == 0 or not np.all(v > 0) or not np.all(np.isfinite(v)):
            raise ConfigError("noise variances must be positive and finite")
        object.__setattr__(self, "variances", v)

    @classmethod
    def constant(cls, d, std):
        return cls(np.full(int(d), float(std) ** 2))

    @property
    def d(self):
        return self.variances.shape[0]

    @property
    def sigma_min_sq(self):
        return float(self.variances.min())


@dataclass(frozen=True)
class Design:
    """Strictly increasing sensor indices into ``range(d)``."""

    indices: tuple
    d: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise DimensionMismatch("a design needs at least one sensor")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DimensionMismatch(f"design indices must be strictly increasing: {idx}")
        if idx[0] < 0 or idx[-1] >= self.d:
            raise DimensionMismatch(f"design indices out of range [0, {self.d}): {idx}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, indices: Iterable[int], d: int) -> "Design":
        """Sort ``indices``; duplicates are rejected."""
        idx = sorted(int(i) for i in indices)
        if len(set(idx)) != len(idx):
            raise DimensionMismatch(f"duplicate sensor index in {idx}")
        return cls(tuple(idx), d)

    @property
    def r(self):
        return len(self.indices)

    @property
    def array(self):
        return np.asarray(self.indices, dtype=int)

    def boolean_matrix(self):
        """Explicit ``r x d`` selection matrix (verification only)."""
        W = np.zeros((self.r, self.d))
        W[np.arange(self.r), self.array] = 1.0
        return W


@dataclass
class LinearModel:
    """The ``(F_d, noise, prior)`` bundle over all ``d`` candidate sensors."""

    forward: LinearOperatorHandle
    prior: GaussianPrior
    noise: NoiseModel

    def __post_init__(self):
        if self.forward.domain_dim != self.prior.dim:
            raise DimensionMismatch("forward operator domain differs from prior dimension")
        if self.forward.range_dim != self.noise.d:
            raise DimensionMismatch("forward operator range differs from number of noise variances")

    @property
    def d(self):
        return self.forward.range_dim

    @property
    def d_m(self):
        return self.forward.domain_dim


def compute_sigma_pr(goal: LinearOperatorHandle, prior: GaussianPrior) -> np.ndarray:
    """Prior covariance of the goal, ``P C P^*``, built column by column."""
    if goal.domain_dim != prior.dim:
        raise DimensionMismatch("goal domain differs from prior dimension")
    E = np.eye(goal.range_dim)
    S = goal.apply(prior.cov_apply(goal.apply_adjoint(E)))
    S = np.atleast_2d(S)
    if not np.all(np.isfinite(S)):
        raise NumericalError("goal prior covariance has non-finite entries")
    return symmetrize(S)


@dataclass
class GoalSetup:
    """Goal operator with its (jittered, factorized) prior covariance."""

    goal: LinearOperatorHandle
    sigma_pr: np.ndarray
    sigma_pr_solver: tuple

    @classmethod
    def build(cls, goal, prior, jitter=SIGMA_JITTER):
        sigma = compute_sigma_pr(goal, prior)
        d_rho = sigma.shape[0]
        sigma = sigma + (jitter * np.trace(sigma) / d_rho) * np.eye(d_rho)
        try:
            solver = la.cho_factor(sigma, lower=True)
        except la.LinAlgError as exc:
            raise ConfigError("goal prior covariance is not positive definite "
                              "after jitter; is the goal map degenerate?") from exc
        return cls(goal=goal, sigma_pr=sigma, sigma_pr_solver=solver)

    @property
    def d_rho(self):
        return self.sigma_pr.shape[0]

    def sigma_solve(self, b):
        return la.cho_solve(self.sigma_pr_solver, b)


def _counts(model, goal):
    return {
        "forward": model.forward.forward_count,
        "adjoint": model.forward.adjoint_count,
        "goal": goal.goal.forward_count,
        "goal_adjoint": goal.goal.adjoint_count,
    }


def _count_delta(before, after):
    return {key: after[key] - before[key] for key in before}


@dataclass
class OfflineMatrices:
    """Dense design-independent matrices ``H_d``, ``H_d^rho`` and their difference."""

    h_d: np.ndarray
    h_d_rho: np.ndarray
    delta_h_d: np.ndarray
    applications: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.h_d.shape[0]

    def rho_block(self, idx):
        return self.h_d_rho[np.ix_(idx, idx)]

    def delta_block(self, idx):
        return self.delta_h_d[np.ix_(idx, idx)]

    def leverage_basis(self, rel_tol=1e-10):
        """Dominant eigenvectors of ``H_d^rho`` (numerical rank, at least one)."""
        evals, evecs = la.eigh(self.h_d_rho)
        evals, evecs = evals[::-1], evecs[:, ::-1]
        k = max(1, int(np.sum(evals > rel_tol * max(evals[0], 0.0))))
        return evecs[:, :k]


@dataclass
class LowRankOffline:
    """Truncated eigenfactors replacing :class:`OfflineMatrices` at scale.

    ``rho`` houses ``(U_k, zeta)`` and ``delta`` houses ``(V_l, lambda)``.
    """

    rho: "SpectralFactor"
    delta: "SpectralFactor"
    applications: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.rho.source_dim

    def rho_block(self, idx):
        U = self.rho.basis[idx]
        return symmetrize((U * self.rho.eigenvalues) @ U.T)

    def delta_block(self, idx):
        V = self.delta.basis[idx]
        return symmetrize((V * self.delta.eigenvalues) @ V.T)

    def leverage_basis(self):
        if self.rho.rank == 0:
            raise NumericalError("goal factor has rank zero; nothing to initialize from")
        return self.rho.basis


def _gram_actions(model, goal):
    """Block actions of ``H_d^rho`` and ``Delta H_d`` through the operators."""
    F, P, C = model.forward, goal.goal, model.prior.cov_apply

    def rho_action(V):
        Z = C(F.apply_adjoint(V))
        S = goal.sigma_solve(P.apply(Z))
        return F.apply(C(P.apply_adjoint(S)))

    def delta_action(V):
        Z = C(F.apply_adjoint(V))
        S = goal.sigma_solve(P.apply(Z))
        return F.apply(Z - C(P.apply_adjoint(S)))

    return rho_action, delta_action


def assemble_offline(model: LinearModel, goal: GoalSetup, mode="exact", tol=None,
                     rho_config=None, delta_config=None,
                     dense_limit=DENSE_DATA_LIMIT):
    """Build the design-independent data for goal-oriented EIG evaluation.

    Parameters
    ----------
    model : LinearModel
    goal : GoalSetup
    mode : {"exact", "lowrank"}
        ``"exact"`` assembles dense ``H_d``, ``H_d^rho`` and ``Delta H_d``
        (requires ``d <= dense_limit``).  ``"lowrank"`` runs the randomized
        eigensolver on both operators matrix-free.
    tol : Tolerances, optional
        Eigenvalue thresholds applied after the randomized solve.
    rho_config, delta_config : RandEigConfig, optional
        Sketch settings for ``H_d^rho`` and ``Delta H_d`` (lowrank mode).

    Returns
    -------
    OfflineMatrices or LowRankOffline
        Either carries ``applications``: operator applications consumed,
        keyed by ``forward``, ``adjoint``, ``goal`` and ``goal_adjoint``.
    """
    if goal.goal.domain_dim != model.d_m:
        raise DimensionMismatch("goal and forward operators act on different parameter spaces")
    before = _counts(model, goal)
    d = model.d

    if mode == "exact":
        if d > dense_limit:
            raise DenseLimitError(f"exact assembly needs d <= {dense_limit}, got d = {d}")
        F, P = model.forward, goal.goal
        # G^T = L^T F^* so that H_d = G G^T is symmetric PSD by construction
        Gt = model.prior.factor_adjoint(F.apply_adjoint(np.eye(d)))
        h_d = symmetrize(Gt.T @ Gt)
        X = F.apply(model.prior.cov_apply(P.apply_adjoint(np.eye(goal.d_rho))))
        X = X.reshape(d, goal.d_rho)
        h_rho = symmetrize(X @ goal.sigma_solve(X.T))
        delta = symmetrize(h_d - h_rho)
        for M in (h_d, h_rho, delta):
            if not np.all(np.isfinite(M)):
                raise NumericalError("offline matrices have non-finite entries")
        return OfflineMatrices(h_d, h_rho, delta, _count_delta(before, _counts(model, goal)))

    if mode != "lowrank":
        raise ConfigError(f"unknown assembly mode {mode!r}")

    from .lowrank import RandEigConfig, Tolerances, randomized_eig, truncate_by_tolerance

    tol = tol or Tolerances(0.0, 0.0)
    rho_config = rho_config or RandEigConfig.clipped(goal.d_rho, d)
    delta_config = delta_config or RandEigConfig.clipped(min(d, 50), d)
    rho_action, delta_action = _gram_actions(model, goal)
    rho = truncate_by_tolerance(randomized_eig(rho_action, d, rho_config), tol.eps_zeta)
    delta = truncate_by_tolerance(randomized_eig(delta_action, d, delta_config), tol.eps_lambda)
    return LowRankOffline(rho, delta, _count_delta(before, _counts(model, goal)))


def gamma_eta(offline, noise: NoiseModel, design: Design) -> np.ndarray:
    """Effective noise covariance ``W (Gamma_n + Delta H_d) W^T``."""
    if design.d != noise.d or design.d != offline.d:
        raise DimensionMismatch("design, noise and offline data disagree on d")
    idx = design.array
    G = offline.delta_block(idx)
    G = G + np.diag(noise.variances[idx])
    return symmetrize(G)


def _design_rows(model, design):
    """Rows of ``F_d`` selected by the design, via ``r`` adjoint applications."""
    if design.d != model.d:
        raise DimensionMismatch("design size does not match the number of candidate sensors")
    E = np.zeros((model.d, design.r))
    E[design.array, np.arange(design.r)] = 1.0
    return model.forward.apply_adjoint(E).T


def _posterior_system(model, design, limit):
    if model.d_m > limit:
        raise DenseLimitError(f"dense posterior solve needs d_m <= {limit}, got {model.d_m}")
    if model.prior.precision_apply is None:
        raise ConfigError("posterior computations need the prior precision action")
    Fw = _design_rows(model, design)
    inv_var = 1.0 / model.noise.variances[design.array]
    precision = model.prior.precision_apply(np.eye(model.d_m))
    K = symmetrize(Fw.T @ (inv_var[:, None] * Fw) + symmetrize(precision))
    try:
        cho = la.cho_factor(K, lower=True)
    except la.LinAlgError as exc:
        raise NumericalError("posterior precision is singular") from exc
    return Fw, inv_var, K, cho


def posterior_mean(model: LinearModel, design: Design, data, limit=DENSE_PARAMETER_LIMIT):
    """Posterior mean given data observed at the design's sensors."""
    data = np.asarray(data, dtype=float)
    if data.shape != (design.r,):
        raise DimensionMismatch(f"expected {design.r} data values, got shape {data.shape}")
    Fw, inv_var, K, cho = _posterior_system(model, design, limit)
    rhs = Fw.T @ (inv_var * data) + model.prior.precision_apply(model.prior.mean)
    m_post = la.cho_solve(cho, rhs)
    resid = np.linalg.norm(K @ m_post - rhs)
    if resid > 1e-8 * max(np.linalg.norm(rhs), np.finfo(float).tiny):
        raise NumericalError(f"posterior mean residual too large: {resid:.3e}")
    return m_post


def posterior_pointwise_variance(model: LinearModel, design: Design, limit=DENSE_PARAMETER_LIMIT):
    """Diagonal of the posterior covariance ``(H_m + C^{-1})^{-1}``."""
    _, _, _, cho = _posterior_system(model, design, limit)
    Kinv = la.cho_solve(cho, np.eye(model.d_m))
    return np.diag(Kinv).copy()


def cholesky_lower(M):
    """Lower Cholesky factor; raises with the failing leading-minor order."""
    M = np.asarray(M, dtype=float)
    c, info = la.lapack.dpotrf(M, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info)
    if info < 0:
        raise NumericalError(f"dpotrf: illegal argument {-info}")
    return c
