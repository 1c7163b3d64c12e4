"""Expected information gain for parameter and goal, exact and low-rank.

The online formula only touches ``r x r`` blocks of the offline data::

    Gamma_eta(W) = W (Gamma_n + Delta H_d) W^T = R R^T
    Psi^rho(W)   = 1/2 logdet(I_r + R^{-1} (W H_d^rho W^T) R^{-T})

which is ``1/2 logdet(I + L^T W H_d^rho W^T L)`` with ``L = R^{-T}``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .exceptions import ConfigError, DimensionMismatch, NumericalError
from .model import (
    Design,
    GoalSetup,
    LinearModel,
    LowRankOffline,
    NoiseModel,
    OfflineMatrices,
    cholesky_lower,
    gamma_eta,
    symmetrize,
)


def logdet_psd(M) -> float:
    """``log det M`` for symmetric positive definite ``M`` via Cholesky."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    c = cholesky_lower(M)
    return float(2.0 * np.sum(np.log(np.diag(c))))


@dataclass(frozen=True)
class CholeskyWhitener:
    """``factor`` satisfies ``factor @ factor.T == M^{-1}``.

    It is ``R^{-T}`` for the lower Cholesky factor ``M = R R^T`` and is
    therefore upper triangular; ``chol`` keeps ``R`` for triangular solves.
    """

    factor: np.ndarray
    chol: np.ndarray

    def whiten(self, H):
        """``factor.T @ H @ factor`` for symmetric ``H`` without forming the inverse."""
        X = la.solve_triangular(self.chol, H, lower=True)
        X = la.solve_triangular(self.chol, X.T, lower=True)
        return symmetrize(X)


def inv_cholesky_factor(M) -> CholeskyWhitener:
    R = cholesky_lower(np.atleast_2d(M))
    L = la.solve_triangular(R, np.eye(R.shape[0]), lower=True).T
    return CholeskyWhitener(factor=L, chol=R)


def _whitened_logdet(h_block, gamma_block):
    if h_block.shape[0] == 0:
        return 0.0
    w = inv_cholesky_factor(gamma_block)
    inner = np.eye(h_block.shape[0]) + w.whiten(h_block)
    return 0.5 * logdet_psd(inner)


class EigEvaluator:
    """Goal-oriented EIG over designs, backed by exact or low-rank offline data.

    ``eval_counter`` counts non-cached evaluations.  Cached values are the
    stored floats, so repeated queries are bitwise identical.  Counter and
    cache updates are lock-protected; evaluation itself is pure.
    """

    def __init__(self, offline, noise: NoiseModel, cache=True):
        if offline.d != noise.d:
            raise DimensionMismatch("offline data and noise model disagree on d")
        self.offline = offline
        self.noise = noise
        self.use_cache = cache
        self._cache = {}
        self._lock = threading.Lock()
        self.eval_counter = 0

    @property
    def d(self):
        return self.offline.d

    @property
    def is_lowrank(self):
        return isinstance(self.offline, LowRankOffline)

    def compute(self, design: Design) -> float:
        """Uncached evaluation (still counted)."""
        if design.d != self.d:
            raise DimensionMismatch(f"design over {design.d} candidates, evaluator has {self.d}")
        try:
            G = gamma_eta(self.offline, self.noise, design)
            value = _whitened_logdet(self.offline.rho_block(design.array), G)
        except NumericalError as exc:
            raise NumericalError(f"EIG evaluation failed for design {design.indices}: {exc}") from exc
        with self._lock:
            self.eval_counter += 1
        return value

    def __call__(self, design: Design) -> float:
        if not self.use_cache:
            return self.compute(design)
        key = design.indices
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        value = self.compute(design)
        with self._lock:
            # another thread may have filled it; keep the first stored value
            value = self._cache.setdefault(key, value)
        return value

    def clear_cache(self):
        with self._lock:
            self._cache.clear()


def eig_goal_online(evaluator: EigEvaluator, design: Design) -> float:
    """Goal EIG from exact offline matrices (no operator applications)."""
    if not isinstance(evaluator.offline, OfflineMatrices):
        raise ConfigError("eig_goal_online needs exact offline matrices")
    return evaluator(design)


def eig_goal_approx(evaluator: EigEvaluator, design: Design) -> float:
    """Goal EIG from truncated eigenfactors."""
    if not evaluator.is_lowrank:
        raise ConfigError("eig_goal_approx needs low-rank offline factors")
    return evaluator(design)


def eig_parameter(offline: OfflineMatrices, noise: NoiseModel, design: Design) -> float:
    """Parameter EIG in data space, ``1/2 logdet(I_r + N^{-1/2} W H_d W^T N^{-1/2})``."""
    if not isinstance(offline, OfflineMatrices):
        raise ConfigError("parameter EIG needs the dense H_d")
    idx = design.array
    s = 1.0 / np.sqrt(noise.variances[idx])
    inner = np.eye(design.r) + symmetrize(s[:, None] * offline.h_d[np.ix_(idx, idx)] * s[None, :])
    return 0.5 * logdet_psd(inner)


def _symmetric_sqrt(S):
    evals, evecs = la.eigh(S)
    return symmetrize((evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T)


def eig_goal_direct(model: LinearModel, goal: GoalSetup, design: Design) -> float:
    """Goal EIG assembled in goal space, independent of the offline path.

    Computes ``1/2 logdet(I_rho + S^{1/2} H S^{1/2})`` with
    ``H = (F_W P_dag)^* Gamma_eta(W)^{-1} (F_W P_dag)``,
    ``P_dag = C P^* S^{-1}`` and ``Gamma_eta(W)`` formed from
    ``F_W (C - C P^* S^{-1} P C) F_W^*`` with fresh operator applications.
    Costs ``2 r`` forward-type applications plus ``d_rho``.
    """
    if design.d != model.d:
        raise DimensionMismatch("design size does not match the model")
    F, P, C = model.forward, goal.goal, model.prior.cov_apply
    idx = design.array
    E = np.zeros((model.d, design.r))
    E[idx, np.arange(design.r)] = 1.0
    # W F C F^* W^T
    FCFt = F.apply(C(F.apply_adjoint(E)))[idx]
    # W F C P^*
    FCPt = F.apply(C(P.apply_adjoint(np.eye(goal.d_rho)))).reshape(model.d, goal.d_rho)[idx]
    FPdag = goal.sigma_solve(FCPt.T).T
    G = np.diag(model.noise.variances[idx]) + FCFt - FCPt @ FPdag.T
    G = symmetrize(G)
    cho = la.cho_factor(G, lower=True)
    H = symmetrize(FPdag.T @ la.cho_solve(cho, FPdag))
    root = _symmetric_sqrt(goal.sigma_pr)
    inner = np.eye(goal.d_rho) + symmetrize(root @ H @ root)
    return 0.5 * logdet_psd(inner)
