"""Sensor-subset optimization: leverage initialization, swapping greedy, baselines."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .exceptions import ConfigError, DimensionMismatch, GooedError
from .model import Design

EXHAUSTIVE_CAP = 2_000_000


class EvaluationError(GooedError):
    """An EIG evaluation failed; ``design`` is the offending design."""

    def __init__(self, design, cause):
        self.design = design
        super().__init__(f"evaluation failed for {design.indices}: {cause}")


def _score(evaluator, design):
    try:
        return evaluator(design)
    except GooedError as exc:
        raise EvaluationError(design, exc) from exc


@dataclass
class OptimizerTrace:
    """Bookkeeping for one swapping-greedy run.

    ``eig_evaluations`` counts candidate designs scored during swap scans
    (``d - r`` per step; the incumbent's value is carried over), which gives
    ``loops * r * (d - r)``.  ``distinct_evaluations`` is the evaluator's own
    counter delta, which is lower when its cache is enabled.
    """

    loops: int = 0
    swaps: int = 0
    eig_evaluations: int = 0
    eig_history: List[float] = field(default_factory=list)
    swaps_per_loop: List[int] = field(default_factory=list)
    final_design: Optional[Design] = None
    initial_design: Optional[Design] = None
    converged: bool = False
    truncated: bool = False
    distinct_evaluations: int = 0

    @property
    def final_value(self):
        return self.eig_history[-1]


def leverage_init(basis, r: int) -> Design:
    """Rows of ``basis`` with the ``r`` largest Euclidean norms (ties to lower index)."""
    U = np.asarray(basis, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    d = U.shape[0]
    if not 1 <= r <= d:
        raise ConfigError(f"cannot pick r = {r} sensors from d = {d}")
    norms = np.linalg.norm(U, axis=1)
    # stable sort on -norm keeps lower indices first among equal norms
    order = np.argsort(-norms, kind="stable")
    return Design.of(order[:r], d)


def swap_step(current: List[int], t: int, evaluator: Callable, current_value: float, d: int):
    """Try replacing ``current[t]`` by every sensor not in ``current``.

    Parameters
    ----------
    current : list of int
        Working sensor list (not necessarily sorted); left untouched.
    t : int
        Position to swap.
    evaluator : callable
        ``Design -> float``.
    current_value : float
        EIG of ``current``; the incumbent competes with this cached value.
    d : int
        Number of candidates.

    Returns
    -------
    (list, float, int)
        Updated list, its EIG, and the number of candidate evaluations
        (always ``d - len(current)``).
    """
    if not 0 <= t < len(current):
        raise DimensionMismatch(f"position {t} outside design of size {len(current)}")
    members = set(current)
    best_value, best_sensor = current_value, current[t]
    rest = current[:t] + current[t + 1:]
    n_evals = 0
    for s in range(d):
        if s in members:
            continue
        value = _score(evaluator, Design.of(rest + [s], d))
        n_evals += 1
        if value > best_value:
            best_value, best_sensor = value, s
    updated = list(current)
    updated[t] = best_sensor
    return updated, best_value, n_evals


def swapping_greedy(evaluator, d: int, r: int, max_loops: int = 20, basis=None,
                    initial: Optional[Design] = None, eig_tol: Optional[float] = None) -> OptimizerTrace:
    """Swapping greedy maximization of the goal EIG.

    The initial set comes from :func:`leverage_init` on ``basis`` (defaults to
    the evaluator's dominant ``H_d^rho`` eigenvectors).  Each loop visits the
    positions of the current set in sorted order and swaps each sensor for
    the best outsider.  Stops after a loop that leaves the set unchanged, or,
    when ``eig_tol`` is given, after a loop whose EIG gain is below it.
    """
    if not 1 <= r <= d:
        raise ConfigError(f"cannot pick r = {r} sensors from d = {d}")
    if max_loops < 1:
        raise ConfigError("max_loops must be at least 1")
    if initial is None:
        if basis is None:
            basis = evaluator.offline.leverage_basis()
        initial = leverage_init(basis, r)
    if initial.r != r or initial.d != d:
        raise DimensionMismatch("initial design does not match (d, r)")

    counter_start = getattr(evaluator, "eval_counter", 0)
    trace = OptimizerTrace(initial_design=initial)
    current = list(initial.indices)
    value = _score(evaluator, initial)
    trace.eig_history.append(value)

    while trace.loops < max_loops:
        start_set, start_value = set(current), value
        current.sort()
        loop_swaps = 0
        for t in range(r):
            updated, value_t, n = swap_step(current, t, evaluator, value, d)
            trace.eig_evaluations += n
            if updated[t] != current[t]:
                loop_swaps += 1
            current, value = updated, value_t
            trace.eig_history.append(value)
        trace.loops += 1
        trace.swaps += loop_swaps
        trace.swaps_per_loop.append(loop_swaps)
        if set(current) == start_set:
            trace.converged = True
            break
        if eig_tol is not None and value - start_value < eig_tol:
            trace.converged = True
            break
    trace.truncated = not trace.converged
    trace.final_design = Design.of(current, d)
    trace.distinct_evaluations = getattr(evaluator, "eval_counter", 0) - counter_start
    return trace


def standard_greedy(evaluator, d: int, r: int, return_values=False):
    """Add sensors one at a time, each maximizing EIG (ties to lowest index)."""
    if not 1 <= r <= d:
        raise ConfigError(f"cannot pick r = {r} sensors from d = {d}")
    chosen: List[int] = []
    values = []
    for _ in range(r):
        best_value, best_sensor = -math.inf, None
        for s in range(d):
            if s in chosen:
                continue
            value = _score(evaluator, Design.of(chosen + [s], d))
            if value > best_value:
                best_value, best_sensor = value, s
        chosen.append(best_sensor)
        values.append(best_value)
    design = Design.of(chosen, d)
    if return_values:
        return design, values
    return design


def exhaustive_search(evaluator, d: int, r: int, cap: int = EXHAUSTIVE_CAP):
    """Global maximizer over all ``r``-subsets, lexicographically first among ties."""
    if not 1 <= r <= d:
        raise ConfigError(f"cannot pick r = {r} sensors from d = {d}")
    n = math.comb(d, r)
    if n > cap:
        raise ConfigError(f"C({d}, {r}) = {n} exceeds the exhaustive-search cap {cap}")
    best_value, best = -math.inf, None
    for combo in itertools.combinations(range(d), r):
        design = Design(combo, d)
        value = _score(evaluator, design)
        if value > best_value:
            best_value, best = value, design
    return best, best_value


def all_design_values(evaluator, d: int, r: int, cap: int = EXHAUSTIVE_CAP):
    """Every ``r``-subset with its value, in lexicographic order."""
    if math.comb(d, r) > cap:
        raise ConfigError(f"C({d}, {r}) exceeds the exhaustive-search cap {cap}")
    return [(Design(c, d), _score(evaluator, Design(c, d)))
            for c in itertools.combinations(range(d), r)]


def random_designs(d: int, r: int, n: int, seed) -> List[Design]:
    if n < 1:
        raise ConfigError("need at least one random design")
    if not 1 <= r <= d:
        raise ConfigError(f"cannot pick r = {r} sensors from d = {d}")
    rng = np.random.default_rng(seed)
    return [Design.of(rng.choice(d, size=r, replace=False), d) for _ in range(n)]


def random_design_sample(evaluator, d: int, r: int, n: int, seed):
    """``n`` uniformly drawn ``r``-subsets with their EIG values."""
    return [(D, _score(evaluator, D)) for D in random_designs(d, r, n, seed)]
