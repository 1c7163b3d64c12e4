"""How much the offline/online split saves.

Evaluates the goal EIG of many random designs twice: once from scratch
through the transport solver and once from the precomputed data-space
operators.  Both agree to rounding; only the second is model free.
"""
import time

import numpy as np

from gooed.design import random_designs
from gooed.eig import EigEvaluator, eig_goal_direct
from gooed.model import assemble_offline
from gooed.transport import STEP_SOLVES, build_problem


def main(n=23, r=10, count=5):
    p = build_problem(n=n, sensors="seventyfive", goal="left")
    designs = random_designs(75, r, count, seed=1)

    t0 = time.perf_counter()
    steps = STEP_SOLVES.total
    direct = [eig_goal_direct(p.model, p.goal, D) for D in designs]
    t_direct = time.perf_counter() - t0
    print(f"direct: {t_direct / count:.3f}s per design, {STEP_SOLVES.total - steps} time-step solves")

    t0 = time.perf_counter()
    off = assemble_offline(p.model, p.goal)
    t_off = time.perf_counter() - t0
    ev = EigEvaluator(off, p.model.noise, cache=False)
    t0 = time.perf_counter()
    steps = STEP_SOLVES.total
    online = [ev(D) for D in designs]
    t_on = time.perf_counter() - t0
    print(f"offline stage: {t_off:.3f}s once")
    print(f"online: {t_on / count * 1e3:.3f}ms per design, {STEP_SOLVES.total - steps} time-step solves")
    print(f"largest relative difference: {np.max(np.abs(np.subtract(direct, online)) / np.abs(direct)):.2e}")


if __name__ == "__main__":
    main()
