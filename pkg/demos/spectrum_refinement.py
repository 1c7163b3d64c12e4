"""Leading eigenvalues of Delta H_d as the grid is refined (75 sensors)."""
import numpy as np

from gooed.model import assemble_offline
from gooed.transport import build_problem


def main(resolutions=(20, 23, 40, 46, 80), goal="left"):
    prev = None
    for n in resolutions:
        p = build_problem(n=n, sensors="seventyfive", goal=goal)
        off = assemble_offline(p.model, p.goal)
        lead = np.sort(np.linalg.eigvalsh(off.delta_h_d))[::-1][:10]
        rho = np.sort(np.linalg.eigvalsh(off.h_d_rho))[::-1]
        line = f"n = {n:3d}  d_m = {p.grid.d_m:5d}  lambda_1..3 = {np.array2string(lead[:3], precision=4)}"
        line += f"  zeta_2/zeta_1 = {rho[1] / rho[0]:.1e}"
        if prev is not None:
            line += f"  max rel change {np.max(np.abs(lead - prev) / lead):.3f}"
        print(line)
        prev = lead


if __name__ == "__main__":
    main()
