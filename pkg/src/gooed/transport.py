"""Desk-scale contaminant transport model on the unit square with two blocks removed.

Discretization
--------------
Nodes sit on a uniform ``(n+1) x (n+1)`` lattice; nodes strictly inside a
block are dropped.  Each active node owns the dual cell of quarter cells
around it and exchanges flux with its active lattice neighbours only, so
every wall (outer square or block) is a no-flux boundary.

* diffusion: ``k |f| (u_j - u_i) / h`` per dual face ``f`` (homogeneous Neumann);
* advection: advective form ``-sum_f F_f (u_f - u_i)`` per unit area, with face
  fluxes ``F_f`` from a stream function sampled at dual-cell corners, which
  makes the discrete divergence vanish identically and zeroes the flux
  through every wall;
* time: implicit Euler with ``dt = T / N_t``.

Forward and adjoint solves share one sparse LU of ``I - dt A``; the adjoint
uses transposed solves, so dot tests hold to round-off.

The prior covariance is ``K^{-1} M K^{-1}``, the lumped-mass version of
``A^{-2}`` for ``A = -gamma Lap + delta`` with Robin walls, so nodal
variances do not depend on ``h``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .exceptions import ConfigError, DimensionMismatch, NumericalError
from .model import GaussianPrior, GoalSetup, LinearModel, LinearOperatorHandle, NoiseModel

OBSTACLES = ((0.25, 0.5, 0.15, 0.4), (0.6, 0.75, 0.6, 0.85))
NINE_X = (0.2, 0.55, 0.8)
NINE_Y = (0.25, 0.5, 0.75)
SOURCE_CENTER = (0.35, 0.7)
_EPS = 1e-12


class StepCounter:
    """Process-wide tally of implicit-Euler linear solves (one per time step)."""

    def __init__(self):
        self.forward = 0
        self.adjoint = 0

    @property
    def total(self):
        return self.forward + self.adjoint


STEP_SOLVES = StepCounter()


def _inside_obstacle(x, y, strict=True):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    out = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for x0, x1, y0, y1 in OBSTACLES:
        if strict:
            out |= (x > x0 + _EPS) & (x < x1 - _EPS) & (y > y0 + _EPS) & (y < y1 - _EPS)
        else:
            out |= (x >= x0 - _EPS) & (x <= x1 + _EPS) & (y >= y0 - _EPS) & (y <= y1 + _EPS)
    return out


def distance_to_rectangle(points, rect):
    x0, x1, y0, y1 = rect
    p = np.atleast_2d(points)
    dx = np.maximum.reduce([x0 - p[:, 0], np.zeros(len(p)), p[:, 0] - x1])
    dy = np.maximum.reduce([y0 - p[:, 1], np.zeros(len(p)), p[:, 1] - y1])
    return np.hypot(dx, dy)


@dataclass(frozen=True)
class DomainGrid:
    """Node lattice restricted to the flow domain.

    A lattice cell belongs to the domain when its four corners are active;
    nodes touching no domain cell are dropped.  Node ``i`` owns the dual cell
    made of the quarter cells around it, of area ``areas[i]``.
    """

    n: int
    h: float
    x: np.ndarray
    active: np.ndarray        # (n+1, n+1) bool, indexed [i, j] -> (x_i, y_j)
    index: np.ndarray         # (n+1, n+1) int, -1 for removed nodes
    ij: np.ndarray            # (d_m, 2) lattice indices of active nodes
    cells: np.ndarray         # (n, n) bool, lattice cells inside the domain
    areas: np.ndarray         # (d_m,) dual-cell areas
    exterior_length: np.ndarray  # (d_m,) dual-cell boundary length on the outer wall
    obstacle_length: np.ndarray  # (d_m,) dual-cell boundary length on block walls

    @property
    def d_m(self):
        return self.ij.shape[0]

    @property
    def coords(self):
        return self.x[self.ij]

    def _padded_cells(self):
        c = np.zeros((self.n + 2, self.n + 2), dtype=bool)
        c[1:-1, 1:-1] = self.cells
        return c  # cell (i, j) at [i + 1, j + 1]

    def edges(self):
        """Active neighbour pairs ``(east, north)`` as arrays of node ids."""
        idx, act = self.index, self.active
        e = act[:-1, :] & act[1:, :]
        nth = act[:, :-1] & act[:, 1:]
        east = np.stack([idx[:-1, :][e], idx[1:, :][e]], axis=1)
        north = np.stack([idx[:, :-1][nth], idx[:, 1:][nth]], axis=1)
        return east, north

    def face_lengths(self):
        """Length of the dual face crossing each east and north edge."""
        east, north = self.edges()
        c = self._padded_cells()
        i, j = self.ij[east[:, 0], 0], self.ij[east[:, 0], 1]
        le = 0.5 * self.h * (c[i + 1, j].astype(int) + c[i + 1, j + 1])
        i, j = self.ij[north[:, 0], 0], self.ij[north[:, 0], 1]
        ln = 0.5 * self.h * (c[i, j + 1].astype(int) + c[i + 1, j + 1])
        return le, ln

    def node_at(self, point):
        """Nearest active node to ``point`` (ties to the lowest node id)."""
        d2 = np.sum((self.coords - np.asarray(point, dtype=float)) ** 2, axis=1)
        return int(np.argmin(d2))


def build_grid(n: int) -> DomainGrid:
    """Lattice with ``n`` cells per side and both blocks removed."""
    if n < 16:
        raise ConfigError(f"grid needs at least 16 cells per side, got {n}")
    x = np.linspace(0.0, 1.0, n + 1)
    h = 1.0 / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    active = ~_inside_obstacle(X, Y)
    for x0, x1, y0, y1 in OBSTACLES:
        box = (X > x0 + _EPS) & (X < x1 - _EPS) & (Y > y0 + _EPS) & (Y < y1 - _EPS)
        if not box.any():
            raise ConfigError(f"grid n={n} does not resolve block {(x0, x1, y0, y1)}")
    cells = active[:-1, :-1] & active[1:, :-1] & active[:-1, 1:] & active[1:, 1:]
    pc = np.zeros((n + 2, n + 2), dtype=int)
    pc[1:-1, 1:-1] = cells
    # quarter cells around node (i, j): cells (i-1..i, j-1..j)
    count = pc[:-1, :-1] + pc[1:, :-1] + pc[:-1, 1:] + pc[1:, 1:]
    active &= count > 0
    index = -np.ones((n + 1, n + 1), dtype=int)
    # node ids in x-major order of the lattice
    index[active] = np.arange(int(active.sum()))
    ij = np.argwhere(active)
    areas = 0.25 * h * h * count[active]

    # walls: every side of a domain cell not shared with another domain cell
    ext = np.zeros((n + 1, n + 1))
    obs = np.zeros((n + 1, n + 1))
    ci, cj = np.nonzero(cells)
    for di, dj, ends in ((-1, 0, ((0, 0), (0, 1))), (1, 0, ((1, 0), (1, 1))),
                         (0, -1, ((0, 0), (1, 0))), (0, 1, ((0, 1), (1, 1)))):
        ni, nj = ci + di, cj + dj
        outside = (ni < 0) | (ni >= n) | (nj < 0) | (nj >= n)
        wall = outside | ~pc[np.clip(ni, -1, n) + 1, np.clip(nj, -1, n) + 1].astype(bool)
        for (ei, ej) in ends:
            np.add.at(ext, (ci[wall & outside] + ei, cj[wall & outside] + ej), 0.5 * h)
            np.add.at(obs, (ci[wall & ~outside] + ei, cj[wall & ~outside] + ej), 0.5 * h)
    return DomainGrid(n, h, x, active, index, ij, cells, areas, ext[active], obs[active])


def grid_for_dimension(target_dm: int) -> DomainGrid:
    """Grid whose active-node count is closest to ``target_dm``."""
    n = max(16, int(round(math.sqrt(target_dm / 0.9))) - 1)
    best = min((build_grid(m) for m in range(max(16, n - 3), n + 4)),
               key=lambda g: abs(g.d_m - target_dm))
    return best


class VelocityField:
    """Advecting velocity; either an analytic stream function or gridded node data."""

    def __init__(self, kind, stream=None, values=None):
        if kind not in ("analytic", "from-file"):
            raise ConfigError(f"unknown velocity kind {kind!r}")
        self.kind = kind
        self.stream = stream
        self.values = None if values is None else np.asarray(values, dtype=float)
        self._interp = None
        if kind == "from-file":
            ny, nx, _ = self.values.shape
            gx, gy = np.linspace(0, 1, nx), np.linspace(0, 1, ny)
            self._interp = [RegularGridInterpolator((gy, gx), self.values[:, :, c]) for c in (0, 1)]

    def evaluate(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "analytic":
            return self.stream_velocity(p)
        q = np.clip(p[:, ::-1], 0.0, 1.0)
        return np.stack([f(q) for f in self._interp], axis=1)

    def stream_velocity(self, p, step=1e-6):
        psi = self.stream
        x, y = p[:, 0], p[:, 1]
        u = (psi(x, y + step) - psi(x, y - step)) / (2 * step)
        v = -(psi(x + step, y) - psi(x - step, y)) / (2 * step)
        return np.stack([u, v], axis=1)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            nx, ny = (int(t) for t in fh.readline().split())
            data = np.loadtxt(fh, ndmin=2)
        if data.shape != (nx * ny, 2):
            raise DimensionMismatch(f"velocity file {path}: expected {nx * ny} rows of 2 values")
        return cls("from-file", values=data.reshape(ny, nx, 2))

    def face_fluxes(self, grid: DomainGrid):
        """Fluxes through east and north faces of each active edge (see :meth:`DomainGrid.edges`)."""
        east, north = grid.edges()
        h = grid.h
        ij = grid.ij
        if self.kind == "analytic":
            n = grid.n
            # corner (a, b) is the centre of cell (a-1, b-1); psi vanishes on walls
            ok = grid._padded_cells()
            c = (np.arange(n + 2) - 0.5) * h
            CX, CY = np.meshgrid(c, c, indexing="ij")
            psi = np.where(ok, self.stream(CX, CY), 0.0)
            i, j = ij[east[:, 0], 0], ij[east[:, 0], 1]
            f_east = psi[i + 1, j + 1] - psi[i + 1, j]
            i, j = ij[north[:, 0], 0], ij[north[:, 0], 1]
            f_north = psi[i, j + 1] - psi[i + 1, j + 1]
            return f_east, f_north
        coords = grid.coords
        mid_e = 0.5 * (coords[east[:, 0]] + coords[east[:, 1]])
        mid_n = 0.5 * (coords[north[:, 0]] + coords[north[:, 1]])
        return h * self.evaluate(mid_e)[:, 0], h * self.evaluate(mid_n)[:, 1]


STREAM_CUTOFF = 0.1


def _default_stream(x, y):
    """Single-cell stream function damped to zero on both block walls."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    psi = -np.sin(np.pi * x) * np.sin(np.pi * y) / np.pi
    pts = np.column_stack([x.ravel(), y.ravel()])
    for rect in OBSTACLES:
        dist = distance_to_rectangle(pts, rect).reshape(x.shape)
        psi = psi * -np.expm1(-(dist / STREAM_CUTOFF) ** 2)
    return psi


def default_velocity() -> VelocityField:
    """Clockwise recirculation: up along the left wall, down along the right.

    Peak wall speed is 1; the flow is tangential on every wall and slows to
    rest against the blocks over a length ``STREAM_CUTOFF``.
    """
    return VelocityField("analytic", stream=_default_stream)


def write_velocity_file(path, field: VelocityField, nx: int, ny: int):
    """Sample ``field`` on an ``nx x ny`` lattice over the unit square and write it."""
    gx, gy = np.linspace(0, 1, nx), np.linspace(0, 1, ny)
    X, Y = np.meshgrid(gx, gy)  # row-major over y then x
    vals = field.evaluate(np.column_stack([X.ravel(), Y.ravel()]))
    with open(path, "w") as fh:
        fh.write(f"{nx} {ny}\n")
        for u, v in vals:
            fh.write(f"{float(u)!r} {float(v)!r}\n")


def discrete_divergence(grid: DomainGrid, f_east, f_north):
    """Net outflow per active node from the given face fluxes."""
    east, north = grid.edges()
    div = np.zeros(grid.d_m)
    np.add.at(div, east[:, 0], f_east)
    np.add.at(div, east[:, 1], -f_east)
    np.add.at(div, north[:, 0], f_north)
    np.add.at(div, north[:, 1], -f_north)
    return div


@dataclass(frozen=True)
class TransportConfig:
    diffusion: float = 0.001
    final_time: float = 0.8
    time_steps: int = 40
    prediction_time: float = 1.0
    velocity: Optional[VelocityField] = None
    advection: str = "centered"
    observation_times: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.diffusion <= 0 or self.final_time <= 0 or self.time_steps < 1:
            raise ConfigError("diffusion, final_time and time_steps must be positive")
        if self.prediction_time <= 0:
            raise ConfigError("prediction_time must be positive")
        if self.advection not in ("centered", "upwind"):
            raise ConfigError(f"unknown advection scheme {self.advection!r}")

    @property
    def dt(self):
        return self.final_time / self.time_steps


@dataclass(frozen=True)
class PriorOperatorConfig:
    gamma: float = 1.0
    delta: float = 8.0
    robin_beta: Optional[float] = None
    mean: float = 0.25

    def __post_init__(self):
        if self.gamma <= 0 or self.delta <= 0:
            raise ConfigError("gamma and delta must be positive")
        if self.robin_beta is not None and self.robin_beta < 0:
            raise ConfigError("robin_beta must be nonnegative")

    @property
    def beta(self):
        return math.sqrt(self.gamma * self.delta) if self.robin_beta is None else self.robin_beta


def _bilinear_weights(grid: DomainGrid, point):
    """Bilinear weights on the lattice cell holding ``point``; ``None`` if a corner is removed."""
    n, h = grid.n, grid.h
    i = min(int(np.floor(point[0] / h)), n - 1)
    j = min(int(np.floor(point[1] / h)), n - 1)
    tx, ty = point[0] / h - i, point[1] / h - j
    corners = [(i, j, (1 - tx) * (1 - ty)), (i + 1, j, tx * (1 - ty)),
               (i, j + 1, (1 - tx) * ty), (i + 1, j + 1, tx * ty)]
    out = {}
    for a, b, w in corners:
        if w == 0.0:
            continue
        if not grid.active[a, b]:
            return None
        out[int(grid.index[a, b])] = w
    return out


@dataclass
class SensorLayout:
    """Sensor coordinates and the sparse map from nodal values to readings.

    ``interpolation="bilinear"`` reads each sensor from its lattice cell,
    falling back to the nearest active node when a cell corner lies inside
    a block; ``"nearest"`` always uses the nearest active node.
    """

    coordinates: np.ndarray
    nodes: np.ndarray
    weights: sp.csr_matrix
    metadata: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.coordinates.shape[0]

    @classmethod
    def on_grid(cls, coordinates, grid: DomainGrid, metadata=None, interpolation="bilinear"):
        pts = np.atleast_2d(np.asarray(coordinates, dtype=float))
        if pts.shape[1] != 2:
            raise DimensionMismatch("sensor coordinates must be 2-D points")
        if np.any((pts < -_EPS) | (pts > 1 + _EPS)):
            raise ConfigError("sensor outside the unit square")
        if interpolation not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown interpolation {interpolation!r}")
        bad = _inside_obstacle(pts[:, 0], pts[:, 1])
        if bad.any():
            raise ConfigError(f"sensor(s) inside a block: {pts[bad].tolist()}")
        nodes = np.array([grid.node_at(p) for p in pts], dtype=int)
        rows, cols, vals = [], [], []
        for s, p in enumerate(pts):
            w = _bilinear_weights(grid, p) if interpolation == "bilinear" else None
            w = w or {int(nodes[s]): 1.0}
            for c, v in w.items():
                rows.append(s), cols.append(c), vals.append(v)
        B = sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), grid.d_m))
        meta = dict(metadata or {})
        meta.setdefault("interpolation", interpolation)
        return cls(pts, nodes, B, meta)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "x", "y"])
            for i, (x, y) in enumerate(self.coordinates):
                w.writerow([i, repr(float(x)), repr(float(y))])

    @staticmethod
    def read_csv(path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"index", "x", "y"}:
            raise DimensionMismatch(f"{path}: expected columns index,x,y")
        rows.sort(key=lambda r: int(r["index"]))
        if [int(r["index"]) for r in rows] != list(range(len(rows))):
            raise DimensionMismatch(f"{path}: indices must be 0..d-1")
        return np.array([[float(r["x"]), float(r["y"])] for r in rows])


def lattice_sensors(count=75, margin=0.02):
    """Uniform lattice over the active domain, thinned to exactly ``count`` points.

    The smallest ``m x m`` cell-centred lattice with at least ``count`` points
    farther than ``margin`` from both blocks is built; surplus points are
    removed at evenly spaced positions of its row-major order.
    """
    m = int(math.ceil(math.sqrt(count)))
    while True:
        c = (np.arange(m) + 0.5) / m
        X, Y = np.meshgrid(c, c)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        dist = np.min([distance_to_rectangle(pts, r) for r in OBSTACLES], axis=0)
        pts = pts[dist > margin]
        if len(pts) >= count:
            break
        m += 1
    surplus = len(pts) - count
    drop = set()
    if surplus:
        drop = set(np.round(np.linspace(0, len(pts) - 1, surplus + 2)[1:-1]).astype(int).tolist())
    keep = np.array([i for i in range(len(pts)) if i not in drop])
    meta = {"lattice": m, "margin": margin, "dropped_positions": sorted(drop)}
    return pts[keep], meta


def candidate_sensors(which: str, grid: DomainGrid, interpolation="bilinear") -> SensorLayout:
    """The 3 x 3 layout (x-major order) or the 75-point lattice."""
    if which == "nine":
        pts = [(x, y) for x in NINE_X for y in NINE_Y]
        return SensorLayout.on_grid(pts, grid, {"layout": "nine"}, interpolation)
    if which == "seventyfive":
        pts, meta = lattice_sensors(75)
        meta["layout"] = "seventyfive"
        return SensorLayout.on_grid(pts, grid, meta, interpolation)
    raise ConfigError(f"unknown sensor layout {which!r}")


def _block_id(x, y):
    for b, (x0, x1, y0, y1) in enumerate(OBSTACLES):
        if x0 + _EPS < x < x1 - _EPS and y0 + _EPS < y < y1 - _EPS:
            return b
    return -1


def band_nodes(grid: DomainGrid, which: str, width=0.02):
    """Active nodes within ``width`` of the selected block(s).

    Nodes on the discrete block wall (lattice neighbour removed by that
    block) are always included, so the band is the wall itself whenever
    ``width < h`` and does not widen with ``h``.
    """
    blocks = {"left": (0,), "right": (1,), "both": (0, 1)}
    if which not in blocks:
        raise ConfigError(f"unknown goal {which!r}; expected left, right or both")
    coords = grid.coords
    hit = np.zeros(grid.d_m, dtype=bool)
    for bk in blocks[which]:
        hit |= distance_to_rectangle(coords, OBSTACLES[bk]) <= width + _EPS
    n = grid.n
    for node, (i, j) in enumerate(grid.ij):
        if hit[node]:
            continue
        for a, b in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= a <= n and 0 <= b <= n and grid.index[a, b] < 0 \
                    and _block_id(grid.x[a], grid.x[b]) in blocks[which]:
                hit[node] = True
                break
    nodes = np.flatnonzero(hit)
    if nodes.size == 0:
        raise ConfigError(f"goal band {which!r} is empty on grid n={n}")
    return nodes


def true_initial_condition(grid: DomainGrid):
    r2 = np.sum((grid.coords - np.array(SOURCE_CENTER)) ** 2, axis=1)
    return np.minimum(0.5, np.exp(-100.0 * r2))


class TransportModel:
    """Implicit-Euler advection-diffusion solver with exact discrete adjoint."""

    def __init__(self, grid: DomainGrid, config: TransportConfig = TransportConfig(),
                 prior_config: PriorOperatorConfig = PriorOperatorConfig()):
        self.grid = grid
        self.config = config
        self.prior_config = prior_config
        self.velocity = config.velocity or default_velocity()
        self.operator = self._assemble_operator()
        self.step_matrix = (sp.identity(grid.d_m, format="csc") - config.dt * self.operator).tocsc()
        self._step_lu = spla.splu(self.step_matrix)
        self.prior_operator = self._assemble_prior_operator()
        self._prior_lu = spla.splu(self.prior_operator.tocsc())

    def _assemble_operator(self):
        g, k = self.grid, self.config.diffusion
        east, north = g.edges()
        f_east, f_north = self.velocity.face_fluxes(g)
        le, ln = g.face_lengths()
        pairs = np.vstack([east, north])
        flux = np.concatenate([f_east, f_north])  # positive from pairs[:,0] to pairs[:,1]
        cond = k * np.concatenate([le, ln]) / g.h
        a, b = pairs[:, 0], pairs[:, 1]
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r), cols.append(c), vals.append(v)

        add(a, b, cond); add(b, a, cond); add(a, a, -cond); add(b, b, -cond)
        # advection in advective form: area_i du_i/dt -= sum_f F_out (u_f - u_i) / 2
        if self.config.advection == "centered":
            add(a, b, -flux / 2); add(a, a, flux / 2)
            add(b, a, flux / 2); add(b, b, -flux / 2)
        else:
            inflow_a = np.minimum(flux, 0.0)   # F_out of a < 0 -> upwind value from b
            inflow_b = np.minimum(-flux, 0.0)
            add(a, b, -inflow_a); add(a, a, inflow_a)
            add(b, a, -inflow_b); add(b, b, inflow_b)
        K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(g.d_m, g.d_m)).tocsr()
        return sp.diags(1.0 / g.areas) @ K

    def _assemble_prior_operator(self):
        """Stiffness ``gamma K + delta M + beta M_wall`` of ``-gamma Lap + delta`` with Robin walls."""
        g, pc = self.grid, self.prior_config
        east, north = g.edges()
        le, ln = g.face_lengths()
        w = np.concatenate([le, ln]) / g.h
        pairs = np.vstack([east, north])
        a, b = pairs[:, 0], pairs[:, 1]
        lap = sp.coo_matrix((np.concatenate([-w, -w, w, w]),
                             (np.concatenate([a, b, a, b]), np.concatenate([b, a, a, b]))),
                            shape=(g.d_m, g.d_m)).tocsr()
        return pc.gamma * lap + sp.diags(pc.delta * g.areas + pc.beta * g.exterior_length)

    # time stepping ---------------------------------------------------------

    def steps_to(self, t_end):
        if t_end <= 0:
            raise ConfigError("time horizon must be positive")
        n = t_end / self.config.dt
        steps = int(round(n))
        if steps < 1 or abs(n - steps) > 1e-9 * max(1.0, n):
            raise ConfigError(f"time {t_end} is not a whole number of steps of {self.config.dt}")
        return steps

    def _step(self, u):
        STEP_SOLVES.forward += 1
        out = self._step_lu.solve(np.ascontiguousarray(u))
        if not np.all(np.isfinite(out)):
            raise NumericalError("implicit Euler step produced non-finite values")
        return out

    def _step_adjoint(self, p):
        STEP_SOLVES.adjoint += 1
        out = self._step_lu.solve(np.ascontiguousarray(p), trans="T")
        if not np.all(np.isfinite(out)):
            raise NumericalError("adjoint step produced non-finite values")
        return out

    def solve_forward(self, m, t_end):
        """Concentration at ``t_end`` from initial condition(s) ``m`` (vector or columns)."""
        u = np.array(m, dtype=float)
        if u.shape[0] != self.grid.d_m:
            raise DimensionMismatch("initial condition size differs from the grid")
        for _ in range(self.steps_to(t_end)):
            u = self._step(u)
        return u

    def solve_adjoint(self, terminal, t_end):
        """Apply the transpose of :meth:`solve_forward` to ``terminal``."""
        p = np.array(terminal, dtype=float)
        if p.shape[0] != self.grid.d_m:
            raise DimensionMismatch("terminal field size differs from the grid")
        for _ in range(self.steps_to(t_end)):
            p = self._step_adjoint(p)
        return p

    def _observation_steps(self):
        times = self.config.observation_times or (self.config.final_time,)
        return sorted({self.steps_to(t) for t in times})

    # operators -------------------------------------------------------------

    @staticmethod
    def observe(field, layout: SensorLayout):
        return layout.weights @ np.asarray(field, dtype=float)

    @staticmethod
    def observe_adjoint(data, layout: SensorLayout):
        return layout.weights.T @ np.asarray(data, dtype=float)

    def forward_operator(self, layout: SensorLayout) -> LinearOperatorHandle:
        """``F_d``: initial condition to sensor data at the observation time(s).

        With several observation times the data vector is time-major.
        """
        steps = self._observation_steps()
        n_obs, d = len(steps), layout.d

        def apply(m):
            u = np.array(m, dtype=float)
            out = []
            for s in range(1, steps[-1] + 1):
                u = self._step(u)
                if s in steps:
                    out.append(self.observe(u, layout))
            return np.concatenate(out, axis=0)

        def apply_adjoint(y):
            y = np.asarray(y, dtype=float)
            blocks = {s: y[i * d:(i + 1) * d] for i, s in enumerate(steps)}
            p = np.zeros((self.grid.d_m,) + y.shape[1:])
            for s in range(steps[-1], 0, -1):
                if s in blocks:
                    p = p + self.observe_adjoint(blocks[s], layout)
                p = self._step_adjoint(p)
            return p

        return LinearOperatorHandle(apply, apply_adjoint, self.grid.d_m, n_obs * d, name="forward")

    def goal_operator(self, which="left", t_pred=None, width=0.02) -> LinearOperatorHandle:
        """Band-averaged concentration around the chosen block(s) at ``t_pred``."""
        t_pred = self.config.prediction_time if t_pred is None else t_pred
        nodes = band_nodes(self.grid, which, width)
        w = np.zeros(self.grid.d_m)
        w[nodes] = 1.0 / nodes.size

        def apply(m):
            return np.atleast_1d(w @ self.solve_forward(m, t_pred))[None, ...].reshape((1,) + np.shape(m)[1:])

        def apply_adjoint(s):
            s = np.asarray(s, dtype=float)
            return self.solve_adjoint(np.multiply.outer(w, s[0]), t_pred)

        return LinearOperatorHandle(apply, apply_adjoint, self.grid.d_m, 1, name=f"goal-{which}")

    def _scale(self, v, power):
        v = np.asarray(v, dtype=float)
        s = self.grid.areas ** power
        return (s.reshape((-1,) + (1,) * (v.ndim - 1))) * v

    def _prior_solve(self, v):
        return self._prior_lu.solve(np.ascontiguousarray(v, dtype=float))

    def prior_factor_apply(self, v):
        """``K^{-1} M^{1/2} v``; its square is the covariance ``K^{-1} M K^{-1}``."""
        return self._prior_solve(self._scale(v, 0.5))

    def prior_factor_adjoint(self, v):
        return self._scale(self._prior_solve(v), 0.5)

    def prior_cov_apply(self, v):
        return self._prior_solve(self._scale(self._prior_solve(v), 1.0))

    def prior_precision_apply(self, v):
        K = self.prior_operator
        return K @ self._scale(K @ np.asarray(v, dtype=float), -1.0)

    def prior(self) -> GaussianPrior:
        return GaussianPrior(
            mean=np.full(self.grid.d_m, self.prior_config.mean),
            cov_apply=self.prior_cov_apply,
            cov_factor_apply=self.prior_factor_apply,
            precision_apply=self.prior_precision_apply,
            cov_factor_adjoint=self.prior_factor_adjoint,
        )


@dataclass
class TransportProblem:
    """A ready-to-use linear model, goal and sensor layout on one grid."""

    transport: TransportModel
    layout: SensorLayout
    model: LinearModel
    goal: GoalSetup

    @property
    def grid(self):
        return self.transport.grid


def build_problem(n=46, sensors="nine", goal="left", config: TransportConfig = TransportConfig(),
                  prior_config: PriorOperatorConfig = PriorOperatorConfig(), noise_std=0.01,
                  layout: Optional[SensorLayout] = None, grid: Optional[DomainGrid] = None,
                  width=0.02):
    """Assemble the transport experiment as a :class:`LinearModel` plus goal."""
    grid = grid or build_grid(n)
    transport = TransportModel(grid, config, prior_config)
    layout = layout or candidate_sensors(sensors, grid)
    forward = transport.forward_operator(layout)
    noise = NoiseModel.constant(forward.range_dim, noise_std)
    model = LinearModel(forward, transport.prior(), noise)
    goal_setup = GoalSetup.build(transport.goal_operator(goal, width=width), model.prior)
    return TransportProblem(transport, layout, model, goal_setup)
