"""Minimization of the limit total energies over discrete fields, optimal
rotations and wells."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import sympy as sp
from scipy.optimize import minimize

from .density import MultiWellModel
from .functionals import LoadField, PlateState, energy_kl
from .geometry import Field, MidplaneGrid, ProfileIsometry, SlopeBoundError, T, profile_field, sqrt_in_plane_metric
from .io import write_csv
from .linalg import Well, hat, procrustes_max
from .relaxed import RelaxedForm, build_relaxed
from .rotations import RotationSet, assemble_limit_objective, maximize_over_wells

log = logging.getLogger(__name__)

REGIMES = ("vk", "lvk", "cvk_profile", "kl_profile")
TIE_TOL = 1e-8
INFEASIBLE = 1e6


class MinimizationError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


# -- discrete operators ----------------------------------------------------------


def gradient_matrix(n: int, h: float) -> sps.csr_matrix:
    """1-D derivative with second-order central interior and one-sided edges."""
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    rows += [0, 0, 0, n - 1, n - 1, n - 1]
    cols += [0, 1, 2, n - 3, n - 2, n - 1]
    vals += [-1.5 / h, 2.0 / h, -0.5 / h, 0.5 / h, -2.0 / h, 1.5 / h]
    return sps.csr_matrix((vals, (rows, cols)), shape=(n, n))


def grid_operators(grid: MidplaneGrid) -> tuple:
    """Sparse partial derivatives acting on C-order flattened node values."""
    h1, h2 = grid.spacing
    D1 = sps.kron(gradient_matrix(grid.n1, h1), sps.identity(grid.n2), format="csr")
    D2 = sps.kron(sps.identity(grid.n1), gradient_matrix(grid.n2, h2), format="csr")
    return D1, D2


class DiscretePlate:
    """Discrete plate energy minus force work for u (2 components) and v on a grid.

    The unknown vector is [u1, u2, v] flattened; derivatives are the same
    stencils the limit functionals use, and the gradient is their exact adjoint.
    """

    def __init__(self, grid: MidplaneGrid, form: RelaxedForm, regime: str, forcing: np.ndarray,
                 rule: str = "trapezoid"):
        if regime not in ("vk", "lvk"):
            raise ValueError("discrete fields are only used for the vk and lvk regimes")
        self.grid, self.form, self.regime = grid, form, regime
        self.N = grid.n1 * grid.n2
        self.w = grid.weights(rule).reshape(-1)
        self.D = grid_operators(grid)
        self.DD = [[self.D[b] @ self.D[a] for b in range(2)] for a in range(2)]
        self.C = form.coeffs
        self.c2 = float(np.linalg.norm(np.linalg.inv(form.U)[:, 2]) ** 2) if regime == "vk" else 0.0
        self.forcing = np.asarray(forcing, dtype=float).reshape(-1)
        self.gauge = self._gauge_basis()

    def _gauge_basis(self) -> np.ndarray:
        """Orthonormal basis of the directions the energy and the work ignore."""
        x1, x2 = self.grid.coords[..., 0].reshape(-1), self.grid.coords[..., 1].reshape(-1)
        one, zero = np.ones(self.N), np.zeros(self.N)
        cols = [
            np.concatenate([one, zero, zero]),
            np.concatenate([zero, one, zero]),
            np.concatenate([-x2, x1, zero]),
            np.concatenate([zero, zero, one]),
            np.concatenate([zero, zero, x1]),
            np.concatenate([zero, zero, x2]),
        ]
        Q, _ = np.linalg.qr(np.stack(cols, axis=1))
        return Q

    def project(self, z: np.ndarray) -> np.ndarray:
        return z - self.gauge @ (self.gauge.T @ z)

    def split(self, z):
        N = self.N
        return z[:N], z[N : 2 * N], z[2 * N :]

    def value_and_grad(self, z: np.ndarray) -> tuple:
        u1, u2, v = self.split(z)
        D, C, w = self.D, self.C, self.w
        # bending
        hv = np.stack([self.DD[a][b] @ v for a in range(2) for b in range(2)], axis=-1)
        Ch = hv @ C.T
        e_bend = np.sum(w * np.einsum("ni,ni->n", hv, Ch)) / 24.0
        gv = np.zeros(self.N)
        for a in range(2):
            for b in range(2):
                gv += self.DD[a][b].T @ (w * 2.0 * Ch[:, 2 * a + b]) / 24.0
        # membrane
        du = [[D[a] @ ui for a in range(2)] for ui in (u1, u2)]
        dv = [D[a] @ v for a in range(2)]
        S = np.empty((self.N, 4))
        for i in range(2):
            for a in range(2):
                S[:, 2 * i + a] = du[i][a] + du[a][i] + self.c2 * dv[i] * dv[a]
        G = 2.0 * S @ C.T
        e_mem = np.sum(w * np.einsum("ni,ni->n", S, S @ C.T)) / 8.0
        gu = [np.zeros(self.N), np.zeros(self.N)]
        for i in range(2):
            for a in range(2):
                gu[i] += D[a].T @ (w * (G[:, 2 * i + a] + G[:, 2 * a + i])) / 8.0
        if self.c2:
            for a in range(2):
                for b in range(2):
                    wg = w * G[:, 2 * a + b] * self.c2 / 8.0
                    gv += D[a].T @ (wg * dv[b]) + D[b].T @ (wg * dv[a])
        # dead load
        e_force = np.sum(w * self.forcing * v)
        gv -= w * self.forcing
        return e_bend + e_mem - e_force, np.concatenate([gu[0], gu[1], gv])

    def gradient_norm(self, g: np.ndarray) -> float:
        """Mesh-independent (dual L2) norm of a projected gradient."""
        wr = np.tile(self.w, 3)
        return float(np.sqrt(np.sum(g * g / wr)))

    def state(self, z, j: int) -> PlateState:
        u1, u2, v = self.split(z)
        shp = self.grid.shape
        return PlateState(j, Field(self.grid, np.stack([u1.reshape(shp), u2.reshape(shp)], -1)),
                          Field(self.grid, v.reshape(shp)))


# -- descent -----------------------------------------------------------------------


@dataclass
class Settings:
    method: str = "lbfgs"  # or "gd" (Armijo backtracking)
    tol: float = 1e-6
    max_iter: int = 20000
    r_grid: int = 16
    profile_degree: int = 4
    fd_step: float = 1e-6


def _descend(fun, x0, settings: Settings, norm, project=lambda g: g):
    """Minimize fun (value, gradient) from x0; returns x, value, grad norm, trace."""
    trace = []

    def wrapped(x):
        f, g = fun(project(x))
        return f, project(g)

    f0, g0 = wrapped(x0)
    trace.append((0, f0, norm(g0)))
    if settings.method == "gd":
        x, f, g, step = project(x0), f0, g0, 1.0
        for it in range(1, settings.max_iter + 1):
            if norm(g) <= settings.tol * (1 + abs(f)):
                break
            gg = float(g @ g)
            while True:
                xn = x - step * g
                fn, gn = wrapped(xn)
                if fn <= f - 1e-4 * step * gg or step < 1e-300:
                    break
                step *= 0.5
            x, f, g, step = xn, fn, gn, step * 2.0
            trace.append((it, f, norm(g)))
        return x, f, norm(g), trace

    last = {}

    def evaluate(x):
        f, g = wrapped(x)
        last.update(x=x.copy(), f=f, g=g)
        return f, g

    def cb(intermediate_result):
        x = intermediate_result.x
        if "x" in last and np.array_equal(last["x"], x):
            f, g = last["f"], last["g"]
        else:
            f, g = wrapped(x)
        gn = norm(g)
        trace.append((len(trace), f, gn))
        if gn <= 0.1 * settings.tol * (1 + abs(f)):
            raise StopIteration

    res = minimize(evaluate, project(x0), jac=True, method="L-BFGS-B", callback=cb,
                   options={"maxiter": settings.max_iter, "maxfun": 4 * settings.max_iter,
                            "gtol": 0.0, "ftol": 1e-300, "maxcor": 30})
    x = project(res.x)
    f, g = wrapped(x)
    return x, f, norm(g), trace


# -- problems and results ------------------------------------------------------------


@dataclass
class MinimizationProblem:
    regime: str
    model: MultiWellModel
    load: LoadField
    wells: tuple | None = None  # candidate well indices; default: the winners for the load
    settings: Settings = field(default_factory=Settings)
    initial: PlateState | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if not self.load.mean_zero:
            raise ValueError("dead loads must have zero resultant")

    @property
    def grid(self) -> MidplaneGrid:
        return self.load.grid


@dataclass
class Cell:
    j: int
    index: tuple
    R: np.ndarray
    value: float
    state: PlateState
    grad_norm: float
    trace: list


@dataclass
class MinimizationResult:
    regime: str
    cells: list
    winners: tuple

    @property
    def best(self) -> Cell:
        return min(self.cells, key=lambda c: (c.value, c.j, c.index))

    @property
    def ties(self) -> list:
        b = self.best.value
        return [c for c in self.cells if c.value <= b + TIE_TOL * max(1.0, abs(b))]

    @property
    def trace(self) -> list:
        return self.best.trace

    def write_trace(self, path) -> None:
        write_csv(path, ["iteration", "value", "grad_norm"], [list(t) for t in self.trace])

    def table(self) -> list:
        return [{"well": c.j, "index": list(c.index), "value": c.value} for c in self.cells]


def rotation_grid(rset: RotationSet, n: int) -> list:
    """(index, R) pairs covering the set through its exponential parametrization."""
    k = rset.dimension
    if k == 0:
        return [((), rset.R.copy())]
    ts = np.linspace(-np.pi, np.pi, n, endpoint=False)
    return [(idx, rset.point(np.array([ts[i] for i in idx]))) for idx in itertools.product(range(n), repeat=k)]


def _winners(problem: MinimizationProblem):
    result = maximize_over_wells(problem.load, problem.model.wells)
    wells = problem.wells if problem.wells is not None else result.winners
    if not wells:
        raise ValueError("no candidate wells")
    return wells, result


def _minimize_fields(problem: MinimizationProblem, form: RelaxedForm, R: np.ndarray, j: int,
                     cache: dict) -> Cell:
    U = problem.model.wells[j].U
    d = R @ np.linalg.inv(U)[:, 2]
    forcing = problem.load.f.values @ d
    key = (j, np.round(forcing, 13).tobytes())
    if key in cache:
        c = cache[key]
        return Cell(j, (), R, c.value, c.state, c.grad_norm, c.trace)
    plate = DiscretePlate(problem.grid, form, problem.regime.replace("_profile", ""), forcing)
    s = problem.settings
    if problem.initial is not None:
        st = problem.initial
        z0 = np.concatenate([st.u.values[..., 0].ravel(), st.u.values[..., 1].ravel(), st.v.values.ravel()])
    else:
        z0 = np.zeros(3 * plate.N)
    z, f, gn, trace = _descend(plate.value_and_grad, z0, s, plate.gradient_norm, plate.project)
    if gn > s.tol * (1 + abs(f)):
        raise MinimizationError(f"no convergence for well {j}: gradient norm {gn:.3e}", trace)
    cell = Cell(j, (), R, float(f), plate.state(z, j), gn, trace)
    cache[key] = cell
    return cell


def _poly_profile(coeffs) -> sp.Expr:
    return sum(float(c) * T ** (k + 2) for k, c in enumerate(coeffs))


def _fd_grad(fun, x, step):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2 * step)
    return g


def _cvk_objective(problem, form, j, R):
    grid = problem.grid
    U = problem.model.wells[j].U
    A = sqrt_in_plane_metric(U)
    X = grid.coords
    w = grid.weights("trapezoid")
    forcing = problem.load.f.values @ (R @ np.linalg.inv(U)[:, 2])

    def fun(params):
        theta, c = params[0], params[1:]
        k = A @ np.array([np.cos(theta), np.sin(theta)])
        s = X @ k
        powers = np.arange(2, 2 + len(c))
        v = sum(ck * s**p for ck, p in zip(c, powers))
        g2 = sum(ck * p * (p - 1) * s ** (p - 2) for ck, p in zip(c, powers))
        qk = float(form(np.outer(k, k)))
        return float(np.sum(w * g2 * g2)) * qk / 24.0 - float(np.sum(w * forcing * v))

    return fun


def _kl_objective(problem, form, j):
    grid = problem.grid
    well = problem.model.wells[j]
    X = np.zeros(grid.shape + (3,))
    f = problem.load.f.values

    def build(params):
        theta, c = params[0], params[1:]
        return ProfileIsometry(_poly_profile(c), np.array([np.cos(theta), np.sin(theta)]), well, grid)

    def fun(params):
        try:
            lift = build(params)
        except SlopeBoundError:
            return INFEASIBLE
        energy = energy_kl(PlateState(j, y=lift.y), form)
        moment = grid.integrate(f[..., :, None] * lift.y.values[..., None, :], "trapezoid")
        return energy - procrustes_max(moment)[0]

    return fun, build


def _minimize_profile(problem, form, j, R, index) -> Cell:
    s = problem.settings
    x0 = np.zeros(1 + s.profile_degree - 1)
    x0[1] = 0.1  # the flat plate is a stationary point of the bending objective
    if problem.regime == "cvk_profile":
        fun = _cvk_objective(problem, form, j, R)
    else:
        fun, build = _kl_objective(problem, form, j)

    def fg(x):
        return fun(x), _fd_grad(fun, x, s.fd_step)

    x, f, gn, trace = _descend(fg, x0, s, lambda g: float(np.linalg.norm(g)))
    if gn > s.tol * (1 + abs(f)):
        raise MinimizationError(f"no convergence for well {j}: gradient norm {gn:.3e}", trace)
    theta, c = x[0], x[1:]
    n = np.array([np.cos(theta), np.sin(theta)])
    g = _poly_profile(c)
    U = problem.model.wells[j].U
    if problem.regime == "cvk_profile":
        state = PlateState(j, None, profile_field(g, n, U, problem.grid), None, (g, n))
    else:
        lift = build(x)
        state = PlateState(j, None, None, lift.y, (g, n))
        moment = problem.grid.integrate(problem.load.f.values[..., :, None] * lift.y.values[..., None, :], "trapezoid")
        R = procrustes_max(moment)[1]
    return Cell(j, index, R, float(f), state, gn, trace)


def minimize_regime(problem: MinimizationProblem) -> MinimizationResult:
    """Minimize over j, a grid of optimal rotations R for each well and the fields.

    The rotation fluctuation W is held at zero. For the bending regime the
    rigid rotation of the profile surface is optimized exactly instead of
    sampled, and every well is a candidate.
    """
    if problem.regime == "kl_profile":
        wells = problem.wells if problem.wells is not None else tuple(range(problem.model.n_wells))
        cells = [_minimize_profile(problem, build_relaxed(problem.model, j), j, None, ()) for j in wells]
        return MinimizationResult(problem.regime, cells, tuple(wells))
    wells, rot = _winners(problem)
    cells, cache = [], {}
    for j in wells:
        form = build_relaxed(problem.model, j)
        for index, R in rotation_grid(rot.sets[j], problem.settings.r_grid):
            if problem.regime == "cvk_profile":
                cell = _minimize_profile(problem, form, j, R, index)
            else:
                cell = _minimize_fields(problem, form, R, j, cache)
                cell.index = index
            cells.append(cell)
    return MinimizationResult(problem.regime, cells, tuple(wells))


@dataclass
class WellComparison:
    winners: tuple
    excluded: tuple
    rows: list
    per_well: dict
    winning_well: int

    def to_dict(self) -> dict:
        return {
            "winners": list(self.winners),
            "excluded": list(self.excluded),
            "per_well": {str(k): v for k, v in self.per_well.items()},
            "winning_well": self.winning_well,
            "rows": self.rows,
        }


def compare_wells(problem: MinimizationProblem) -> WellComparison:
    """Minimized value per (well, rotation-grid point) over the admissible wells."""
    if problem.model.n_wells < 2:
        raise ValueError("comparing wells needs at least two wells")
    result = minimize_regime(problem)
    per_well = {}
    for c in result.cells:
        per_well[c.j] = min(per_well.get(c.j, np.inf), c.value)
    excluded = tuple(j for j in range(problem.model.n_wells) if j not in result.winners)
    return WellComparison(result.winners, excluded, result.table(), per_well, result.best.j)


def fluctuation_dominance(problem: MinimizationProblem, cell: Cell, n: int = 50, betas=(0.1, 0.5),
                          seed: int = 0) -> float:
    """Smallest increase of the objective when a normal rotation fluctuation is switched on.

    Samples normal generators W with |W| = 1 (Frobenius) and evaluates the objective with beta W for
    each beta; a nonnegative return value means W = 0 was optimal on every sample.
    """
    regime = problem.regime.replace("_profile", "")
    if regime not in ("vk", "lvk", "cvk"):
        raise ValueError("fluctuations are defined for the von Karman regimes")
    rot = maximize_over_wells(problem.load, problem.model.wells)
    rset = rot.sets[cell.j]
    if rset.normal.shape[0] == 0:
        return 0.0
    form = build_relaxed(problem.model, cell.j)
    state = cell.state
    if regime == "cvk" and state.u is None:
        state = PlateState(state.j, None, state.v, None, state.profile)
    base = assemble_limit_objective(state, problem.load, rset, regime, form, R=cell.R)
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n):
        w = rng.normal(size=rset.normal.shape[0]) @ rset.normal
        w /= np.sqrt(2.0) * np.linalg.norm(w)  # unit Frobenius norm of hat(w)
        for beta in betas:
            val = assemble_limit_objective(state, problem.load, rset, regime, form, R=cell.R, W=beta * hat(w))
            worst = min(worst, val - base)
    return float(worst)
