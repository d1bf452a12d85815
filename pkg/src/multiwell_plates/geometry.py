"""Mid-plane grids, fields with finite-difference calculus, the normal field nu,
one-dimensional profile isometries and second-fundamental-form diagnostics."""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy as sp
from scipy.integrate import simpson

from .io import atomic_write_text
from .linalg import Well

X1, X2, T = sp.symbols("x1 x2 t", real=True)
_SYMBOLS = {"x1": X1, "x2": X2, "t": T, "pi": sp.pi, "e": sp.E}


class MetricConstraintError(ValueError):
    def __init__(self, residual: float, node: tuple):
        super().__init__(f"metric constraint violated: residual {residual:.3e} at node {node}")
        self.residual = residual
        self.node = node


class SlopeBoundError(ValueError):
    pass


def parse_expr(text) -> sp.Expr:
    """Parse a scalar expression in x1, x2 (or t for profiles)."""
    if isinstance(text, sp.Expr):
        return text
    if isinstance(text, (int, float)):
        return sp.Float(text) if isinstance(text, float) else sp.Integer(text)
    try:
        expr = sp.parse_expr(str(text), local_dict=dict(_SYMBOLS), evaluate=True)
    except (SyntaxError, TypeError, sp.SympifyError) as exc:
        raise ValueError(f"cannot parse expression {text!r}: {exc}") from exc
    unknown = expr.free_symbols - {X1, X2, T}
    if unknown:
        raise ValueError(f"expression {text!r} uses unknown symbols {sorted(map(str, unknown))}")
    return expr


@dataclass(frozen=True)
class MidplaneGrid:
    """Tensor grid on a rectangle; arrays are indexed [i1, i2] (ij ordering)."""

    x1_bounds: tuple = (-0.5, 0.5)
    x2_bounds: tuple = (-0.5, 0.5)
    n1: int = 101
    n2: int = 101
    mask: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.n1 < 5 or self.n2 < 5:
            raise ValueError("grids need at least 5 nodes per axis")
        if not (self.x1_bounds[1] > self.x1_bounds[0] and self.x2_bounds[1] > self.x2_bounds[0]):
            raise ValueError("grid bounds must have positive length")
        object.__setattr__(self, "x1_bounds", tuple(float(b) for b in self.x1_bounds))
        object.__setattr__(self, "x2_bounds", tuple(float(b) for b in self.x2_bounds))
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != self.shape:
                raise ValueError("mask shape does not match the grid")
            object.__setattr__(self, "mask", m)

    @classmethod
    def square(cls, n: int, half: float = 0.5) -> "MidplaneGrid":
        return cls((-half, half), (-half, half), n, n)

    @property
    def shape(self) -> tuple:
        return (self.n1, self.n2)

    @property
    def x1(self) -> np.ndarray:
        return np.linspace(*self.x1_bounds, self.n1)

    @property
    def x2(self) -> np.ndarray:
        return np.linspace(*self.x2_bounds, self.n2)

    @property
    def spacing(self) -> tuple:
        return (
            (self.x1_bounds[1] - self.x1_bounds[0]) / (self.n1 - 1),
            (self.x2_bounds[1] - self.x2_bounds[0]) / (self.n2 - 1),
        )

    @property
    def area(self) -> float:
        return (self.x1_bounds[1] - self.x1_bounds[0]) * (self.x2_bounds[1] - self.x2_bounds[0])

    @functools.cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (n1, n2, 2)."""
        X, Y = np.meshgrid(self.x1, self.x2, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def weights(self, rule: str = "trapezoid") -> np.ndarray:
        """Tensor quadrature weights; Simpson needs odd node counts."""
        if rule == "trapezoid":
            w1 = np.full(self.n1, self.spacing[0])
            w1[[0, -1]] *= 0.5
            w2 = np.full(self.n2, self.spacing[1])
            w2[[0, -1]] *= 0.5
        elif rule == "simpson":
            w1 = simpson(np.eye(self.n1), x=self.x1, axis=1)
            w2 = simpson(np.eye(self.n2), x=self.x2, axis=1)
        else:
            raise ValueError(f"unknown quadrature rule {rule!r}")
        w = np.outer(w1, w2)
        if self.mask is not None:
            w = w * self.mask
        return w

    def integrate(self, values, rule: str = "trapezoid") -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return np.tensordot(self.weights(rule), values, axes=([0, 1], [0, 1]))

    def gradient(self, values: np.ndarray) -> np.ndarray:
        """Second-order differences (central inside, one-sided at edges); new trailing axis."""
        dx1, dx2 = self.spacing
        g1 = np.gradient(values, dx1, axis=0, edge_order=2)
        g2 = np.gradient(values, dx2, axis=1, edge_order=2)
        return np.stack([g1, g2], axis=-1)

    def interior(self, width: int = 1) -> tuple:
        return (slice(width, self.n1 - width), slice(width, self.n2 - width))


Jet = Callable[[int], "np.ndarray | None"]


class Field:
    """Node values on a grid, shape (n1, n2, *components).

    A field may carry a jet: a callable returning exact derivative tensors of a
    given order (derivative axes appended last). Without one, derivatives come
    from the grid stencils.
    """

    def __init__(self, grid: MidplaneGrid, values, jet: Jet | None = None):
        values = np.asarray(values, dtype=float)
        if values.shape[:2] != grid.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field has non-finite values")
        values.setflags(write=False)
        self.grid = grid
        self.values = values
        self._jet = jet

    @property
    def components(self) -> tuple:
        return self.values.shape[2:]

    @property
    def rank(self) -> str:
        c = self.components
        return {(): "scalar", (2,): "vector2", (3,): "vector3"}.get(c, "matrix" if len(c) == 2 else "tensor")

    @property
    def exact(self) -> bool:
        return self._jet is not None

    def derivative(self, order: int) -> np.ndarray:
        if order == 0:
            return self.values
        if self._jet is not None:
            d = self._jet(order)
            if d is not None:
                return d
        return self.grad().derivative(order - 1)

    def grad(self) -> "Field":
        if self._jet is not None:
            d = self._jet(1)
            if d is not None:
                jet = self._jet
                return Field(self.grid, d, lambda k: jet(k + 1))
        return Field(self.grid, self.grid.gradient(self.values))

    def hess(self) -> "Field":
        return self.grad().grad()

    def scaled(self, t: float) -> "Field":
        jet = self._jet
        new = None if jet is None else (lambda k: None if jet(k) is None else t * jet(k))
        return Field(self.grid, t * self.values, new)

    def with_values_only(self) -> "Field":
        """Drop the exact jet so derivatives fall back to the stencils."""
        return Field(self.grid, self.values)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, grid: MidplaneGrid, components: tuple = ()) -> "Field":
        z = np.zeros(grid.shape + tuple(components))
        return cls(grid, z, lambda k: np.zeros(grid.shape + tuple(components) + (2,) * k))

    @classmethod
    def from_expr(cls, grid: MidplaneGrid, exprs) -> "Field":
        """Field from expressions in x1, x2 (a string or nested lists of them).

        Derivatives of any order are exact (symbolic differentiation).
        """
        arr = np.array(exprs, dtype=object)
        shape = arr.shape
        flat = [parse_expr(e) for e in arr.reshape(-1)]
        X, Y = grid.coords[..., 0], grid.coords[..., 1]

        def evaluate(e):
            f = sp.lambdify((X1, X2), e, "numpy")
            return np.broadcast_to(np.asarray(f(X, Y), dtype=float), grid.shape)

        @functools.lru_cache(maxsize=None)
        def jet(k: int):
            out = np.empty(grid.shape + (len(flat),) + (2,) * k)
            for c, e in enumerate(flat):
                for idx in itertools.product((0, 1), repeat=k):
                    d = sp.diff(e, *[(X1, X2)[i] for i in idx]) if k else e
                    out[(slice(None), slice(None), c) + idx] = evaluate(d)
            out = out.reshape(grid.shape + shape + (2,) * k)
            out.setflags(write=False)
            return out

        return cls(grid, jet(0), jet)

    # -- serialization ------------------------------------------------------------
    def to_csv(self, path, names: list | None = None) -> None:
        comp = int(np.prod(self.components)) if self.components else 1
        data = self.values.reshape(self.grid.n1 * self.grid.n2, comp)
        if names is None:
            names = ["value"] if comp == 1 else [f"c{k + 1}" for k in range(comp)]
        xy = self.grid.coords.reshape(-1, 2)
        header = ",".join(["x1", "x2"] + list(names))
        lines = [header] + [",".join(repr(float(v)) for v in row) for row in np.hstack([xy, data])]
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, grid: MidplaneGrid, components: tuple = ()) -> "Field":
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if raw.shape[0] != grid.n1 * grid.n2:
            raise ValueError(f"{path}: expected {grid.n1 * grid.n2} rows, found {raw.shape[0]}")
        if not np.allclose(raw[:, :2], grid.coords.reshape(-1, 2), atol=1e-9):
            raise ValueError(f"{path}: node coordinates do not match the grid")
        return cls(grid, raw[:, 2:].reshape(grid.shape + tuple(components)))


# -- the normal field ------------------------------------------------------------


def _normal_constants(U: np.ndarray):
    Ui = np.linalg.inv(U)
    c2 = float(Ui[:, 2] @ Ui[:, 2])
    det = float(np.linalg.det(Ui))
    m = np.array([Ui[:, 0] @ Ui[:, 2], Ui[:, 1] @ Ui[:, 2]])
    return c2, det, m


def metric_residual(dy: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Node-wise max-entry residual of dy^T dy - (U^2)'."""
    G = np.einsum("...ka,...kb->...ab", dy, dy)
    target = (U @ U)[:2, :2]
    return np.max(np.abs(G - target), axis=(-2, -1))


def nu_from_gradient(dy: np.ndarray, U: np.ndarray) -> np.ndarray:
    c2, det, m = _normal_constants(U)
    y1, y2 = dy[..., :, 0], dy[..., :, 1]
    return (det * np.cross(y1, y2) - m[0] * y1 - m[1] * y2) / c2


def nu_first_derivative(dy: np.ndarray, d2y: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Exact gradient of nu from the first two derivatives of y; shape (..., 3, 2)."""
    c2, det, m = _normal_constants(U)
    y1, y2 = dy[..., :, 0], dy[..., :, 1]
    out = []
    for i in range(2):
        y1i, y2i = d2y[..., :, 0, i], d2y[..., :, 1, i]
        out.append((det * (np.cross(y1i, y2) + np.cross(y1, y2i)) - m[0] * y1i - m[1] * y2i) / c2)
    return np.stack(out, axis=-1)


def nu_second_derivative(dy, d2y, d3y, U) -> np.ndarray:
    c2, det, m = _normal_constants(U)
    y1, y2 = dy[..., :, 0], dy[..., :, 1]
    out = np.empty(dy.shape[:-1] + (2, 2))
    for i in range(2):
        for j in range(2):
            a = np.cross(d3y[..., :, 0, i, j], y2) + np.cross(d2y[..., :, 0, i], d2y[..., :, 1, j])
            a += np.cross(d2y[..., :, 0, j], d2y[..., :, 1, i]) + np.cross(y1, d3y[..., :, 1, i, j])
            out[..., i, j] = (det * a - m[0] * d3y[..., :, 0, i, j] - m[1] * d3y[..., :, 1, i, j]) / c2
    return out


def normal_vector_nu(grad_y: Field, U, tol: float = 1e-6) -> Field:
    """The field nu with (grad y, nu) U^{-1} a rotation at every node.

    Raises MetricConstraintError when grad y^T grad y departs from (U^2)' by more
    than ``tol`` somewhere.
    """
    U = U.U if isinstance(U, Well) else np.asarray(U, dtype=float)
    dy = grad_y.values
    res = metric_residual(dy, U)
    worst = np.unravel_index(int(np.argmax(res)), res.shape)
    if res[worst] > tol:
        raise MetricConstraintError(float(res[worst]), tuple(int(i) for i in worst))
    nu = nu_from_gradient(dy, U)
    if not grad_y.exact:
        return Field(grad_y.grid, nu)

    def jet(k):
        if k == 1:
            d2 = grad_y._jet(1)
            return None if d2 is None else nu_first_derivative(dy, d2, U)
        if k == 2:
            d2, d3 = grad_y._jet(1), grad_y._jet(2)
            if d2 is None or d3 is None:
                return None
            return nu_second_derivative(dy, d2, d3, U)
        return None

    return Field(grad_y.grid, nu, functools.lru_cache(maxsize=None)(jet))


def frame_residual(dy: np.ndarray, nu: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Node-wise max-entry residual of (grad y, nu)^T (grad y, nu) - U^2."""
    F = np.concatenate([dy, nu[..., None]], axis=-1)
    G = np.einsum("...ka,...kb->...ab", F, F)
    return np.max(np.abs(G - U @ U), axis=(-2, -1))


# -- one-dimensional profile isometries -------------------------------------------


def cylinder_profile(r: float) -> sp.Expr:
    """Height profile r(cos(t/r) - 1) of a cylinder of radius r over arc length t."""
    return r * (sp.cos(T / r) - 1)


def sqrt_in_plane_metric(U: np.ndarray) -> np.ndarray:
    """A = sqrt((U^2)'), the symmetric root of the in-plane metric."""
    G = (U @ U)[:2, :2]
    lam, V = np.linalg.eigh(G)
    return V @ np.diag(np.sqrt(lam)) @ V.T


def profile_field(g, n, U, grid: MidplaneGrid) -> Field:
    """v(x) = g(n . A x) with exact jets; no slope check."""
    U = U.U if isinstance(U, Well) else np.asarray(U, dtype=float)
    k = sqrt_in_plane_metric(U) @ np.asarray(n, dtype=float)
    return Field.from_expr(grid, parse_expr(g).subs(T, float(k[0]) * X1 + float(k[1]) * X2))


@dataclass
class ProfileIsometry:
    """Isometric immersion y = v U^{-1} e3 + U (phi, 0) for a profile v = amp * g(n . A x).

    ``n`` is a unit vector of the Euclidean frame xi = A x. Arc length is
    integrated exactly in the profile variable, so all x-derivatives of y are
    closed-form; the y values use Gauss-Legendre quadrature of the arc-length
    defect.
    """

    g: sp.Expr
    n: np.ndarray
    well: Well
    grid: MidplaneGrid
    amplitude: float = 1.0
    y: Field = field(init=False)
    v: Field = field(init=False)
    nu: Field = field(init=False)
    slope: float = field(init=False)

    def __post_init__(self):
        self.g = parse_expr(self.g)
        n = np.asarray(self.n, dtype=float)
        if n.shape != (2,) or abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("profile direction must be a unit 2-vector")
        self.n = n
        U = self.well.U
        Ui = self.well.inv
        A = sqrt_in_plane_metric(U)
        k = A @ n  # gradient of s = n . A x
        mvec = np.linalg.solve(A, n)  # A^{-1} n
        c = float(np.linalg.norm(Ui[:, 2]))
        amp = float(self.amplitude)

        gd = [sp.diff(self.g, T, i) for i in range(6)]
        gf = [sp.lambdify(T, amp * e, "numpy") for e in gd]
        G1 = c * amp * gd[1]
        psi = [None, sp.sqrt(1 - G1**2) - 1]
        for _ in range(3):
            psi.append(sp.diff(psi[-1], T))
        psif = [None] + [sp.lambdify(T, e, "numpy") for e in psi[1:]]

        def ev(f, s):
            return np.broadcast_to(np.asarray(f(s), dtype=float), np.shape(s)).copy()

        corners = np.array([[a, b] for a in self.grid.x1_bounds for b in self.grid.x2_bounds])
        s_lo, s_hi = (corners @ k).min(), (corners @ k).max()
        s_probe = np.linspace(s_lo, s_hi, 4001)
        self.slope = float(np.max(np.abs(c * ev(gf[1], s_probe))))
        if not self.slope < 1.0:
            raise SlopeBoundError(
                f"profile slope bound violated: |U^-1 e3| sup|grad v A^-1| = {self.slope:.6g} >= 1"
            )

        X = self.grid.coords
        s = X @ k
        nodes, wts = np.polynomial.legendre.leggauss(24)
        tq = 0.5 * (nodes + 1.0)
        Psi = 0.5 * s * np.tensordot(ev(psif[1], s[..., None] * tq), wts, axes=([-1], [0]))
        n3 = Ui[:, 2]
        U12 = U[:, :2]
        phi = X + Psi[..., None] * mvec
        vals_v = ev(gf[0], s)
        y_vals = vals_v[..., None] * n3 + phi @ U12.T

        def outer_k(order):
            out = np.ones(())
            for _ in range(order):
                out = np.multiply.outer(out, k)
            return out

        def lift(values, order):
            return values.reshape(values.shape + (1,) * order)

        @functools.lru_cache(maxsize=None)
        def v_jet(order):
            if order >= len(gf):
                return None
            return lift(ev(gf[order], s), order) * outer_k(order)

        @functools.lru_cache(maxsize=None)
        def y_jet(order):
            if order >= len(psif) or order >= len(gf):
                return None
            dphi = lift(ev(psif[order], s), order + 1) * np.multiply.outer(mvec, outer_k(order))
            if order == 1:
                dphi = dphi + np.eye(2)
            return np.einsum("a,ij...->ija...", n3, v_jet(order)) + np.einsum("ab,ijb...->ija...", U12, dphi)

        self.v = Field(self.grid, vals_v, v_jet)
        self.y = Field(self.grid, y_vals, y_jet)
        self.nu = normal_vector_nu(self.y.grad(), U)
        self._A = A

    @property
    def strong_bound(self) -> bool:
        """Whether the sharper slope threshold 1/2 holds (reported only)."""
        return self.slope < 0.5

    def metric_residual(self) -> float:
        return float(np.max(metric_residual(self.y.grad().values, self.well.U)))


def isometry_lift_profile(g, n, U, grid: MidplaneGrid, amplitude: float = 1.0) -> ProfileIsometry:
    well = U if isinstance(U, Well) else Well(np.asarray(U, dtype=float))
    return ProfileIsometry(g, np.asarray(n, dtype=float), well, grid, amplitude)


# -- second fundamental form ----------------------------------------------------


def second_form(y: Field, U) -> np.ndarray:
    """grad y^T grad nu at every node, shape (n1, n2, 2, 2)."""
    U = U.U if isinstance(U, Well) else np.asarray(U, dtype=float)
    dy = y.grad()
    nu = normal_vector_nu(dy, U)
    return np.einsum("...ka,...kb->...ab", dy.values, nu.grad().values)


@dataclass
class DefectTable:
    eps: list
    defect: list
    slope: float | None
    flagged: bool

    def rows(self):
        return list(zip(self.eps, self.defect))


def second_form_defect(family, v: Field, U) -> DefectTable:
    """max-node |grad y_eps^T grad nu_eps + eps grad^2 v| over a list of (eps, y_eps)."""
    d2v = v.hess().values
    eps_list, defects = [], []
    for eps, y in family:
        if isinstance(y, ProfileIsometry):
            y = y.y
        II = second_form(y, U)
        r = II + eps * d2v
        defects.append(float(np.max(np.sqrt(np.einsum("...ab,...ab->...", r, r)))))
        eps_list.append(float(eps))
    slope = None
    flagged = len(eps_list) < 2
    if not flagged:
        d = np.asarray(defects)
        if np.all(d > 0):
            slope = float(np.polyfit(np.log(eps_list), np.log(d), 1)[0])
        else:
            flagged = True
    return DefectTable(eps_list, defects, slope, flagged)
