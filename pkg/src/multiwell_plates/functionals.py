"""Limit plate functionals, the compatibility constraint and dead-load work."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Field, MidplaneGrid, normal_vector_nu, metric_residual
from .linalg import Well
from .relaxed import RelaxedForm, relaxed_q

MONOMIALS = {"1": (0, 0), "x1": (1, 0), "x2": (0, 1), "x1^2": (2, 0), "x1*x2": (1, 1), "x2^2": (0, 2)}
CVK_TOL = 1e-6
MEAN_TOL = 1e-10


class ConstraintError(ValueError):
    def __init__(self, residual: float):
        super().__init__(f"compatibility constraint violated (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class PlateState:
    """Displacements (u, v) or a full mid-plane deformation y on one grid, for well j.

    ``profile`` optionally records (g, n) when v comes from a one-dimensional
    profile, which is what makes the constrained regime constructible.
    """

    j: int
    u: Field | None = None
    v: Field | None = None
    y: Field | None = None
    profile: tuple | None = None

    def __post_init__(self):
        grids = [f.grid for f in (self.u, self.v, self.y) if f is not None]
        if any(g != grids[0] for g in grids[1:]):
            raise ValueError("all fields of a plate state must share one grid")
        if self.u is not None and self.u.components != (2,):
            raise ValueError("u must be a 2-vector field")
        if self.v is not None and self.v.components != ():
            raise ValueError("v must be a scalar field")
        if self.y is not None and self.y.components != (3,):
            raise ValueError("y must be a 3-vector field")

    @property
    def grid(self) -> MidplaneGrid:
        for f in (self.v, self.u, self.y):
            if f is not None:
                return f.grid
        raise ValueError("plate state has no fields")

    @classmethod
    def zero(cls, grid: MidplaneGrid, j: int = 0) -> "PlateState":
        return cls(j, Field.zeros(grid, (2,)), Field.zeros(grid))

    @classmethod
    def from_expr(cls, grid: MidplaneGrid, j: int, u=("0", "0"), v="0") -> "PlateState":
        return cls(j, Field.from_expr(grid, list(u)), Field.from_expr(grid, v))

    def to_csv(self, path) -> None:
        cols, names = [], []
        if self.u is not None:
            cols.append(self.u.values.reshape(-1, 2))
            names += ["u1", "u2"]
        if self.v is not None:
            cols.append(self.v.values.reshape(-1, 1))
            names += ["v"]
        if self.y is not None:
            cols.append(self.y.values.reshape(-1, 3))
            names += ["y1", "y2", "y3"]
        data = np.hstack(cols).reshape(self.grid.shape + (len(names),))
        Field(self.grid, data).to_csv(path, names)

    @classmethod
    def from_csv(cls, path, grid: MidplaneGrid, j: int) -> "PlateState":
        with open(path) as fh:
            names = fh.readline().strip().split(",")[2:]
        raw = Field.from_csv(path, grid, (len(names),)).values
        col = {n: raw[..., k] for k, n in enumerate(names)}
        u = Field(grid, np.stack([col["u1"], col["u2"]], -1)) if "u1" in col else None
        v = Field(grid, col["v"]) if "v" in col else None
        y = Field(grid, np.stack([col["y1"], col["y2"], col["y3"]], -1)) if "y1" in col else None
        return cls(j, u, v, y)


@dataclass(frozen=True)
class LoadField:
    """Dead load f on the mid-plane; ``poly`` keeps monomial coefficients when known."""

    f: Field
    poly: tuple | None = None

    def __post_init__(self):
        if self.f.components != (3,):
            raise ValueError("a load must be a 3-vector field")

    @property
    def grid(self) -> MidplaneGrid:
        return self.f.grid

    @property
    def total(self) -> np.ndarray:
        if self.poly is not None:
            return np.array([_poly_integral(c, self.grid, (0, 0)) for c in self.poly])
        rule = "simpson" if self.grid.n1 % 2 and self.grid.n2 % 2 else "trapezoid"
        return self.grid.integrate(self.f.values, rule)

    @property
    def mean_zero(self) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.f.values))))
        return bool(np.max(np.abs(self.total)) <= MEAN_TOL * scale)

    @classmethod
    def from_polynomial(cls, grid: MidplaneGrid, coeffs, scale: float = 1.0) -> "LoadField":
        """coeffs: three dicts mapping monomials ('1','x1','x2','x1^2','x1*x2','x2^2') to numbers."""
        if len(coeffs) != 3:
            raise ValueError("a polynomial load needs three components")
        poly, exprs = [], []
        for comp in coeffs:
            comp = dict(comp or {})
            bad = set(comp) - set(MONOMIALS)
            if bad:
                raise ValueError(f"unknown load monomials {sorted(bad)}")
            c = {MONOMIALS[k]: scale * float(val) for k, val in comp.items()}
            poly.append(c)
            exprs.append(" + ".join(f"({v!r})*x1**{a}*x2**{b}" for (a, b), v in c.items()) or "0")
        return cls(Field.from_expr(grid, exprs), tuple(poly))

    @classmethod
    def zero(cls, grid: MidplaneGrid) -> "LoadField":
        return cls.from_polynomial(grid, [{}, {}, {}])

    def to_csv(self, path) -> None:
        self.f.to_csv(path, ["f1", "f2", "f3"])

    @classmethod
    def from_csv(cls, path, grid: MidplaneGrid) -> "LoadField":
        return cls(Field.from_csv(path, grid, (3,)))


def _poly_integral(coeffs: dict, grid: MidplaneGrid, extra: tuple) -> float:
    """Exact integral over the grid rectangle of a polynomial times x1^extra0 x2^extra1."""
    (a0, a1), (b0, b1) = grid.x1_bounds, grid.x2_bounds
    total = 0.0
    for (p, q), c in coeffs.items():
        p1, q1 = p + extra[0] + 1, q + extra[1] + 1
        total += c * (a1**p1 - a0**p1) / p1 * (b1**q1 - b0**q1) / q1
    return total


def _sym2(D):
    return 0.5 * (D + np.swapaxes(D, -1, -2))


def _bending_density(v: Field, form: RelaxedForm) -> np.ndarray:
    return relaxed_q(form, _sym2(v.hess().values))


def _membrane_strain(u: Field, v: Field | None, c2: float) -> np.ndarray:
    du = u.grad().values
    strain = du + np.swapaxes(du, -1, -2)
    if v is not None and c2:
        dv = v.grad().values
        strain = strain + c2 * dv[..., :, None] * dv[..., None, :]
    return strain


def _c2(form: RelaxedForm) -> float:
    return float(np.linalg.norm(np.linalg.inv(form.U)[:, 2]) ** 2)


def _require(state: PlateState, *names):
    for n in names:
        if getattr(state, n) is None:
            raise ValueError(f"plate state is missing the field {n!r}")


def energy_kl(state: PlateState, form: RelaxedForm, rule: str = "trapezoid") -> float:
    """(1/24) * integral of Qbar(grad y^T grad nu)."""
    if state.y is None:
        raise ValueError("the bending functional needs a full deformation y")
    dy = state.y.grad()
    nu = normal_vector_nu(dy, form.U)
    II = np.einsum("...ka,...kb->...ab", dy.values, nu.grad().values)
    return float(state.grid.integrate(relaxed_q(form, _sym2(II)), rule)) / 24.0


def energy_cvk(state: PlateState, form: RelaxedForm, rule: str = "trapezoid") -> float:
    _require(state, "v")
    if state.u is None:
        if state.profile is None:
            raise ConstraintError(float("inf"))
    else:
        res = constraint_residual(state, form)
        if res >= CVK_TOL:
            raise ConstraintError(res)
    return float(state.grid.integrate(_bending_density(state.v, form), rule)) / 24.0


def energy_vk(state: PlateState, form: RelaxedForm, rule: str = "trapezoid") -> float:
    _require(state, "u", "v")
    bend = state.grid.integrate(_bending_density(state.v, form), rule) / 24.0
    strain = _membrane_strain(state.u, state.v, _c2(form))
    return float(bend + state.grid.integrate(relaxed_q(form, strain), rule) / 8.0)


def energy_lvk(state: PlateState, form: RelaxedForm, rule: str = "trapezoid") -> float:
    _require(state, "u", "v")
    bend = state.grid.integrate(_bending_density(state.v, form), rule) / 24.0
    strain = _membrane_strain(state.u, None, 0.0)
    return float(bend + state.grid.integrate(relaxed_q(form, strain), rule) / 8.0)


def membrane_energy(state: PlateState, form: RelaxedForm, rule: str = "trapezoid") -> float:
    strain = _membrane_strain(state.u, state.v, _c2(form))
    return float(state.grid.integrate(relaxed_q(form, strain), rule)) / 8.0


def constraint_residual(state: PlateState, form_or_well) -> float:
    """max-node Frobenius norm of grad u^T + grad u + |U^{-1} e3|^2 grad v (x) grad v."""
    _require(state, "u", "v")
    if isinstance(form_or_well, RelaxedForm):
        c2 = _c2(form_or_well)
    else:
        U = form_or_well.U if isinstance(form_or_well, Well) else np.asarray(form_or_well, float)
        c2 = float(np.linalg.norm(np.linalg.inv(U)[:, 2]) ** 2)
    s = _membrane_strain(state.u, state.v, c2)
    return float(np.max(np.sqrt(np.einsum("...ab,...ab->...", s, s))))


def force_work(state: PlateState, load: LoadField, R, U, rule: str = "trapezoid") -> float:
    """Integral of f . (R U^{-1} e3) v."""
    _require(state, "v")
    if not load.mean_zero:
        raise ValueError("dead loads must have zero resultant")
    U = U.U if isinstance(U, Well) else np.asarray(U, float)
    direction = np.asarray(R, float) @ np.linalg.inv(U)[:, 2]
    return float(state.grid.integrate((load.f.values @ direction) * state.v.values, rule))


def kirchhoff_metric_ok(state: PlateState, U, tol: float = 1e-6) -> bool:
    U = U.U if isinstance(U, Well) else np.asarray(U, float)
    return bool(np.max(metric_residual(state.y.grad().values, U)) < tol)


def functional_record(name: str, j: int, value: float, grid: MidplaneGrid) -> dict:
    return {"functional": name, "well": j, "value": value, "grid": [grid.n1, grid.n2]}


__all__ = [
    "PlateState", "LoadField", "ConstraintError", "energy_kl", "energy_cvk", "energy_vk",
    "energy_lvk", "membrane_energy", "constraint_residual", "force_work", "functional_record",
]
