"""Dead-load work on rotated wells: optimal rotations, winning wells, the
tangent structure of the maximizer sets and projection onto them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .functionals import LoadField, PlateState, _poly_integral, energy_cvk, energy_lvk, energy_vk, force_work
from .linalg import Well, exp_skew, hat, log_rotation, procrustes_max, skw, sym, vee
from .relaxed import RelaxedForm

TIE_TOL = 1e-9
NULL_TOL = 1e-9
LOCALITY = np.pi / 4
N_STARTS = 9


class ProjectionError(ValueError):
    """The rotation lies outside the neighborhood where the projection is trusted."""


class AdmissibilityError(ValueError):
    pass


def _as_well(U) -> Well:
    return U if isinstance(U, Well) else Well(np.asarray(U, dtype=float))


@dataclass(frozen=True)
class MomentMatrix:
    """M with F(R U) = trace(R^T M) for a load and one well."""

    M: np.ndarray
    well: Well
    load: LoadField
    j: int = 0

    def value(self, R) -> float:
        return float(np.trace(np.asarray(R, dtype=float).T @ self.M))

    def linear(self, A) -> float:
        """F(A U) for any 3x3 A (linear in A)."""
        return float(np.tensordot(np.asarray(A, dtype=float), self.M))

    def direct(self, R, rule: str | None = None) -> float:
        """F(R U) by quadrature of f . R U (x', 0) on the load's grid."""
        grid = self.load.grid
        if rule is None:
            rule = "simpson" if grid.n1 % 2 and grid.n2 % 2 else "trapezoid"
        X = np.zeros(grid.shape + (3,))
        X[..., :2] = grid.coords
        disp = X @ (np.asarray(R, dtype=float) @ self.well.U).T
        return float(grid.integrate(np.einsum("...a,...a->...", self.load.f.values, disp), rule))


def moment_matrix(load: LoadField, U, j: int = 0) -> MomentMatrix:
    """M = integral of f (x) U (x', 0); exact for polynomial loads."""
    if not load.mean_zero:
        raise ValueError("dead loads must have zero resultant")
    well = _as_well(U)
    G = np.zeros((3, 3))
    if load.poly is not None:
        for a, coeffs in enumerate(load.poly):
            G[a, 0] = _poly_integral(coeffs, load.grid, (1, 0))
            G[a, 1] = _poly_integral(coeffs, load.grid, (0, 1))
    else:
        grid = load.grid
        rule = "simpson" if grid.n1 % 2 and grid.n2 % 2 else "trapezoid"
        for b in range(2):
            G[:, b] = grid.integrate(load.f.values * grid.coords[..., b : b + 1], rule)
    return MomentMatrix(G @ well.U, well, load, j)


@dataclass(frozen=True)
class RotationSet:
    """Maximizers of R -> F(R U_j): one representative plus tangent and normal axes.

    ``N`` is the symmetric matrix of w -> F(R*[w]x^2 U_j); the set near R* is
    R* exp(span of the null vectors of N).
    """

    j: int
    value: float
    R: np.ndarray
    N: np.ndarray
    moment: MomentMatrix
    tangent: np.ndarray
    normal: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.tangent.shape[0])

    def first_order_residual(self) -> float:
        """max over unit axes of |F(R* [w]x U)|."""
        B = self.R.T @ self.moment.M
        return float(np.max(np.abs(vee(skw(B))))) * 2.0

    def second_order_max(self) -> float:
        return float(np.max(np.linalg.eigvalsh(self.N)))

    def point(self, t) -> np.ndarray:
        """R* exp(sum t_i [tau_i]x) for tangent coordinates t."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.dimension == 0:
            return self.R.copy()
        return self.R @ exp_skew(t @ self.tangent)

    def fluctuation(self, w) -> float:
        """F(R* [w]x^2 U_j) = w . N w."""
        w = np.asarray(w, dtype=float)
        return float(w @ self.N @ w)

    def contains(self, R, tol: float = 1e-8) -> bool:
        R = np.asarray(R, dtype=float)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-10 or np.linalg.det(R) <= 0:
            return False
        return abs(self.moment.value(R) - self.value) <= tol * max(1.0, abs(self.value))

    def to_dict(self) -> dict:
        return {
            "well": self.j,
            "value": self.value,
            "dimension": self.dimension,
            "rotation": self.R.reshape(-1).tolist(),
            "tangent": self.tangent.tolist(),
        }


def rotation_set(moment: MomentMatrix) -> RotationSet:
    value, R = procrustes_max(moment.M)
    B = R.T @ moment.M
    N = sym(B) - np.trace(B) * np.eye(3)
    lam, vec = np.linalg.eigh(N)
    scale = np.linalg.norm(N)
    null = np.abs(lam) <= NULL_TOL * scale if scale > 0 else np.ones(3, dtype=bool)
    return RotationSet(moment.j, value, R, N, moment, vec[:, null].T.copy(), vec[:, ~null].T.copy())


def rotation_set_dimension(rset: RotationSet) -> int:
    return rset.dimension


@dataclass(frozen=True)
class WellMaximization:
    winners: tuple
    sets: tuple
    best: float

    @property
    def values(self) -> list:
        return [s.value for s in self.sets]

    def to_dict(self) -> dict:
        return {"winners": list(self.winners), "best": self.best, "wells": [s.to_dict() for s in self.sets]}


def maximize_over_wells(load: LoadField, wells) -> WellMaximization:
    """Optimal value per well and the set of wells attaining the overall maximum."""
    sets = tuple(rotation_set(moment_matrix(load, U, j)) for j, U in enumerate(wells))
    best = max(s.value for s in sets)
    tol = TIE_TOL * max(1.0, abs(best))
    winners = tuple(s.j for s in sets if s.value >= best - tol)
    return WellMaximization(winners, sets, best)


@dataclass(frozen=True)
class Projection:
    P: np.ndarray
    distance: float
    generator: np.ndarray  # skew W with R = P exp(W)

    @property
    def axis(self) -> np.ndarray:
        return vee(self.generator)


def project_to_set(R, rset: RotationSet, seed: int = 0) -> Projection:
    """Nearest point of the set in the geodesic distance, with R = P exp(W).

    The distance is the rotation angle of P^T R (the axial norm of the
    logarithm). Inputs farther than pi/4 from the set are refused.
    """
    R = np.asarray(R, dtype=float)
    k = rset.dimension
    if k == 3:
        P = R.copy()
    elif k == 0:
        P = rset.R.copy()
    else:
        def cost(t):
            w = log_rotation(rset.point(t).T @ R)
            return float(w @ w)

        rng = np.random.default_rng(seed)
        starts = [np.zeros(k)] + [rng.uniform(-np.pi, np.pi, k) for _ in range(N_STARTS - 1)]
        best = None
        for t0 in starts:
            res = minimize(cost, t0, method="BFGS", options={"gtol": 1e-13})
            if best is None or res.fun < best.fun:
                best = res
        # polish on the normal-equation form: the log must be orthogonal to the tangent axes
        t = best.x
        for _ in range(20):
            w = log_rotation(rset.point(t).T @ R)
            g = rset.tangent @ w
            if np.max(np.abs(g)) < 1e-14:
                break
            t = t + g
        P = rset.point(t)
    w = log_rotation(P.T @ R)
    d = float(np.linalg.norm(w))
    if d > LOCALITY:
        raise ProjectionError(f"rotation is {d:.3f} rad from the set, beyond the pi/4 neighborhood")
    return Projection(P, d, hat(w))


def normal_residual(proj: Projection, rset: RotationSet) -> float:
    """Largest component of the projection generator along the tangent axes."""
    if rset.dimension == 0:
        return 0.0
    return float(np.max(np.abs(rset.tangent @ proj.axis)))


_LIMITS = {"vk": energy_vk, "lvk": energy_lvk, "cvk": energy_cvk}


def assemble_limit_objective(state: PlateState, load: LoadField, rset: RotationSet, regime: str,
                             form: RelaxedForm, R=None, W=None, rule: str = "trapezoid") -> float:
    """Plate energy minus force work minus F(R W^2 U_j).

    ``R`` defaults to the set's representative and ``W`` (skew, normal to the
    set) to zero.
    """
    if regime not in _LIMITS:
        raise ValueError(f"regime must be one of {sorted(_LIMITS)}")
    R = rset.R if R is None else np.asarray(R, dtype=float)
    if not rset.contains(R):
        raise AdmissibilityError("rotation is not an optimal rotation for this well")
    fluct = 0.0
    if W is not None:
        W = np.asarray(W, dtype=float)
        if np.max(np.abs(W + W.T)) > 1e-12:
            raise AdmissibilityError("fluctuation generator must be skew")
        w = vee(W)
        nw = float(np.linalg.norm(w))
        if rset.dimension and nw and np.max(np.abs(rset.tangent @ w)) > 1e-8 * nw:
            raise AdmissibilityError("fluctuation generator is not normal to the set")
        fluct = rset.moment.linear(R @ W @ W)
    energy = _LIMITS[regime](state, form, rule)
    return energy - force_work(state, load, R, rset.moment.well.U, rule) - fluct
