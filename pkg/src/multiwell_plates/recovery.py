"""Recovery deformations per scaling regime, the rescaled 3-D energy and
convergence reports toward the limit functionals."""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np

from .density import MultiWellModel, density_batch
from .functionals import PlateState, energy_cvk, energy_kl, energy_lvk, energy_vk
from .geometry import Field, isometry_lift_profile, metric_residual, normal_vector_nu, profile_field
from .io import write_csv, write_json
from .relaxed import RelaxedForm, l_operator

log = logging.getLogger(__name__)

REGIMES = ("kirchhoff", "cvk", "vk", "lvk")


def regime_for(alpha: float) -> str:
    if alpha < 2:
        raise ValueError("scaling exponent must be at least 2")
    if alpha == 2:
        return "kirchhoff"
    if alpha < 4:
        return "cvk"
    return "vk" if alpha == 4 else "lvk"


@dataclass(frozen=True)
class PenaltySchedule:
    """eta(h) = h^s with s the midpoint of the admissible window (s_min, s_max)."""

    alpha: float
    p: float
    s: float
    s_min: float
    s_max: float
    p_requested: float

    @property
    def gamma(self) -> float:
        return self.alpha / 2

    @property
    def repaired(self) -> bool:
        return self.p != self.p_requested

    def eta(self, h: float) -> float:
        return h**self.s


def _window(alpha: float, p: float) -> tuple:
    gamma = alpha / 2
    return max(0.0, 1.0 - gamma * (1.0 - 2.0 / p)), alpha / 3.0


def make_schedule(alpha: float, p: float, q: float = 2.0) -> PenaltySchedule:
    if alpha < 2:
        raise ValueError("scaling exponent must be at least 2")
    if p <= 1:
        raise ValueError("penalty exponent must exceed 1")
    if q < 2 and p <= 1.2:
        raise ValueError("penalty exponent must exceed 6/5 when q < 2")
    p0 = p
    lo, hi = _window(alpha, p)
    while not lo < hi:
        p += 0.5
        lo, hi = _window(alpha, p)
    if p != p0:
        log.warning("penalty window empty for alpha=%g, p=%g; raised p to %g", alpha, p0, p)
    return PenaltySchedule(alpha, p, 0.5 * (lo + hi), lo, hi, p0)


def _fd(values: np.ndarray, grid) -> Field:
    return Field(grid, values)


def _move_last_to(ndim: int, pos: int) -> tuple:
    order = list(range(ndim - 1))
    order.insert(pos, ndim - 1)
    return tuple(order)


def _sym2(D):
    return 0.5 * (D + np.swapaxes(D, -1, -2))


class RecoveryFamily:
    """Deformations y_h with rescaled gradient and Hessian assembled in closed form in (h, x3).

    In-plane derivatives come from the base fields (exact jets where available,
    grid stencils otherwise); nothing is differentiated numerically in h or x3.
    """

    def __init__(self, regime: str, state: PlateState, form: RelaxedForm, alpha: float, rotation=None):
        if regime not in REGIMES:
            raise ValueError(f"unknown regime {regime!r}")
        if regime != regime_for(alpha):
            raise ValueError(f"regime {regime!r} does not match alpha = {alpha}")
        self.regime = regime
        self.state = state
        self.form = form
        self.alpha = float(alpha)
        self.gamma = self.alpha / 2
        self.U = np.asarray(form.U, dtype=float)
        self.Ui = np.linalg.inv(self.U)
        self.grid = state.grid
        self.rotation = None if rotation is None else np.asarray(rotation, dtype=float)
        self._setup()

    # -- construction ---------------------------------------------------------------
    def _setup(self):
        st, grid = self.state, self.grid
        if self.regime in ("vk", "lvk"):
            if st.u is None or st.v is None:
                raise ValueError("von Karman regimes need u and v")
            self.du = st.u.grad().values
            self.d2u = st.u.derivative(2)
            self.dv = st.v.grad().values
            self.d2v = st.v.derivative(2)
            self.d3v = st.v.derivative(3)
            self.xi = -2.0 * l_operator(self.form, _sym2(self.d2v))
            if self.regime == "lvk":
                zeta = 2.0 * l_operator(self.form, _sym2(self.du))
            else:
                zeta = self._vk_zeta()
            self.zeta = zeta
            self._corrections(grid)
        elif self.regime == "kirchhoff":
            if st.y is None:
                raise ValueError("the bending regime needs a deformation y")
            dyf = st.y.grad()
            nu = normal_vector_nu(dyf, self.U)
            self.dy = dyf.values
            self.d2y = st.y.derivative(2)
            self.nu = nu.values
            self.dnu = nu.grad().values
            self.d2nu = nu.derivative(2)
            II = np.einsum("...ka,...kb->...ab", self.dy, self.dnu)
            a = l_operator(self.form, _sym2(II))
            R = np.concatenate([self.dy, self.nu[..., None]], axis=-1) @ self.Ui
            self.xi = 2.0 * np.einsum("...ab,...b->...a", R @ self.Ui, a)
            self.dxi = _fd(self.xi, grid).grad().values
            self.d2xi = _fd(self.dxi, grid).grad().values
        else:
            if st.profile is None:
                raise ValueError("the constrained regime needs v given by a profile (g, n)")
            g, n = st.profile[:2]
            self._profile = (g, np.asarray(n, dtype=float))
            v = profile_field(g, self._profile[1], self.U, grid)
            if st.v is not None and np.max(np.abs(st.v.values - v.values)) > 1e-8:
                raise ValueError("v does not match the recorded profile")
            self.v_profile = v
            self.xi = -2.0 * l_operator(self.form, _sym2(v.derivative(2)))
            self.dxi = _fd(self.xi, grid).grad().values
            self.d2xi = _fd(self.dxi, grid).grad().values

    def _vk_zeta(self) -> np.ndarray:
        Ui = self.Ui
        w = np.zeros(self.dv.shape[:-1] + (3,))
        w[..., :2] = self.dv
        Uw = w @ Ui.T
        n3 = Ui[:, 2]
        c2 = float(n3 @ n3)
        D = _sym2(self.du) + 0.5 * c2 * self.dv[..., :, None] * self.dv[..., None, :]
        e3 = np.array([0.0, 0.0, 1.0])
        return (
            -0.5 * np.einsum("...a,...a->...", Uw, Uw)[..., None] * e3
            + (Uw @ n3)[..., None] * w
            + 2.0 * l_operator(self.form, D)
        )

    def _corrections(self, grid):
        self.dxi = _fd(self.xi, grid).grad().values
        self.d2xi = _fd(self.dxi, grid).grad().values
        self.dzeta = _fd(self.zeta, grid).grad().values
        self.d2zeta = _fd(self.dzeta, grid).grad().values

    @functools.lru_cache(maxsize=8)
    def _lift(self, h: float):
        eps = h ** (self.gamma - 1.0)
        lift = isometry_lift_profile(self._profile[0], self._profile[1], self.U, self.grid, amplitude=eps)
        dy = lift.y.grad()
        return dy.values, lift.y.derivative(2), lift.nu.values, lift.nu.grad().values, lift.nu.derivative(2), lift

    # -- evaluation -------------------------------------------------------------------
    def rotated(self, R) -> "RecoveryFamily":
        other = object.__new__(RecoveryFamily)
        other.__dict__.update(self.__dict__)
        R = np.asarray(R, dtype=float)
        other.rotation = R if self.rotation is None else R @ self.rotation
        return other

    def _rot(self, A):
        if self.rotation is None:
            return A
        # the first axis after the grid axes is always the deformation component
        return np.tensordot(A, self.rotation, axes=([2], [1])).transpose(_move_last_to(A.ndim, 2))

    def gradient(self, h: float, x3: float) -> np.ndarray:
        """Rescaled gradient at height x3, shape (n1, n2, 3, 3)."""
        return self._rot(self._gradient(h, x3))

    def hessian(self, h: float, x3: float) -> np.ndarray:
        """Rescaled Hessian, shape (n1, n2, 3, 3, 3) indexed [component, j, k]."""
        return self._rot(self._hessian(h, x3))

    def _gradient(self, h, x3):
        g, shp = self.gamma, self.grid.shape
        if self.regime in ("vk", "lvk"):
            G = np.zeros(shp + (3, 3))
            G[..., :2, :2] = h**g * (self.du - x3 * self.d2v)
            G[..., 2, :2] = h ** (g - 1) * self.dv
            G[..., :, :2] += 0.5 * h ** (g + 1) * x3**2 * self.dxi + h ** (g + 1) * x3 * self.dzeta
            G[..., :2, 2] = -(h ** (g - 1)) * self.dv
            G[..., :, 2] += h**g * (x3 * self.xi + self.zeta)
            return self.U + np.einsum("ab,...bc->...ac", self.Ui, G)
        if self.regime == "kirchhoff":
            F = np.empty(shp + (3, 3))
            F[..., :, :2] = self.dy + h * x3 * self.dnu + 0.5 * h**2 * x3**2 * self.dxi
            F[..., :, 2] = self.nu + h * x3 * self.xi
            return F
        dy, _, nu, dnu, _, _ = self._lift(h)
        F = np.empty(shp + (3, 3))
        F[..., :, :2] = dy + h * x3 * dnu + 0.5 * h ** (g + 1) * x3**2 * np.einsum("ab,...bj->...aj", self.Ui, self.dxi)
        F[..., :, 2] = nu + h**g * x3 * (self.xi @ self.Ui.T)
        return F

    def _hessian(self, h, x3):
        g, shp = self.gamma, self.grid.shape
        H = np.zeros(shp + (3, 3, 3))
        if self.regime in ("vk", "lvk"):
            H[..., :2, :2, :2] = h**g * (self.d2u - x3 * self.d3v)
            H[..., 2, :2, :2] = h ** (g - 1) * self.d2v
            H[..., :, :2, :2] += 0.5 * h ** (g + 1) * x3**2 * self.d2xi + h ** (g + 1) * x3 * self.d2zeta
            H[..., :2, 2, :2] = -(h ** (g - 1)) * self.d2v
            H[..., :, 2, :2] += h**g * (x3 * self.dxi + self.dzeta)
            H[..., :, :2, 2] = H[..., :, 2, :2]
            H[..., :, 2, 2] = h ** (g - 1) * self.xi
            return np.einsum("ab,...bjk->...ajk", self.Ui, H)
        if self.regime == "kirchhoff":
            H[..., :, :2, :2] = self.d2y + h * x3 * self.d2nu + 0.5 * h**2 * x3**2 * self.d2xi
            H[..., :, 2, :2] = self.dnu + h * x3 * self.dxi
            H[..., :, :2, 2] = H[..., :, 2, :2]
            H[..., :, 2, 2] = self.xi
            return H
        _, d2y, _, dnu, d2nu, _ = self._lift(h)
        Uxi = self.xi @ self.Ui.T
        dUxi = np.einsum("ab,...bj->...aj", self.Ui, self.dxi)
        d2Uxi = np.einsum("ab,...bjk->...ajk", self.Ui, self.d2xi)
        H[..., :, :2, :2] = d2y + h * x3 * d2nu + 0.5 * h ** (g + 1) * x3**2 * d2Uxi
        H[..., :, 2, :2] = dnu + h**g * x3 * dUxi
        H[..., :, :2, 2] = H[..., :, 2, :2]
        H[..., :, 2, 2] = h ** (g - 1) * Uxi
        return H

    def midsurface_metric_residual(self, h: float) -> float:
        """max |grad y~_h^T grad y~_h - (U^2)'| for the constrained regime's lifted mid-surface."""
        if self.regime != "cvk":
            raise ValueError("only the constrained regime has a lifted mid-surface")
        return float(np.max(metric_residual(self._lift(h)[0], self.U)))

    def limit_gradient(self) -> np.ndarray:
        if self.regime == "kirchhoff":
            return self._rot(np.concatenate([self.dy, self.nu[..., None]], axis=-1))
        return self._rot(np.broadcast_to(self.U, self.grid.shape + (3, 3)))


def build_recovery(state: PlateState, form: RelaxedForm, alpha: float, regime: str | None = None) -> RecoveryFamily:
    return RecoveryFamily(regime or regime_for(alpha), state, form, alpha)


def limit_energy(family: RecoveryFamily, rule: str = "trapezoid") -> float:
    """Value of the regime's limit functional at the family's base state."""
    fn = {"kirchhoff": energy_kl, "cvk": energy_cvk, "vk": energy_vk, "lvk": energy_lvk}[family.regime]
    return fn(family.state, family.form, rule)


@dataclass(frozen=True)
class EnergySample:
    h: float
    elastic: float
    penalty: float

    @property
    def total(self) -> float:
        return self.elastic + self.penalty

    @property
    def penalty_share(self) -> float:
        return self.penalty / self.total if self.total else 0.0


def rescaled_energy_3d(model: MultiWellModel, family: RecoveryFamily, h: float, n3: int = 5,
                       rule: str = "trapezoid", schedule: PenaltySchedule | None = None) -> EnergySample:
    """h^{-alpha} times the elastic and penalty parts of the energy of y_h on S x (-1/2, 1/2)."""
    if h <= 0:
        raise ValueError("thickness must be positive")
    if schedule is None:
        schedule = make_schedule(family.alpha, model.p, model.q)
    nodes, wts = np.polynomial.legendre.leggauss(n3)
    x3s, wts = 0.5 * nodes, 0.5 * wts
    grid = family.grid
    elastic = penalty = 0.0
    for x3, w in zip(x3s, wts):
        W = density_batch(model, family.gradient(h, x3))
        H = family.hessian(h, x3)
        hn = np.sqrt(np.einsum("...ajk,...ajk->...", H, H))
        elastic += w * float(grid.integrate(W, rule))
        penalty += w * float(grid.integrate(hn**schedule.p, rule))
    scale = h ** (-family.alpha)
    return EnergySample(h, scale * elastic, scale * schedule.eta(h) ** schedule.p * penalty)


@dataclass
class ConvergenceReport:
    regime: str
    alpha: float
    limit: float
    schedule: PenaltySchedule
    samples: list
    gaps: list
    orders: list
    fitted_order: float | None
    passed: bool
    rel_tol: float
    abs_tol: float
    reasons: list = field(default_factory=list)

    @property
    def penalty_shares(self) -> list:
        return [s.penalty_share for s in self.samples]

    def rows(self) -> list:
        return [
            [s.h, s.elastic, s.penalty, g, o]
            for s, g, o in zip(self.samples, self.gaps, self.orders)
        ]

    def to_csv(self, path) -> None:
        write_csv(path, ["h", "elastic", "penalty", "gap", "order"], self.rows())

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "alpha": self.alpha,
            "limit": self.limit,
            "p": self.schedule.p,
            "p_requested": self.schedule.p_requested,
            "s": self.schedule.s,
            "window": [self.schedule.s_min, self.schedule.s_max],
            "h": [s.h for s in self.samples],
            "elastic": [s.elastic for s in self.samples],
            "penalty": [s.penalty for s in self.samples],
            "gap": self.gaps,
            "order": [None if np.isnan(o) else o for o in self.orders],
            "fitted_order": self.fitted_order,
            "penalty_share": self.penalty_shares,
            "passed": self.passed,
            "rel_tol": self.rel_tol,
            "abs_tol": self.abs_tol,
            "reasons": self.reasons,
        }

    def to_json(self, path) -> None:
        write_json(path, self.to_dict())


def convergence_report(model: MultiWellModel, family: RecoveryFamily, hs, limit: float | None = None,
                       n3: int = 5, rel_tol: float = 0.05, abs_tol: float = 1e-3,
                       max_share: float = 0.05, rule: str = "trapezoid") -> ConvergenceReport:
    """Energies along a decreasing sequence of thicknesses with gaps to the limit value.

    Passes when the gaps never increase (strictly decrease while nonzero), the
    penalty shares do the same and end below ``max_share``, and the last gap is within
    rel_tol * |limit| + abs_tol * [limit == 0].
    """
    hs = [float(h) for h in hs]
    if len(hs) < 4 or any(b >= a for a, b in zip(hs, hs[1:])):
        raise ValueError("thicknesses must be a strictly decreasing list of length >= 4")
    schedule = make_schedule(family.alpha, model.p, model.q)
    if limit is None:
        limit = limit_energy(family, rule)
    samples = [rescaled_energy_3d(model, family, h, n3, rule, schedule) for h in hs]
    gaps = [abs(s.total - limit) for s in samples]
    orders = [float("nan")]
    for (h0, g0), (h1, g1) in zip(zip(hs, gaps), zip(hs[1:], gaps[1:])):
        orders.append(float(np.log(g0 / g1) / np.log(h0 / h1)) if g0 > 0 and g1 > 0 else float("nan"))
    positive = [(h, g) for h, g in zip(hs, gaps) if g > 0]
    fitted = None
    if len(positive) >= 2:
        fitted = float(np.polyfit(np.log([h for h, _ in positive]), np.log([g for _, g in positive]), 1)[0])

    reasons = []
    for g0, g1 in zip(gaps, gaps[1:]):
        if g1 > g0 or (g0 > 0 and g1 >= g0):
            reasons.append("gap does not decrease")
            break
    shares = [s.penalty_share for s in samples]
    if any(b > a or (a > 0 and b >= a) for a, b in zip(shares, shares[1:])):
        reasons.append("penalty share does not decrease")
    if shares[-1] >= max_share:
        reasons.append(f"final penalty share {samples[-1].penalty_share:.3g} >= {max_share}")
    tol = rel_tol * abs(limit) + (abs_tol if limit == 0 else 0.0)
    if gaps[-1] > tol:
        reasons.append(f"final gap {gaps[-1]:.3g} exceeds {tol:.3g}")
    return ConvergenceReport(family.regime, family.alpha, float(limit), schedule, samples, gaps, orders,
                             fitted, not reasons, rel_tol, abs_tol, reasons)
