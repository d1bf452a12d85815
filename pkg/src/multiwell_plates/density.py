"""Multi-well energy densities, hypothesis checks and the well Hessians."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import Well, as_mat3, dist_to_well_batch, random_rotation, sym

DENSITY_KINDS = ("canonical_dist", "green_lagrange")
DISJOINT_TOL = 1e-8


class FiniteDifferenceError(RuntimeError):
    """Richardson-extrapolated Hessian did not settle."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def growth(t, q):
    """f_q(t) = min(t^2, t^q)."""
    t = np.asarray(t, dtype=float)
    return np.minimum(t * t, t**q)


@dataclass(frozen=True)
class MultiWellModel:
    """Wells, density kind, growth exponent q, penalty exponent p, (W4) constant.

    ``well_scale`` multiplies the canonical density (default 1). For the
    Green-Lagrange density it is only a declared lower-bound constant for (W4);
    left as None, the hypothesis report just estimates it.

    For ``green_lagrange`` an orientation term min(det F, 0)^2 is added; it vanishes
    near every well, so it leaves the Hessians untouched, and it removes the
    spurious zeros on reflected wells.
    """

    wells: tuple
    density: str = "green_lagrange"
    q: float = 2.0
    p: float = 4.0
    well_scale: float | None = None
    check: bool = True

    def __post_init__(self):
        wells = tuple(w if isinstance(w, Well) else Well(np.asarray(w, float)) for w in self.wells)
        object.__setattr__(self, "wells", wells)
        if not wells:
            raise ValueError("a model needs at least one well")
        if self.density not in DENSITY_KINDS:
            raise ValueError(f"unknown density kind {self.density!r}; expected one of {DENSITY_KINDS}")
        if not 0.0 <= self.q <= 2.0:
            raise ValueError("growth exponent q must lie in [0, 2]")
        if self.p <= 1.0:
            raise ValueError("penalty exponent p must exceed 1")
        if self.well_scale is None and self.density == "canonical_dist":
            object.__setattr__(self, "well_scale", 1.0)
        if self.well_scale is not None and self.well_scale <= 0:
            raise ValueError("well_scale must be positive")
        if self.check:
            if self.q < 2.0 and self.p <= 1.2:
                raise ValueError("p must exceed 6/5 when q < 2")
            bad = overlapping_wells(wells)
            if bad:
                raise ValueError(f"wells {bad[0]} and {bad[1]} coincide (not disjoint)")

    @property
    def n_wells(self) -> int:
        return len(self.wells)


def well_separation(Ui: np.ndarray, Uj: np.ndarray) -> float:
    """|sigma(Uj^{-1} Ui) - (1,1,1)|: zero iff Uj^{-1} Ui is a rotation."""
    s = np.linalg.svd(np.linalg.solve(Uj, Ui), compute_uv=False)
    return float(np.linalg.norm(s - 1.0))


def overlapping_wells(wells) -> tuple | None:
    for i in range(len(wells)):
        for j in range(i + 1, len(wells)):
            if well_separation(wells[i].U, wells[j].U) <= DISJOINT_TOL:
                return (i, j)
    return None


def density_batch(model: MultiWellModel, F: np.ndarray) -> np.ndarray:
    """Energy density over a stack of matrices of shape (..., 3, 3)."""
    F = np.asarray(F, dtype=float)
    if model.density == "green_lagrange":
        C = np.swapaxes(F, -1, -2) @ F
        best = None
        for w in model.wells:
            Ui = w.inv
            E = Ui @ C @ Ui - np.eye(3)
            val = 0.25 * np.einsum("...ij,...ij->...", E, E)
            best = val if best is None else np.minimum(best, val)
        neg = np.minimum(np.linalg.det(F), 0.0)
        return best + neg * neg
    d = np.min(np.stack([dist_to_well_batch(F, w.U) for w in model.wells]), axis=0)
    return model.well_scale * growth(d, model.q)


def declared_w4_constant(model: MultiWellModel) -> float:
    """The (W4) constant the model claims; 0 when none is declared."""
    return 0.0 if model.well_scale is None else float(model.well_scale)


def evaluate_density(model: MultiWellModel, F) -> float:
    return float(density_batch(model, as_mat3(F)[None])[0])


def dist_to_wells(model: MultiWellModel, F: np.ndarray) -> np.ndarray:
    return np.min(np.stack([dist_to_well_batch(F, w.U) for w in model.wells]), axis=0)


@dataclass(frozen=True)
class QuadraticForm3:
    """Q(A) = vec(A)^T H vec(A) with row-major vec, H symmetric 9x9."""

    H: np.ndarray
    j: int = 0

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        if H.shape != (9, 9):
            raise ValueError("quadratic form coefficients must be 9x9")
        if np.max(np.abs(H - H.T)) > 1e-12 * max(1.0, np.max(np.abs(H))):
            raise ValueError("quadratic form coefficients are not symmetric")
        object.__setattr__(self, "H", 0.5 * (H + H.T))

    def __call__(self, A) -> np.ndarray:
        a = np.asarray(A, dtype=float).reshape(np.shape(A)[:-2] + (9,))
        return np.einsum("...i,ij,...j->...", a, self.H, a)

    def bilinear(self, A, B) -> np.ndarray:
        a = np.asarray(A, dtype=float).reshape(np.shape(A)[:-2] + (9,))
        b = np.asarray(B, dtype=float).reshape(np.shape(B)[:-2] + (9,))
        return np.einsum("...i,ij,...j->...", a, self.H, b)


def _unit_matrices() -> np.ndarray:
    return np.eye(9).reshape(9, 3, 3)


def green_lagrange_form(U: np.ndarray, j: int = 0) -> QuadraticForm3:
    """Closed form Q(A) = 2 |sym(A U^{-1})|^2 for the Green-Lagrange well."""
    Ui = np.linalg.inv(U)
    T = np.stack([sym(E @ Ui).reshape(9) for E in _unit_matrices()], axis=1)
    return QuadraticForm3(2.0 * T.T @ T, j)


def fd_hessian(model: MultiWellModel, U: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Second derivative of W at U by central differences with one Richardson halving."""
    E = _unit_matrices()

    def raw(eps):
        plus = E[:, None] + E[None, :]
        minus = E[:, None] - E[None, :]
        pts = np.stack([U + eps * plus, U + eps * minus, U - eps * minus, U - eps * plus])
        w = density_batch(model, pts)
        return (w[0] - w[1] - w[2] + w[3]) / (4.0 * eps * eps)

    H1, H2 = raw(step), raw(step / 2)
    scale = max(1.0, float(np.max(np.abs(H2))))
    residual = float(np.max(np.abs(H1 - H2))) / scale
    if residual > 1e-3:
        raise FiniteDifferenceError("finite-difference Hessian did not converge", residual)
    H = (4.0 * H2 - H1) / 3.0
    return 0.5 * (H + H.T)


def hessian_Q(model: MultiWellModel, j: int, numeric: bool | None = None) -> QuadraticForm3:
    """Q_j = D^2 W(U_j); analytic for green_lagrange unless ``numeric`` is set."""
    if not 0 <= j < model.n_wells:
        raise IndexError(f"well index {j} out of range")
    U = model.wells[j].U
    if numeric is None:
        numeric = model.density != "green_lagrange"
    if not numeric:
        return green_lagrange_form(U, j)
    return QuadraticForm3(fd_hessian(model, U), j)


def sym_basis() -> np.ndarray:
    """Orthonormal basis of symmetric 3x3 matrices (Frobenius product)."""
    out = []
    for i in range(3):
        for k in range(i, 3):
            B = np.zeros((3, 3))
            if i == k:
                B[i, i] = 1.0
            else:
                B[i, k] = B[k, i] = np.sqrt(0.5)
            out.append(B)
    return np.array(out)


def coercivity_constant(form: QuadraticForm3, U: np.ndarray) -> float:
    """Smallest eigenvalue of S -> Q(U^{-1} S) on unit symmetric S."""
    Ui = np.linalg.inv(U)
    B = Ui @ sym_basis()
    K = np.array([[form.bilinear(a, b) for b in B] for a in B])
    return float(np.linalg.eigvalsh(0.5 * (K + K.T))[0])


@dataclass
class HypothesisReport:
    zero_on_wells: list
    frame_residual: float
    w4_ratio_min: float
    w4_ok: bool
    symmetry_residual: list
    coercivity: list
    disjoint: bool
    p3_ok: bool
    flags: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.flags.values())


def check_hypotheses(model: MultiWellModel, seed: int = 0, n_frame: int = 100, n_w4: int = 1000,
                     n_sym: int = 100) -> HypothesisReport:
    rng = np.random.default_rng(seed)
    zeros = [evaluate_density(model, w.U) for w in model.wells]

    F = rng.normal(size=(n_frame, 3, 3))
    R = random_rotation(rng, n_frame)
    w0 = density_batch(model, F)
    w1 = density_batch(model, R @ F)
    frame = float(np.max(np.abs(w1 - w0) / np.maximum(1.0, np.abs(w0))))

    # (W4) probe: half near the wells, half spread out
    picks = rng.integers(model.n_wells, size=n_w4)
    Rw = random_rotation(rng, n_w4)
    near = Rw @ np.stack([model.wells[k].U for k in picks]) + 10.0 ** rng.uniform(-4, 0, (n_w4, 1, 1)) * rng.normal(size=(n_w4, 3, 3))
    far = 2.0 * rng.normal(size=(n_w4, 3, 3))
    Fs = np.concatenate([near[: n_w4 // 2], far[: n_w4 - n_w4 // 2]])
    lower = growth(dist_to_wells(model, Fs), model.q)
    keep = lower > 1e-14
    ratio = float(np.min(density_batch(model, Fs)[keep] / lower[keep]))

    sym_res, lams = [], []
    for j, w in enumerate(model.wells):
        Q = hessian_Q(model, j)
        A = rng.normal(size=(n_sym, 3, 3))
        red = w.inv @ sym(w.U @ A)
        sym_res.append(float(np.max(np.abs(Q(A) - Q(red)))))
        lams.append(coercivity_constant(Q, w.U))

    disjoint = overlapping_wells(model.wells) is None
    p3 = model.q >= 2.0 or model.p > 1.2
    report = HypothesisReport(
        zero_on_wells=zeros,
        frame_residual=frame,
        w4_ratio_min=ratio,
        w4_ok=ratio > 0 and ratio >= declared_w4_constant(model) * (1 - 1e-9),
        symmetry_residual=sym_res,
        coercivity=lams,
        disjoint=disjoint,
        p3_ok=p3,
    )
    report.flags = {
        "zero_on_wells": max(zeros) <= 1e-14,
        "frame_indifference": frame < 1e-12,
        "w4": report.w4_ok,
        "symmetry": max(sym_res) < 1e-8,
        "coercivity": min(lams) > 0,
        "disjoint": disjoint,
        "p3": p3,
    }
    return report
