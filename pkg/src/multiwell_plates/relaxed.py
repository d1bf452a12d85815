"""Relaxed plate form: minimize a well Hessian over out-of-plane completions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .density import QuadraticForm3, hessian_Q

E3 = np.eye(3)


class SingularRelaxationError(np.linalg.LinAlgError):
    pass


def embed2(D) -> np.ndarray:
    """Embed 2x2 matrices into the upper-left block of 3x3 (batched)."""
    D = np.asarray(D, dtype=float)
    out = np.zeros(D.shape[:-2] + (3, 3))
    out[..., :2, :2] = D
    return out


def completion(a) -> np.ndarray:
    """a (x) e3 + e3 (x) a, batched over leading axes of a."""
    a = np.asarray(a, dtype=float)
    out = np.zeros(a.shape[:-1] + (3, 3))
    out[..., :, 2] += a
    out[..., 2, :] += a
    return out


@dataclass(frozen=True)
class RelaxedForm:
    """Qbar(D) = min_a Q(U^{-1}(sym D + a(x)e3 + e3(x)a)) and its minimizer map.

    ``coeffs`` is 4x4 acting on row-major vec(D) after symmetrization and
    ``lmap`` is the 3x4 matrix of D -> a.
    """

    form: QuadraticForm3
    U: np.ndarray
    j: int = 0
    coeffs: np.ndarray = field(init=False, repr=False)
    lmap: np.ndarray = field(init=False, repr=False)
    _chol: tuple = field(init=False, repr=False)
    _rhs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        Ui = np.linalg.inv(np.asarray(self.U, dtype=float))
        H = self.form.H
        P = np.zeros((4, 4))  # symmetrizer on vec(2x2)
        for k in range(4):
            e = np.zeros(4)
            e[k] = 1.0
            D = e.reshape(2, 2)
            P[:, k] = (0.5 * (D + D.T)).reshape(4)
        Emap = np.stack([(Ui @ embed2(P[:, k].reshape(2, 2))).reshape(9) for k in range(4)], axis=1)
        Bmap = np.stack([(Ui @ completion(E3[i])).reshape(9) for i in range(3)], axis=1)
        K = Bmap.T @ H @ Bmap
        try:
            chol = cho_factor(K)
        except LinAlgError as exc:
            raise SingularRelaxationError(f"relaxation system for well {self.j} is singular") from exc
        if np.linalg.cond(K) > 1e12:
            raise SingularRelaxationError(f"relaxation system for well {self.j} is singular")
        rhs = -Bmap.T @ H @ Emap
        L = cho_solve(chol, rhs)
        G = Emap + Bmap @ L
        C = G.T @ H @ G
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_rhs", rhs)
        object.__setattr__(self, "lmap", L)
        object.__setattr__(self, "coeffs", 0.5 * (C + C.T))

    def __call__(self, D) -> np.ndarray:
        return relaxed_q(self, D)

    def stationarity(self, D, a) -> np.ndarray:
        """Residual of the three optimality conditions at completion a."""
        Ui = np.linalg.inv(self.U)
        D = np.asarray(D, dtype=float)
        M = Ui @ (embed2(0.5 * (D + D.T)) + completion(a))
        return np.array([self.form.bilinear(M, Ui @ completion(E3[i])) for i in range(3)])


def _vec2(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    return D.reshape(D.shape[:-2] + (4,))


def l_operator(form: RelaxedForm, D) -> np.ndarray:
    """Optimal completion vector a = L(D) (batched over leading axes)."""
    return np.einsum("ij,...j->...i", form.lmap, _vec2(D))


def relaxed_q(form: RelaxedForm, D) -> np.ndarray:
    d = _vec2(D)
    return np.einsum("...i,ij,...j->...", d, form.coeffs, d)


def relaxed_bilinear(form: RelaxedForm, D1, D2) -> np.ndarray:
    return np.einsum("...i,ij,...j->...", _vec2(D1), form.coeffs, _vec2(D2))


def relaxed_grad(form: RelaxedForm, D) -> np.ndarray:
    """Derivative of Qbar at D as a 2x2 matrix (batched)."""
    g = 2.0 * np.einsum("ij,...j->...i", form.coeffs, _vec2(D))
    return g.reshape(g.shape[:-1] + (2, 2))


def build_relaxed(model, j: int, form: QuadraticForm3 | None = None) -> RelaxedForm:
    Q = form if form is not None else hessian_Q(model, j)
    return RelaxedForm(Q, model.wells[j].U, j)
