"""Small dense kernels on 3x3 matrices and SO(3) geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

RANK_ONE_TOL = 1e-9


def as_mat3(a) -> np.ndarray:
    m = np.asarray(a, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def skw(a):
    return 0.5 * (a - np.swapaxes(a, -1, -2))


def hat(w) -> np.ndarray:
    """Skew matrix [w]x with [w]x v = w x v (batched over leading axes)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(W) -> np.ndarray:
    """Axial vector of the skew part of W."""
    W = np.asarray(W, dtype=float)
    return 0.5 * np.stack(
        [W[..., 2, 1] - W[..., 1, 2], W[..., 0, 2] - W[..., 2, 0], W[..., 1, 0] - W[..., 0, 1]],
        axis=-1,
    )


@dataclass(frozen=True)
class Well:
    """Symmetric positive-definite stretch U defining the well SO(3)U."""

    U: np.ndarray

    def __post_init__(self):
        U = as_mat3(self.U)
        if np.max(np.abs(U - U.T)) > 1e-12:
            raise ValueError("well matrix is not symmetric")
        if np.min(np.linalg.eigvalsh(U)) <= 0:
            raise ValueError("well matrix is not positive definite")
        U = U.copy()
        U.setflags(write=False)
        object.__setattr__(self, "U", U)

    @classmethod
    def from_matrix(cls, F) -> "Well":
        """Well through F: keeps the SPD factor of the polar decomposition F = R U."""
        F = as_mat3(F)
        R = polar_rotation(F)
        return cls(sym(R.T @ F))

    @property
    def inv(self) -> np.ndarray:
        return np.linalg.inv(self.U)

    @property
    def normal_stretch(self) -> float:
        """|U^{-1} e3|, the length of the reference normal after unstretching."""
        return float(np.linalg.norm(self.inv[:, 2]))


def polar_rotation(F) -> np.ndarray:
    """Rotation factor R of F = R S (S SPD); the nearest rotation to F."""
    F = as_mat3(F)
    if np.linalg.det(F) <= 0:
        raise ValueError("polar rotation needs det F > 0")
    P, _, Vt = np.linalg.svd(F)
    return P @ Vt


def procrustes_max(M) -> tuple[float, np.ndarray]:
    """Maximize trace(R^T M) over R in SO(3).

    Returns the optimal value and one maximizer. When the SVD factors have
    opposite orientation the smallest singular value enters with a minus sign.
    """
    M = as_mat3(M)
    P, s, Vt = np.linalg.svd(M)
    d = 1.0 if np.linalg.det(P @ Vt) > 0 else -1.0
    R = P @ np.diag([1.0, 1.0, d]) @ Vt
    return float(s[0] + s[1] + d * s[2]), R


def procrustes_max_batch(M: np.ndarray) -> np.ndarray:
    """Vectorized optimal values of trace(R^T M) over stacks of matrices."""
    P, s, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(P) * np.linalg.det(Vt))
    d[d == 0] = 1.0
    return s[..., 0] + s[..., 1] + d * s[..., 2]


def nearest_on_well(F: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Stack of nearest points R U on SO(3)U to each F (batched)."""
    P, _, Vt = np.linalg.svd(F @ U.T)
    d = np.sign(np.linalg.det(P) * np.linalg.det(Vt))
    d[d == 0] = 1.0
    P = P.copy()
    P[..., :, 2] *= d[..., None]
    return P @ Vt @ U


def dist_to_well(F, well: Well) -> float:
    """Distance from F to SO(3)U."""
    F = as_mat3(F)
    return float(dist_to_well_batch(F[None], well.U)[0])


def dist_to_well_batch(F: np.ndarray, U: np.ndarray) -> np.ndarray:
    # |F - R*U| equals sqrt(|F|^2 + |U|^2 - 2 max tr(R^T F U^T)) but keeps
    # full relative accuracy when F is close to the well.
    diff = F - nearest_on_well(F, U)
    return np.sqrt(np.einsum("...ij,...ij->...", diff, diff))


def rank_one_connected(U1: Well, U2: Well) -> tuple[bool, float]:
    """Twinning test: middle eigenvalue of U1^{-1} U2^2 U1^{-1} equal to 1."""
    A = U1.inv
    C = sym(A @ U2.U @ U2.U @ A)
    lam = np.linalg.eigvalsh(C)[1]
    return bool(abs(lam - 1.0) < RANK_ONE_TOL), float(lam)


def exp_skew(w) -> np.ndarray:
    """Rodrigues formula for exp([w]x)."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-8:
        # Taylor coefficients to O(theta^4)
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def log_rotation(R) -> np.ndarray:
    """Axial vector w with exp([w]x) = R and |w| <= pi."""
    return Rotation.from_matrix(as_mat3(R)).as_rotvec()


def rotation_angle(R) -> float:
    """Geodesic distance of R from the identity (rotation angle)."""
    return float(np.linalg.norm(log_rotation(R)))


def random_rotation(rng: np.random.Generator, size=None) -> np.ndarray:
    """Haar-distributed rotation matrices."""
    return Rotation.random(size, random_state=rng).as_matrix()
