"""SO(3)/SE(3) helpers.

Rotations are plain ``(..., 3, 3)`` arrays so that everything vectorizes over
leading batch dimensions; :class:`Pose` and :class:`Twist` are thin immutable
wrappers for the single-instance API.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-6
# Above this angle the sin-based log formula loses precision.
_NEAR_PI = np.pi - 1e-2
_RENORM_TOL = 1e-7


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, batched over leading dimensions."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.einsum("...i,...i->...", phi, phi)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # Taylor expansions keep both coefficients accurate to ~1e-20 below the cutoff.
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_so3`; returned vectors have norm <= pi."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)

    small = theta < _SMALL_ANGLE
    safe_s = np.where(s > 0, s, 1.0)
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / safe_s)
    out = scale[..., None] * w

    near_pi = theta > _NEAR_PI
    if np.any(near_pi):
        flat_out = out.reshape(-1, 3).copy()
        flat_R, flat_w = R.reshape(-1, 3, 3), w.reshape(-1, 3)
        flat_t, flat_c = np.ravel(theta), np.ravel(c)
        for k in np.flatnonzero(np.ravel(near_pi)):
            flat_out[k] = _log_near_pi(flat_R[k], flat_w[k], flat_t[k], flat_c[k])
        out = flat_out.reshape(out.shape)
    return out


def _log_near_pi(R: np.ndarray, w: np.ndarray, theta: float, c: float) -> np.ndarray:
    # Symmetric part equals cos(t) I + (1 - cos(t)) a a^T; take the dominant column.
    aat = (0.5 * (R + R.T) - c * np.eye(3)) / (1.0 - c)
    j = int(np.argmax(np.diag(aat)))
    axis = aat[:, j] / np.sqrt(aat[j, j])
    if axis @ w < 0.0:
        axis = -axis
    return theta * axis


def orthonormality_error(R: np.ndarray) -> float:
    R = np.asarray(R, dtype=float)
    return float(np.linalg.norm(R.T @ R - np.eye(3)))


def gram_schmidt(R: np.ndarray) -> np.ndarray:
    """Re-orthonormalize a nearly-orthonormal matrix column by column."""
    R = np.asarray(R, dtype=float)
    x = R[:, 0] / np.linalg.norm(R[:, 0])
    y = R[:, 1] - (x @ R[:, 1]) * x
    y = y / np.linalg.norm(y)
    z = np.cross(x, y)
    return np.column_stack([x, y, z])


def renormalize(R: np.ndarray, tol: float = _RENORM_TOL) -> np.ndarray:
    """Apply :func:`gram_schmidt` to each matrix whose error exceeds ``tol``."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 2:
        return gram_schmidt(R) if orthonormality_error(R) > tol else R
    flat = R.reshape(-1, 3, 3).copy()
    err = np.linalg.norm(np.swapaxes(flat, 1, 2) @ flat - np.eye(3), axis=(1, 2))
    for k in np.flatnonzero(err > tol):
        flat[k] = gram_schmidt(flat[k])
    return flat.reshape(R.shape)


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    return R.shape == (3, 3) and orthonormality_error(R) <= tol and abs(np.linalg.det(R) - 1.0) <= tol


def geodesic_distance(A: np.ndarray, B: np.ndarray) -> float:
    return float(np.linalg.norm(log_so3(np.asarray(A).T @ np.asarray(B))))


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> Pose:
        return Pose(self.R.T, -self.R.T @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(N, 3)`` array (or a single point)."""
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def __matmul__(self, other: Pose) -> Pose:
        return compose_se3(self, other)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t))

    __hash__ = None


@dataclass(frozen=True)
class Twist:
    rotvec: np.ndarray
    transvec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotvec", np.array(self.rotvec, dtype=float).reshape(3))
        object.__setattr__(self, "transvec", np.array(self.transvec, dtype=float).reshape(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotvec, self.transvec])

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector()))


def compose_se3(A: Pose, B: Pose) -> Pose:
    return Pose(A.R @ B.R, A.R @ B.t + A.t)


def relative_se3(A: Pose, B: Pose) -> Twist:
    """``A ⊟ B``: rotation log and translation of ``A^-1 B``.

    The same right-difference convention is used for every residual in the
    package (pose graph, training losses).
    """
    dR = A.R.T @ B.R
    return Twist(log_so3(dR), A.R.T @ (B.t - A.t))


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))
