"""IMU segments, preintegration and error-state covariance propagation.

Conventions
-----------
* Each sample is held constant until the next timestamp (the last sample until
  ``t_end``).
* The rotation error is a right perturbation, ``dR_true = dR_est Exp(dtheta)``,
  so it lives in the body frame at the end of the segment.  This matches the
  ``A^-1 B`` difference used by the losses and the pose graph.
* Covariances are ordered (rotation, velocity, position).

The ``*_batch`` functions operate on ``(N, K, ...)`` stacks of segments with a
common sample count; padding samples with ``dt = 0`` are exact no-ops.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geom import exp_so3, renormalize, skew


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class ImuSegment:
    """Samples in ``[t_start, t_end]`` between two consecutive scans."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    t_start: float
    t_end: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        self.t_start = float(self.t_start)
        self.t_end = float(self.t_end)
        if len(self.t) < 2:
            raise ValueError(f"segment needs at least 2 samples, got {len(self.t)}")
        if self.gyro.shape[0] != len(self.t) or self.accel.shape[0] != len(self.t):
            raise ValueError("gyro/accel length does not match timestamps")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("segment timestamps must be strictly increasing")
        if self.t[0] < self.t_start or self.t[-1] > self.t_end:
            raise ValueError("segment samples fall outside [t_start, t_end]")
        if not (np.all(np.isfinite(self.gyro)) and np.all(np.isfinite(self.accel))):
            raise ValueError("non-finite IMU measurement")

    @classmethod
    def from_samples(cls, samples, t_start: float, t_end: float) -> ImuSegment:
        samples = list(samples)
        return cls(
            np.array([s.t for s in samples]),
            np.array([s.gyro for s in samples]),
            np.array([s.accel for s in samples]),
            t_start,
            t_end,
        )

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self) -> list[ImuSample]:
        return [ImuSample(float(t), g, a) for t, g, a in zip(self.t, self.gyro, self.accel)]

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def dts(self) -> np.ndarray:
        """Per-sample hold durations; the last sample is held until ``t_end``."""
        return np.diff(np.append(self.t, self.t_end))


@dataclass
class CorrectionOutput:
    """Per-sample additive corrections and measurement variances (gyro, accel)."""

    sigma: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1, 6)
        self.eta = np.asarray(self.eta, dtype=float).reshape(-1, 6)
        if self.sigma.shape != self.eta.shape:
            raise ValueError("sigma and eta must have the same length")
        if np.any(self.eta <= 0):
            raise ValueError("eta must be strictly positive")

    def __len__(self) -> int:
        return self.sigma.shape[0]


@dataclass
class PreintDelta:
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    cov: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))


@dataclass
class NavState:
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.t = float(self.t)

    def copy(self) -> NavState:
        return NavState(self.R.copy(), self.v.copy(), self.p.copy(), self.t)


def correct_segment(seg: ImuSegment, corr: CorrectionOutput) -> ImuSegment:
    if len(corr) != len(seg):
        raise ValueError(f"correction has {len(corr)} entries for a {len(seg)}-sample segment")
    return ImuSegment(
        seg.t.copy(),
        seg.gyro + corr.sigma[:, :3],
        seg.accel + corr.sigma[:, 3:],
        seg.t_start,
        seg.t_end,
    )


def preintegrate_batch(gyro, accel, dt, eta=None, sigma0=None):
    """Preintegrate ``N`` segments of ``K`` samples at once.

    Returns ``(dR, dv, dp, cov)``; ``cov`` is ``None`` unless ``eta`` (shape
    ``(N, K, 6)``) is given.
    """
    gyro = np.ascontiguousarray(gyro, dtype=float)
    accel = np.ascontiguousarray(accel, dtype=float)
    dt = np.ascontiguousarray(dt, dtype=float)
    N, K = dt.shape
    if gyro.shape != (N, K, 3) or accel.shape != (N, K, 3):
        raise ValueError("gyro/accel must have shape (N, K, 3) matching dt")
    with_cov = eta is not None
    if with_cov:
        eta = np.ascontiguousarray(np.broadcast_to(eta, (N, K, 6)), dtype=float)
        s0 = np.zeros((9, 9)) if sigma0 is None else np.asarray(sigma0, dtype=float)
        cov = np.ascontiguousarray(np.broadcast_to(s0, (N, 9, 9)), dtype=float).copy()
    else:
        eta = np.zeros((1, 1, 6))
        cov = np.zeros((1, 9, 9))
    dR, dv, dp = _kernels.preintegrate(gyro, accel, dt, eta, cov, with_cov)
    dR = renormalize(dR)
    if with_cov:
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        return dR, dv, dp, cov
    return dR, dv, dp, None


def preintegrate_batch_reference(gyro, accel, dt, eta=None, sigma0=None):
    """Plain numpy version of :func:`preintegrate_batch` (slower, same math)."""
    gyro = np.asarray(gyro, dtype=float)
    accel = np.asarray(accel, dtype=float)
    dt = np.asarray(dt, dtype=float)
    N, K = dt.shape
    dR = np.broadcast_to(np.eye(3), (N, 3, 3)).copy()
    dv = np.zeros((N, 3))
    dp = np.zeros((N, 3))

    with_cov = eta is not None
    if with_cov:
        eta = np.broadcast_to(np.asarray(eta, dtype=float), (N, K, 6))
        cov = np.zeros((N, 9, 9)) if sigma0 is None else np.broadcast_to(sigma0, (N, 9, 9)).copy()

    step_rot = exp_so3(gyro * dt[..., None])
    for k in range(K):
        h = dt[:, k, None]
        a = accel[:, k]
        Ra = np.einsum("nij,nj->ni", dR, a)
        if with_cov:
            cov = _cov_step(cov, dR, step_rot[:, k], a, dt[:, k], eta[:, k])
        dp = dp + dv * h + 0.5 * Ra * h * h
        dv = dv + Ra * h
        dR = dR @ step_rot[:, k]

    dR = renormalize(dR)
    if with_cov:
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        return dR, dv, dp, cov
    return dR, dv, dp, None


def _cov_step(cov, dR, step_rot, a, h, eta):
    """One step of ``S <- A S A^T + Bw diag(eta_w) Bw^T + Ba diag(eta_a) Ba^T``.

    Works on blocks: ``A = [[Q, 0, 0], [C, I, 0], [C h/2, I h, I]]`` with
    ``Q = Exp(w h)^T`` and ``C = -dR [a]x h``; ``Bw = [I h; 0; 0]`` and
    ``Ba = [0; dR h; dR h^2 / 2]``.
    """
    hh = h[:, None, None]
    Qt = step_rot  # Q^T
    C = -(dR @ skew(a)) * hh
    Ct = np.swapaxes(C, 1, 2)

    top = cov[:, 0:3, :]
    CS = C @ top
    T = np.empty_like(cov)
    T[:, 0:3, :] = np.swapaxes(Qt, 1, 2) @ top
    T[:, 3:6, :] = CS + cov[:, 3:6, :]
    T[:, 6:9, :] = 0.5 * hh * CS + hh * cov[:, 3:6, :] + cov[:, 6:9, :]

    left = T[:, :, 0:3]
    TC = left @ Ct
    out = np.empty_like(cov)
    out[:, :, 0:3] = left @ Qt
    out[:, :, 3:6] = TC + T[:, :, 3:6]
    out[:, :, 6:9] = 0.5 * hh * TC + hh * T[:, :, 3:6] + T[:, :, 6:9]

    h2 = hh * hh
    idx = np.arange(3)
    out[:, idx, idx] += h2[:, :, 0] * eta[:, :3]
    Qa = (dR * eta[:, None, 3:]) @ np.swapaxes(dR, 1, 2)
    out[:, 3:6, 3:6] += h2 * Qa
    out[:, 3:6, 6:9] += 0.5 * h2 * hh * Qa
    out[:, 6:9, 3:6] += 0.5 * h2 * hh * Qa
    out[:, 6:9, 6:9] += 0.25 * h2 * h2 * Qa
    return out


def transition_matrix(dR, step_rot, a, h):
    """Batched error-state transition ``A_k`` for one held sample."""
    dR = np.asarray(dR, dtype=float).reshape(-1, 3, 3)
    step_rot = np.asarray(step_rot, dtype=float).reshape(-1, 3, 3)
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    h = np.asarray(h, dtype=float).reshape(-1)
    N = dR.shape[0]
    A = np.zeros((N, 9, 9))
    eye = np.eye(3)
    C = -(dR @ skew(a)) * h[:, None, None]
    A[:, :3, :3] = np.swapaxes(step_rot, 1, 2)
    A[:, 3:6, :3] = C
    A[:, 3:6, 3:6] = eye
    A[:, 6:9, :3] = 0.5 * C * h[:, None, None]
    A[:, 6:9, 3:6] = eye * h[:, None, None]
    A[:, 6:9, 6:9] = eye
    return A


def _single(seg: ImuSegment):
    return seg.gyro[None], seg.accel[None], seg.dts()[None]


def preintegrate(seg: ImuSegment) -> PreintDelta:
    dR, dv, dp, _ = preintegrate_batch(*_single(seg))
    return PreintDelta(dR[0], dv[0], dp[0])


def propagate_covariance(seg: ImuSegment, corr: CorrectionOutput, sigma0=None) -> np.ndarray:
    """Propagated 9x9 covariance of the corrected segment's preintegration."""
    if len(corr) != len(seg):
        raise ValueError(f"correction has {len(corr)} entries for a {len(seg)}-sample segment")
    sigma0 = np.zeros((9, 9)) if sigma0 is None else np.asarray(sigma0, dtype=float)
    if sigma0.shape != (9, 9):
        raise ValueError("sigma0 must be 9x9")
    if not np.allclose(sigma0, sigma0.T, atol=1e-12) or np.linalg.eigvalsh(sigma0).min() < -1e-10:
        raise ValueError("sigma0 must be symmetric positive semidefinite")
    fixed = correct_segment(seg, corr)
    *_, cov = preintegrate_batch(*_single(fixed), eta=corr.eta[None], sigma0=sigma0)
    return cov[0]


def preintegrate_corrected(seg: ImuSegment, corr: CorrectionOutput, sigma0=None) -> PreintDelta:
    """Correct, preintegrate and propagate the covariance in one pass."""
    if len(corr) != len(seg):
        raise ValueError(f"correction has {len(corr)} entries for a {len(seg)}-sample segment")
    fixed = correct_segment(seg, corr)
    dR, dv, dp, cov = preintegrate_batch(*_single(fixed), eta=corr.eta[None], sigma0=sigma0)
    return PreintDelta(dR[0], dv[0], dp[0], cov[0])


def propagate_state(prev: NavState, delta: PreintDelta, gravity, dt: float) -> NavState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    g = np.asarray(gravity, dtype=float)
    R = prev.R @ delta.dR
    v = prev.v + g * dt + prev.R @ delta.dv
    p = prev.p + prev.v * dt + 0.5 * g * dt * dt + prev.R @ delta.dp
    return NavState(renormalize(R), v, p, prev.t + dt)


def stack_segments(segments):
    """Pad segments to a common length with zero-duration samples."""
    K = max(len(s) for s in segments)
    N = len(segments)
    gyro = np.zeros((N, K, 3))
    accel = np.zeros((N, K, 3))
    dt = np.zeros((N, K))
    for n, s in enumerate(segments):
        k = len(s)
        gyro[n, :k] = s.gyro
        accel[n, :k] = s.accel
        dt[n, :k] = s.dts()
    return gyro, accel, dt


def split_segments(t, gyro, accel, boundaries):
    """Cut a continuous IMU stream into segments between consecutive boundaries.

    Samples with ``boundaries[i] <= t < boundaries[i + 1]`` go to segment ``i``.
    """
    t = np.asarray(t, dtype=float)
    out = []
    for t0, t1 in zip(boundaries[:-1], boundaries[1:]):
        lo = np.searchsorted(t, t0, side="left")
        hi = np.searchsorted(t, t1, side="left")
        out.append(ImuSegment(t[lo:hi], gyro[lo:hi], accel[lo:hi], t0, t1))
    return out
