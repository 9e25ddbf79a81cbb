"""Trajectory containers, TUM I/O and APE / fixed-interval RPE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imu import NavState

ASSOC_TOL = 1e-3


@dataclass
class Trajectory:
    t: np.ndarray
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.R = np.asarray(self.R, dtype=float).reshape(-1, 3, 3)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=float).reshape(-1, 3)
        if len(self.t) != len(self.R) or len(self.t) != len(self.p):
            raise ValueError("trajectory arrays have inconsistent lengths")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_states(cls, states) -> Trajectory:
        states = list(states)
        return cls(
            [s.t for s in states],
            [s.R for s in states],
            [s.p for s in states],
            [s.v for s in states],
        )

    def state(self, i: int) -> NavState:
        v = self.v[i] if self.v is not None else np.zeros(3)
        return NavState(self.R[i], v, self.p[i], self.t[i])

    def lookup(self, t: float, tol: float = ASSOC_TOL) -> int | None:
        """Index of the sample nearest to ``t`` if it lies within ``tol``."""
        j = int(np.searchsorted(self.t, t))
        best = None
        for k in (j - 1, j):
            if 0 <= k < len(self.t) and abs(self.t[k] - t) <= tol:
                if best is None or abs(self.t[k] - t) < abs(self.t[best] - t):
                    best = k
        return best


# ---------------------------------------------------------------- quaternions


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``[qx, qy, qz, qw]`` with ``qw >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def matrix_from_quat(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def write_tum(path, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        for t, R, p in zip(traj.t, traj.R, traj.p):
            q = quat_from_matrix(R)
            fh.write(" ".join(repr(float(x)) for x in (t, *p, *q)) + "\n")


def read_tum(path) -> Trajectory:
    ts, Rs, ps = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            ts.append(vals[0])
            ps.append(vals[1:4])
            Rs.append(matrix_from_quat(vals[4:8]))
    return Trajectory(ts, Rs, ps)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    ape: float
    rpe: float
    interval: float
    count: int
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"ape": self.ape, "rpe": self.rpe, "interval": self.interval, "count": self.count, "skipped": self.skipped}


def associate(est: Trajectory, gt: Trajectory, tol: float = ASSOC_TOL) -> list[tuple[int, int]]:
    pairs = []
    for i, t in enumerate(est.t):
        j = gt.lookup(t, tol)
        if j is not None:
            pairs.append((i, j))
    return pairs


def ape(est: Trajectory, gt: Trajectory) -> float:
    """Mean position error over timestamp-associated pairs, no alignment."""
    pairs = associate(est, gt)
    if not pairs:
        raise ValueError("no associated poses between estimate and ground truth")
    i, j = np.array(pairs).T
    return float(np.mean(np.linalg.norm(est.p[i] - gt.p[j], axis=1)))


@dataclass
class IntervalEstimate:
    """Estimator output over one reinitialized interval."""

    start: NavState
    end: NavState


@dataclass
class RpeResult:
    rpe: float
    count: int
    skipped: int


def rpe_fixed_interval(intervals, gt: Trajectory, interval: float = 0.2) -> RpeResult:
    """Mean displacement error over reinitialized fixed-duration intervals.

    The estimated displacement is rotated from the estimate's start frame into
    the ground-truth start frame before it is compared.
    """
    errs = []
    skipped = 0
    for iv in intervals:
        if abs((iv.end.t - iv.start.t) - interval) > ASSOC_TOL:
            raise ValueError(f"interval starting at {iv.start.t} does not span {interval} s")
        j0 = gt.lookup(iv.start.t)
        j1 = gt.lookup(iv.end.t)
        if j0 is None or j1 is None:
            skipped += 1
            continue
        d_gt = gt.p[j1] - gt.p[j0]
        d_est = iv.end.p - iv.start.p
        errs.append(np.linalg.norm(d_gt - gt.R[j0] @ iv.start.R.T @ d_est))
    if not errs:
        raise ValueError("no interval has both endpoints in the ground truth")
    return RpeResult(float(np.mean(errs)), len(errs), skipped)
