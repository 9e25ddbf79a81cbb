"""Synthetic IMU + LiDAR sequences with exact ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .bundle import SequenceBundle
from .evaluation import Trajectory
from .imu import NavState

GRAVITY = (0.0, 0.0, -9.81)
RECIPES = ("figure-eight", "polyline", "random-smooth", "static")


@dataclass
class SimConfig:
    duration: float = 120.0
    scan_rate: float = 5.0
    imu_rate: float = 200.0
    trajectory: str = "figure-eight"
    gyro_bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    accel_bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    gyro_noise: float = 0.0
    accel_noise: float = 0.0
    landmarks: int = 4000
    room_extent: float = 60.0
    points_per_scan: int = 800
    lidar_range: float = 25.0
    lidar_noise: float = 0.0
    gravity: list = field(default_factory=lambda: list(GRAVITY))
    seed: int = 0

    def __post_init__(self):
        if self.trajectory not in RECIPES:
            raise ValueError(f"unknown trajectory recipe {self.trajectory!r}")
        if self.scan_rate <= 0 or self.imu_rate <= 0 or self.duration <= 0:
            raise ValueError("rates and duration must be positive")
        if self.imu_rate < 10 * self.scan_rate:
            raise ValueError("imu_rate must be at least 10x scan_rate")
        ratio = self.imu_rate / self.scan_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu_rate must be an integer multiple of scan_rate")


# ---------------------------------------------------------------- trajectories
#
# Each recipe returns a callable t -> (p, v, a, euler, euler_rate) on arrays of
# times, with euler = (roll, pitch, yaw) in the ZYX convention.


def _heading(v, a):
    yaw = np.arctan2(v[:, 1], v[:, 0])
    sp2 = v[:, 0] ** 2 + v[:, 1] ** 2
    yaw_rate = (v[:, 0] * a[:, 1] - v[:, 1] * a[:, 0]) / np.maximum(sp2, 1e-12)
    return yaw, yaw_rate


def _figure_eight(cfg, rng):
    A, B, H = 12.0, 6.0, 1.0
    period = 40.0
    w = 2 * np.pi / period
    zamp = 0.3
    wobble_rng = np.random.default_rng(rng.integers(2**32))

    def f(t):
        t = np.asarray(t, dtype=float)
        p = np.stack([A * np.sin(w * t), B * np.sin(2 * w * t), H + zamp * np.sin(3 * w * t)], axis=1)
        v = np.stack([A * w * np.cos(w * t), 2 * B * w * np.cos(2 * w * t), 3 * zamp * w * np.cos(3 * w * t)], axis=1)
        a = np.stack(
            [-A * w * w * np.sin(w * t), -4 * B * w * w * np.sin(2 * w * t), -9 * zamp * w * w * np.sin(3 * w * t)],
            axis=1,
        )
        return p, v, a

    return _with_heading(f, wobble_rng)


def _spline_recipe(waypoints, times, rng):
    cs = CubicSpline(times, waypoints, axis=0, bc_type="periodic")
    wobble_rng = np.random.default_rng(rng.integers(2**32))

    def f(t):
        t = np.asarray(t, dtype=float)
        return cs(t), cs(t, 1), cs(t, 2)

    return _with_heading(f, wobble_rng)


def _with_heading(f, wobble_rng):
    amp = wobble_rng.uniform(0.02, 0.05, size=2)
    freq = wobble_rng.uniform(0.1, 0.3, size=2) * 2 * np.pi
    phase = wobble_rng.uniform(0, 2 * np.pi, size=2)

    def g(t):
        p, v, a = f(t)
        yaw, yaw_rate = _heading(v, a)
        roll = amp[0] * np.sin(freq[0] * t + phase[0])
        pitch = amp[1] * np.sin(freq[1] * t + phase[1])
        droll = amp[0] * freq[0] * np.cos(freq[0] * t + phase[0])
        dpitch = amp[1] * freq[1] * np.cos(freq[1] * t + phase[1])
        return p, v, a, np.stack([roll, pitch, yaw], 1), np.stack([droll, dpitch, yaw_rate], 1)

    return g


def _polyline(cfg, rng):
    corners = np.array([[-12, -8], [12, -8], [14, 6], [-4, 10], [-14, 2]], dtype=float)
    pts = np.vstack([corners, corners[:1]])
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    speed = 1.5
    times = np.concatenate([[0.0], np.cumsum(seg_len / speed)])
    way = np.column_stack([pts, np.ones(len(pts))])
    return _spline_recipe(way, times, rng)


def _random_smooth(cfg, rng):
    n = max(6, int(cfg.duration / 4.0))
    half = 0.3 * cfg.room_extent
    way = np.column_stack([rng.uniform(-half, half, size=(n, 2)), rng.uniform(0.5, 1.5, size=n)])
    way = np.vstack([way, way[:1]])
    seg_len = np.linalg.norm(np.diff(way, axis=0), axis=1)
    times = np.concatenate([[0.0], np.cumsum(seg_len / 1.5)])
    return _spline_recipe(way, times, rng)


def _static(cfg, rng):
    def g(t):
        t = np.asarray(t, dtype=float)
        n = len(t)
        p = np.tile([0.0, 0.0, 1.0], (n, 1))
        euler = np.tile([0.05, -0.03, 0.4], (n, 1))
        return p, np.zeros((n, 3)), np.zeros((n, 3)), euler, np.zeros((n, 3))

    return g


def euler_to_matrix(euler: np.ndarray) -> np.ndarray:
    """ZYX: ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    r, p, y = euler[..., 0], euler[..., 1], euler[..., 2]
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    R = np.empty(euler.shape[:-1] + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def body_rate(euler: np.ndarray, euler_rate: np.ndarray) -> np.ndarray:
    r, p = euler[..., 0], euler[..., 1]
    dr, dp, dy = euler_rate[..., 0], euler_rate[..., 1], euler_rate[..., 2]
    return np.stack(
        [
            dr - dy * np.sin(p),
            dp * np.cos(r) + dy * np.sin(r) * np.cos(p),
            -dp * np.sin(r) + dy * np.cos(r) * np.cos(p),
        ],
        axis=-1,
    )


_RECIPES = {
    "figure-eight": _figure_eight,
    "polyline": _polyline,
    "random-smooth": _random_smooth,
    "static": _static,
}


def motion_model(cfg: SimConfig, rng: np.random.Generator):
    return _RECIPES[cfg.trajectory](cfg, rng)


def ideal_imu(motion, t, gravity):
    """Noise-free body rates and specific force at times ``t``."""
    p, v, a, euler, deuler = motion(t)
    R = euler_to_matrix(euler)
    omega = body_rate(euler, deuler)
    accel = np.einsum("nji,nj->ni", R, a - np.asarray(gravity))
    return omega, accel, R, v, p


# ---------------------------------------------------------------- scene


def make_landmarks(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    half = cfg.room_extent / 2
    xy = rng.uniform(-half, half, size=(cfg.landmarks, 2))
    z = rng.uniform(-1.0, 5.0, size=cfg.landmarks)
    return np.column_stack([xy, z])


def scan_landmarks(landmarks, R, p, cfg: SimConfig, rng) -> np.ndarray:
    local = (landmarks - p) @ R
    dist = np.linalg.norm(local, axis=1)
    idx = np.flatnonzero(dist <= cfg.lidar_range)
    idx = idx[np.argsort(dist[idx], kind="stable")][: cfg.points_per_scan]
    pts = local[np.sort(idx)]
    if cfg.lidar_noise > 0:
        pts = pts + rng.normal(scale=cfg.lidar_noise, size=pts.shape)
    return pts


def simulate(cfg: SimConfig) -> SequenceBundle:
    rng = np.random.default_rng(cfg.seed)
    motion = motion_model(cfg, rng)
    landmarks = make_landmarks(cfg, rng)

    n_imu = int(round(cfg.duration * cfg.imu_rate))
    stride = int(round(cfg.imu_rate / cfg.scan_rate))
    imu_t = np.arange(n_imu + 1) / cfg.imu_rate
    omega, accel, R, v, p = ideal_imu(motion, imu_t, cfg.gravity)

    gyro = omega + np.asarray(cfg.gyro_bias, dtype=float)
    acc = accel + np.asarray(cfg.accel_bias, dtype=float)
    if cfg.gyro_noise > 0:
        gyro = gyro + rng.normal(scale=cfg.gyro_noise, size=gyro.shape)
    if cfg.accel_noise > 0:
        acc = acc + rng.normal(scale=cfg.accel_noise, size=acc.shape)

    scan_idx = np.arange(0, n_imu + 1, stride)
    scans = [scan_landmarks(landmarks, R[k], p[k], cfg, rng) for k in scan_idx]
    gt = Trajectory(imu_t, R, p, v)
    return SequenceBundle(
        imu_t=imu_t,
        gyro=gyro,
        accel=acc,
        scan_times=imu_t[scan_idx].copy(),
        scans=scans,
        gravity=np.asarray(cfg.gravity, dtype=float),
        initial_state=NavState(R[0], v[0], p[0], imu_t[0]),
        groundtruth=gt,
        meta={"imu_rate": cfg.imu_rate, "scan_rate": cfg.scan_rate, "extrinsics": np.eye(4).tolist()},
    )
