import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ssio.geom import Pose
from ssio.imu import ImuSegment, NavState, PreintDelta, propagate_state
from ssio.pgo import Graph, IcpEdge, ImuEdge


class SmoothSignal:
    """Random sum of sinusoids for gyro and accel, plus a gravity-like offset on accel z."""

    def __init__(self, rng, gyro_amp=0.5, accel_amp=1.0, freqs=(0.2, 2.0), terms=3):
        self.f = rng.uniform(*freqs, size=(terms, 6))
        self.phase = rng.uniform(0, 2 * np.pi, size=(terms, 6))
        self.amp = np.concatenate([np.full((terms, 3), gyro_amp), np.full((terms, 3), accel_amp)], axis=1) / terms
        self.offset = np.r_[0, 0, 0, 0, 0, 9.81]

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))[:, None, None]
        return (self.amp * np.sin(2 * np.pi * self.f * t + self.phase)).sum(axis=1) + self.offset


def sampled_segment(signal, t0, duration, rate):
    n = int(round(duration * rate))
    t = t0 + np.arange(n) / rate
    m = signal(t)
    return ImuSegment(t, m[:, :3], m[:, 3:], t0, t0 + duration)


def fine_oracle(signal, t0, duration, rate=20000.0):
    """Step-by-step integration of the continuous signal, written without the package kernels."""
    n = int(round(duration * rate))
    h = duration / n
    t = t0 + np.arange(n) * h
    m = signal(t)
    R = np.eye(3)
    v = np.zeros(3)
    p = np.zeros(3)
    steps = Rotation.from_rotvec(m[:, :3] * h).as_matrix()
    for k in range(n):
        a = R @ m[k, 3:]
        p = p + v * h + 0.5 * a * h * h
        v = v + a * h
        R = R @ steps[k]
    return R, v, p


def random_pose(rng, rot=np.pi, trans=5.0):
    return Pose(Rotation.from_rotvec(_rand_rotvec(rng, rot)).as_matrix(), rng.uniform(-trans, trans, 3))


def _rand_rotvec(rng, max_angle):
    axis = rng.normal(size=3)
    return axis / np.linalg.norm(axis) * rng.uniform(0, max_angle)


def random_state(rng, t=0.0):
    return NavState(Rotation.from_rotvec(_rand_rotvec(rng, np.pi)).as_matrix(), rng.normal(size=3), rng.normal(size=3) * 3, t)


def consistent_chain(rng, n_nodes=20, dt=0.2, gravity=(0.0, 0.0, -9.81)):
    """Node states plus exactly consistent ICP poses and preintegrated deltas between them."""
    g = np.asarray(gravity)
    nodes = [NavState(np.eye(3), rng.normal(size=3), np.zeros(3), 0.0)]
    deltas = []
    for k in range(n_nodes - 1):
        d = PreintDelta(
            Rotation.from_rotvec(rng.normal(scale=0.1, size=3)).as_matrix(),
            rng.normal(scale=0.5, size=3),
            rng.normal(scale=0.2, size=3),
            np.eye(9) * 1e-4,
        )
        deltas.append(d)
        nodes.append(propagate_state(nodes[-1], d, g, dt))
    poses = [Pose(a.R.T @ b.R, a.R.T @ (b.p - a.p)) for a, b in zip(nodes[:-1], nodes[1:])]
    return nodes, poses, deltas


def asymmetric_cloud(rng, n=2000):
    """Points on a few randomly placed, differently sized planar patches and a bump."""
    parts = []
    k = n // 5
    for size, center in (((6, 4), (0, 0, -1)), ((3, 5), (2, 1, 2)), ((2, 2), (-3, 2, 1)), ((4, 1), (1, -3, 0.5))):
        uv = rng.uniform(-0.5, 0.5, size=(k, 2)) * size
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        basis = np.linalg.svd(normal[None])[2][1:]
        parts.append(np.asarray(center) + uv @ basis)
    r = rng.uniform(0, 1.5, size=n - 4 * k)
    a = rng.uniform(0, 2 * np.pi, size=n - 4 * k)
    parts.append(np.column_stack([r * np.cos(a) - 2, r * np.sin(a) - 2, np.exp(-r * r)]))
    return np.concatenate(parts)


# criterion number -> "PASS ..." / "FAIL ..." line, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def chain_graph(rng, n_nodes=20, dt=0.2):
    """Consistent graph with ICP and IMU edges plus the generating states."""
    nodes, poses, deltas = consistent_chain(rng, n_nodes, dt)
    graph = Graph(
        [s.copy() for s in nodes],
        [IcpEdge(k, T, 1.0) for k, T in enumerate(poses)],
        [ImuEdge(k, d, dt) for k, d in enumerate(deltas)],
    )
    return graph, nodes


def perturb_nodes(rng, nodes, trans=0.1, rot=0.05, fixed=(0,)):
    out = []
    for k, s in enumerate(nodes):
        if k in fixed:
            out.append(s.copy())
            continue
        dth = Rotation.from_rotvec(_rand_rotvec(rng, rot)).as_matrix()
        dp = rng.uniform(-1, 1, 3)
        dv = rng.uniform(-1, 1, 3)
        out.append(
            NavState(
                s.R @ dth,
                s.v + dv / np.linalg.norm(dv) * rng.uniform(0, trans),
                s.p + dp / np.linalg.norm(dp) * rng.uniform(0, trans),
                s.t,
            )
        )
    return out
