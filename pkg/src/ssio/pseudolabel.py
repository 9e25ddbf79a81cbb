"""Supervision targets from scan registration fused with IMU through a pose graph."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geom import Pose
from .imu import NavState, PreintDelta, preintegrate_batch, propagate_state, split_segments, stack_segments
from .pgo import Graph, IcpEdge, ImuEdge, InfoWeights, SolverConfig, relative_pose, solve_chunked
from .registration import IcpConfig, IcpResult, PointCloud, default_tau, icp_align, symmetric_overlap

log = logging.getLogger(__name__)

TABLE_HEADER = "# pseudo-labels v1"
ICP, PGO = "ICP", "PGO"


@dataclass
class PseudoLabel:
    t0: float
    t1: float
    dT: Pose
    source: str
    s_icp: float
    s_pgo: float
    start: NavState
    end: NavState

    @property
    def dt(self) -> float:
        return self.t1 - self.t0


def select_source(dT_icp: Pose, dT_pgo: Pose, P_i: PointCloud, P_next: PointCloud, tau: float):
    """Keep the candidate with the higher symmetric overlap; ties keep ICP."""
    s_icp = symmetric_overlap(dT_icp, P_i, P_next, tau)
    s_pgo = symmetric_overlap(dT_pgo, P_i, P_next, tau)
    if s_pgo > s_icp:
        return dT_pgo, PGO, s_icp, s_pgo
    return dT_icp, ICP, s_icp, s_pgo


def make_pseudo_states(T_i: Pose, dT: Pose, dt: float):
    """Next pose and its finite-difference world velocity."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    T_next = T_i @ dT
    return T_next, (T_next.t - T_i.t) / dt


def register_sequence(clouds, cfg: IcpConfig) -> list[IcpResult]:
    """Align each scan to its predecessor, seeding with the previous motion."""
    out = []
    init = Pose.identity()
    for k in range(len(clouds) - 1):
        res = icp_align(clouds[k + 1], clouds[k], init, cfg)
        if not res.converged:
            log.warning("icp %d -> %d did not converge: %s", k, k + 1, res.message or "iteration cap")
        out.append(res)
        init = res.transform
    return out


def raw_deltas(bundle) -> tuple[list, list[PreintDelta]]:
    segs = split_segments(bundle.imu_t, bundle.gyro, bundle.accel, bundle.scan_times)
    gyro, accel, dt = stack_segments(segs)
    dR, dv, dp, _ = preintegrate_batch(gyro, accel, dt)
    return segs, [PreintDelta(dR[k], dv[k], dp[k]) for k in range(len(segs))]


def dead_reckon(anchor: NavState, deltas, dts, gravity, poses=None) -> list[NavState]:
    """Chain states from ``anchor``; rotation/position follow ``poses`` when given."""
    out = [anchor.copy()]
    for k, (d, h) in enumerate(zip(deltas, dts)):
        nxt = propagate_state(out[-1], d, gravity, h)
        if poses is not None:
            T = Pose(out[-1].R, out[-1].p) @ poses[k]
            nxt = NavState(T.R, nxt.v, T.t, nxt.t)
        out.append(nxt)
    return out


@dataclass
class PseudoLabelResult:
    labels: list
    icp: list
    graph: Graph
    segments: list


def generate(bundle, icp_cfg: IcpConfig, weights: InfoWeights, solver: SolverConfig, chunk: int = 20, tau=None) -> PseudoLabelResult:
    clouds = [PointCloud(s) for s in bundle.scans]
    if len(clouds) < 2:
        raise ValueError("need at least two scans")
    icp = register_sequence(clouds, icp_cfg)
    segs, deltas = raw_deltas(bundle)
    times = bundle.scan_times
    dts = np.diff(times)
    g = bundle.gravity
    x0 = bundle.start_state()
    x0 = NavState(x0.R, x0.v, x0.p, times[0])
    dTs = [r.transform for r in icp]

    def init(anchor, lo, hi):
        return dead_reckon(anchor, deltas[lo : hi - 1], dts[lo : hi - 1], g, dTs[lo : hi - 1])

    nodes = init(x0, 0, len(times))
    graph = Graph(
        nodes,
        [IcpEdge(k, dTs[k], 1.0) for k in range(len(dTs))],
        [ImuEdge(k, deltas[k], dts[k]) for k in range(len(deltas))],
        g,
    )
    solved, _ = solve_chunked(graph, weights, "training", solver, chunk, init=init)

    labels = []
    T = Pose(x0.R, x0.p)
    v = x0.v.copy()
    for k in range(len(dTs)):
        t_tau = tau if tau is not None else default_tau(clouds[k])
        dT_pgo = relative_pose(solved.nodes[k], solved.nodes[k + 1])
        dT, src, s_icp, s_pgo = select_source(dTs[k], dT_pgo, clouds[k], clouds[k + 1], t_tau)
        T_next, v_next = make_pseudo_states(T, dT, dts[k])
        labels.append(
            PseudoLabel(times[k], times[k + 1], dT, src, s_icp, s_pgo,
                        NavState(T.R, v, T.t, times[k]), NavState(T_next.R, v_next, T_next.t, times[k + 1]))
        )
        T, v = T_next, v_next
    n_pgo = sum(lb.source == PGO for lb in labels)
    log.info("pseudo-labels: %d segments, %d from ICP, %d from PGO", len(labels), len(labels) - n_pgo, n_pgo)
    return PseudoLabelResult(labels, icp, solved, segs)


# ---------------------------------------------------------------- text table

_COLUMNS = ["t0", "t1", "source", "s_icp", "s_pgo"] + [f"dT{k}" for k in range(12)] + \
    [f"{side}_{q}" for side in ("start", "end") for q in [f"R{k}" for k in range(9)] + ["vx", "vy", "vz", "px", "py", "pz"]]


def _f(vals) -> list[str]:
    return [repr(float(x)) for x in np.ravel(vals)]


def write_table(path, labels) -> None:
    with open(path, "w") as fh:
        fh.write(TABLE_HEADER + "\n")
        fh.write("# " + " ".join(_COLUMNS) + "\n")
        for lb in labels:
            row = _f([lb.t0, lb.t1]) + [lb.source] + _f([lb.s_icp, lb.s_pgo])
            row += _f(np.r_[lb.dT.R.ravel(), lb.dT.t])
            for s in (lb.start, lb.end):
                row += _f(np.r_[s.R.ravel(), s.v, s.p])
            fh.write(" ".join(row) + "\n")


def read_table(path) -> list[PseudoLabel]:
    labels = []
    with open(path) as fh:
        first = fh.readline().strip()
        if first != TABLE_HEADER:
            raise ValueError(f"{path}:1: expected {TABLE_HEADER!r}")
        for lineno, line in enumerate(fh, 2):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != len(_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(_COLUMNS)} columns, got {len(parts)}")
            if parts[2] not in (ICP, PGO):
                raise ValueError(f"{path}:{lineno}: unknown source {parts[2]!r}")
            try:
                x = np.array([float(c) for k, c in enumerate(parts) if k != 2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            t0, t1, s_icp, s_pgo = x[:4]
            dT = Pose(x[4:13].reshape(3, 3), x[13:16])
            st = x[16:31]
            en = x[31:46]
            labels.append(
                PseudoLabel(t0, t1, dT, parts[2], s_icp, s_pgo,
                            NavState(st[:9].reshape(3, 3), st[9:12], st[12:15], t0),
                            NavState(en[:9].reshape(3, 3), en[9:12], en[12:15], t1))
            )
    return labels
