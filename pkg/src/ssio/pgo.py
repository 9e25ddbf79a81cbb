"""Pose graph over (R, v, p) nodes with ICP and preintegrated IMU edges.

Two costs share one residual layout. The training cost weights every block
with a fixed scalar; the inference cost scales ICP blocks by the overlap score
and whitens IMU blocks with their propagated covariance. Both are minimized by
a dense Levenberg-Marquardt solver with numerical Jacobians.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, exp_so3, log_so3, renormalize
from .imu import NavState, PreintDelta

log = logging.getLogger(__name__)

GRAPH_HEADER = "# pgo-graph v1"
COST_FLOOR = 1e-24


class PgoError(RuntimeError):
    pass


class DegenerateInformationError(ValueError):
    pass


@dataclass
class IcpEdge:
    i: int
    dT: Pose
    overlap: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")


@dataclass
class ImuEdge:
    i: int
    delta: PreintDelta
    dt: float

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("IMU edge dt must be positive")


@dataclass
class InfoWeights:
    w1: float = 10.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    kappa_r: float = 1.0
    kappa_p: float = 1.0
    tau_R: float = 1.0
    tau_v: float = 1.0
    tau_p: float = 1.0

    def __post_init__(self):
        for k, val in vars(self).items():
            if not val > 0:
                raise ValueError(f"weight {k} must be positive")

    def scaled(self, c: float) -> InfoWeights:
        return InfoWeights(**{k: c * val for k, val in vars(self).items()})


@dataclass
class SolverConfig:
    max_iterations: int = 100
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    cost_tol: float = 1e-12
    step_tol: float = 1e-10
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.max_iterations <= 0 or self.lambda_init <= 0 or self.cost_tol <= 0 or self.step_tol <= 0:
            raise ValueError("solver settings must be positive")
        if not self.lambda_up > 1 > self.lambda_down > 0:
            raise ValueError("need lambda_up > 1 > lambda_down > 0")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")


@dataclass
class Graph:
    nodes: list
    icp_edges: list = field(default_factory=list)
    imu_edges: list = field(default_factory=list)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        n = len(self.nodes)
        for e in list(self.icp_edges) + list(self.imu_edges):
            if not 0 <= e.i < n - 1:
                raise ValueError(f"edge at index {e.i} does not join consecutive nodes of a {n}-node graph")

    def arrays(self):
        R = np.array([s.R for s in self.nodes])
        v = np.array([s.v for s in self.nodes])
        p = np.array([s.p for s in self.nodes])
        return R, v, p

    def with_states(self, R, v, p) -> Graph:
        nodes = [NavState(R[k], v[k], p[k], s.t) for k, s in enumerate(self.nodes)]
        return Graph(nodes, self.icp_edges, self.imu_edges, self.gravity)


@dataclass
class LmReport:
    iterations: int
    accepted: int
    initial_cost: float
    final_cost: float
    costs: list
    converged: bool
    reason: str


# ---------------------------------------------------------------- residuals


class _Terms:
    """Edge data stacked into arrays, plus the per-block whitening."""

    def __init__(self, graph: Graph, w: InfoWeights, mode: str):
        if mode not in ("training", "inference"):
            raise ValueError(f"unknown cost mode {mode!r}")
        self.gravity = graph.gravity
        ie = graph.icp_edges
        me = graph.imu_edges
        self.icp_i = np.array([e.i for e in ie], dtype=int)
        self.icp_R = np.array([e.dT.R for e in ie]).reshape(-1, 3, 3)
        self.icp_t = np.array([e.dT.t for e in ie]).reshape(-1, 3)
        self.imu_i = np.array([e.i for e in me], dtype=int)
        self.imu_dR = np.array([e.delta.dR for e in me]).reshape(-1, 3, 3)
        self.imu_dv = np.array([e.delta.dv for e in me]).reshape(-1, 3)
        self.imu_dp = np.array([e.delta.dp for e in me]).reshape(-1, 3)
        self.imu_dt = np.array([e.dt for e in me], dtype=float)
        nI, nM = len(ie), len(me)
        if mode == "training":
            self.icp_scale = np.tile(np.sqrt([w.w1] * 6), (nI, 1))
            eye = np.eye(3)
            self.white = np.tile(eye, (nM, 3, 1, 1)) * np.sqrt([w.w2, w.w3, w.w4])[None, :, None, None]
        else:
            s = np.array([e.overlap for e in ie], dtype=float).reshape(-1, 1)
            self.icp_scale = np.sqrt(s * np.r_[[w.kappa_r] * 3, [w.kappa_p] * 3][None, :])
            self.white = np.empty((nM, 3, 3, 3))
            taus = (w.tau_R, w.tau_v, w.tau_p)
            for k, e in enumerate(me):
                for b in range(3):
                    self.white[k, b] = np.sqrt(taus[b]) * _whitener(e.delta.cov[3 * b : 3 * b + 3, 3 * b : 3 * b + 3], e.i, b)

    def icp(self, R, p):
        i = self.icp_i
        if len(i) == 0:
            return np.zeros((0, 6))
        Ri = R[i]
        dR = np.einsum("nji,njk->nik", Ri, R[i + 1])
        dt = np.einsum("nji,nj->ni", Ri, p[i + 1] - p[i])
        rr = log_so3(np.einsum("nji,njk->nik", self.icp_R, dR))
        rt = np.einsum("nji,nj->ni", self.icp_R, dt - self.icp_t)
        return np.concatenate([rr, rt], axis=1) * self.icp_scale

    def imu(self, R, v, p):
        i = self.imu_i
        if len(i) == 0:
            return np.zeros((0, 9))
        g = self.gravity
        dt = self.imu_dt[:, None]
        Ri = R[i]
        rr = log_so3(np.einsum("nji,njk->nik", self.imu_dR, np.einsum("nji,njk->nik", Ri, R[i + 1])))
        dv_w = v[i + 1] - v[i] - g * dt
        dp_w = p[i + 1] - p[i] - v[i] * dt - 0.5 * g * dt * dt
        rv = np.einsum("nji,nj->ni", Ri, dv_w) - self.imu_dv
        rp = np.einsum("nji,nj->ni", Ri, dp_w) - self.imu_dp
        raw = np.stack([rr, rv, rp], axis=1)
        return np.einsum("nbij,nbj->nbi", self.white, raw).reshape(-1, 9)

    def blocks(self, R, v, p):
        return self.icp(R, p), self.imu(R, v, p)


def _whitener(S: np.ndarray, edge: int, block: int) -> np.ndarray:
    """Matrix ``W`` with ``W^T W = S^-1`` (inverse Cholesky factor)."""
    S = 0.5 * (S + S.T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise DegenerateInformationError(f"IMU edge {edge}: covariance block {block} is not positive definite") from None
    if np.min(np.diag(L)) <= 1e-150:
        raise DegenerateInformationError(f"IMU edge {edge}: covariance block {block} is singular")
    return np.linalg.inv(L)


def _flatten(r_icp, r_imu):
    return np.concatenate([r_icp.reshape(-1), r_imu.reshape(-1)])


def evaluate(graph: Graph, w: InfoWeights, mode: str):
    terms = _Terms(graph, w, mode)
    r = _flatten(*terms.blocks(*graph.arrays()))
    return float(r @ r), r


def training_cost(graph: Graph, w: InfoWeights | None = None):
    return evaluate(graph, w or InfoWeights(), "training")


def inference_cost(graph: Graph, w: InfoWeights | None = None):
    return evaluate(graph, w or InfoWeights(), "inference")


# ---------------------------------------------------------------- solver


def retract(R, v, p, delta):
    """Apply a stacked ``(N, 9)`` local update ``[dtheta, dv, dp]``."""
    return R @ exp_so3(delta[:, :3]), v + delta[:, 3:6], p + delta[:, 6:9]


def jacobian(terms: _Terms, R, v, p, h: float, fixed=(0,)):
    """Central-difference Jacobian of the stacked residual.

    Every edge joins nodes of opposite parity, so perturbing all even (or all
    odd) nodes along one coordinate moves each edge through exactly one of its
    nodes. That gives the full Jacobian in 2 * 9 * 2 vectorized evaluations.
    """
    N = len(R)
    free = np.setdiff1d(np.arange(N), np.asarray(fixed, dtype=int))
    col_of = -np.ones(N, dtype=int)
    col_of[free] = np.arange(len(free))
    nI, nM = len(terms.icp_i), len(terms.imu_i)
    J = np.zeros((6 * nI + 9 * nM, 9 * len(free)))
    rows_icp = np.arange(6 * nI).reshape(nI, 6)
    rows_imu = 6 * nI + np.arange(9 * nM).reshape(nM, 9)
    parity = np.arange(N) % 2
    for c in (0, 1):
        mask = (parity == c) & (col_of >= 0)
        for d in range(9):
            delta = np.zeros((N, 9))
            delta[mask, d] = h
            plus = terms.blocks(*retract(R, v, p, delta))
            minus = terms.blocks(*retract(R, v, p, -delta))
            for rows, idx, rp, rm in ((rows_icp, terms.icp_i, plus[0], minus[0]), (rows_imu, terms.imu_i, plus[1], minus[1])):
                if len(idx) == 0:
                    continue
                node = np.where(idx % 2 == c, idx, idx + 1)
                col = col_of[node]
                ok = col >= 0
                deriv = (rp - rm) / (2 * h)
                J[rows[ok], (9 * col[ok] + d)[:, None]] = deriv[ok]
    return J, free


def solve_lm(graph: Graph, w: InfoWeights | None = None, mode: str = "training", cfg: SolverConfig | None = None, fixed=(0,)):
    """Levenberg-Marquardt over all nodes except those in ``fixed``."""
    w = w or InfoWeights()
    cfg = cfg or SolverConfig()
    if len(graph.nodes) < 2:
        raise ValueError("graph needs at least two nodes")
    terms = _Terms(graph, w, mode)
    R, v, p = graph.arrays()

    def cost_of(R, v, p):
        r = _flatten(*terms.blocks(R, v, p))
        if not np.all(np.isfinite(r)):
            raise PgoError("non-finite residual")
        return float(r @ r), r

    cost, r = cost_of(R, v, p)
    initial = cost
    costs = [cost]
    lam = cfg.lambda_init
    accepted = 0
    reason = "iteration cap"
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if cost <= COST_FLOOR:
            reason, converged = "cost at floor", True
            break
        J, free = jacobian(terms, R, v, p, cfg.fd_step, fixed)
        H = J.T @ J
        grad = J.T @ r
        diag = np.maximum(np.diag(H), 1e-12)
        improved = False
        while lam < 1e16:
            step = np.linalg.solve(H + lam * np.diag(diag), -grad)
            if np.linalg.norm(step) < cfg.step_tol:
                reason, converged = "step below tolerance", True
                break
            delta = np.zeros((len(R), 9))
            delta[free] = step.reshape(-1, 9)
            Rn, vn, pn = retract(R, v, p, delta)
            new_cost, new_r = cost_of(Rn, vn, pn)
            if new_cost < cost:
                rel = (cost - new_cost) / cost
                assert new_cost < cost
                R, v, p, r = renormalize(Rn), vn, pn, new_r
                cost = float(r @ r)
                costs.append(cost)
                accepted += 1
                lam = max(lam * cfg.lambda_down, 1e-12)
                improved = True
                if rel < cfg.cost_tol:
                    reason, converged = "relative decrease below tolerance", True
                break
            lam *= cfg.lambda_up
        if converged:
            break
        if not improved:
            reason, converged = "no decreasing step", True
            break
    report = LmReport(it, accepted, initial, cost, costs, converged, reason)
    log.debug("lm: %s after %d iterations, cost %.3e -> %.3e", reason, it, initial, cost)
    return graph.with_states(R, v, p), report


def solve_chunked(graph: Graph, w: InfoWeights, mode: str, cfg: SolverConfig, chunk: int = 20, init=None):
    """Solve consecutive windows of ``chunk`` nodes, each anchored at the previous window's last node.

    ``init(anchor, lo, hi)`` may return fresh initial states for nodes
    ``lo..hi-1`` given the solved anchor state of node ``lo``.
    """
    if chunk < 2:
        raise ValueError("chunk must hold at least two nodes")
    nodes = [s.copy() for s in graph.nodes]
    reports = []
    start = 0
    N = len(nodes)
    while start < N - 1:
        stop = min(start + chunk, N)
        sub_icp = [IcpEdge(e.i - start, e.dT, e.overlap) for e in graph.icp_edges if start <= e.i < stop - 1]
        sub_imu = [ImuEdge(e.i - start, e.delta, e.dt) for e in graph.imu_edges if start <= e.i < stop - 1]
        if init is not None and start > 0:
            nodes[start:stop] = init(nodes[start], start, stop)
        sub = Graph(nodes[start:stop], sub_icp, sub_imu, graph.gravity)
        solved, rep = solve_lm(sub, w, mode, cfg)
        nodes[start:stop] = solved.nodes
        reports.append(rep)
        start = stop - 1
    return Graph(nodes, graph.icp_edges, graph.imu_edges, graph.gravity), reports


def relative_pose(a: NavState, b: NavState) -> Pose:
    return Pose(a.R.T @ b.R, a.R.T @ (b.p - a.p))


# ---------------------------------------------------------------- text dump


def _fmt(vals) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(vals))


def dump_graph(graph: Graph) -> str:
    out = [GRAPH_HEADER, "gravity " + _fmt(graph.gravity)]
    for k, s in enumerate(graph.nodes):
        out.append(f"node {k} " + _fmt(np.r_[s.t, s.R.ravel(), s.v, s.p]))
    for e in graph.icp_edges:
        out.append(f"icp {e.i} " + _fmt(np.r_[e.overlap, e.dT.R.ravel(), e.dT.t]))
    for e in graph.imu_edges:
        d = e.delta
        out.append(f"imu {e.i} " + _fmt(np.r_[e.dt, d.dR.ravel(), d.dv, d.dp, d.cov.ravel()]))
    return "\n".join(out) + "\n"


def load_graph(text: str) -> Graph:
    lines = text.splitlines()
    if not lines or lines[0].strip() != GRAPH_HEADER:
        raise ValueError(f"line 1: expected {GRAPH_HEADER!r}")
    gravity = None
    nodes, icp, imu = [], [], []
    sizes = {"gravity": 3, "node": 16, "icp": 13, "imu": 97}
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        kind = parts[0]
        if kind not in sizes:
            raise ValueError(f"line {lineno}: unknown record {kind!r}")
        if kind == "gravity":
            head, body = None, parts[1:]
        else:
            try:
                head = int(parts[1])
            except (IndexError, ValueError):
                raise ValueError(f"line {lineno}: bad index") from None
            body = parts[2:]
        if len(body) != sizes[kind]:
            raise ValueError(f"line {lineno}: {kind} needs {sizes[kind]} values, got {len(body)}")
        try:
            x = np.array([float(s) for s in body])
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric value") from None
        if kind == "gravity":
            gravity = x
        elif kind == "node":
            if head != len(nodes):
                raise ValueError(f"line {lineno}: node indices must be contiguous from 0")
            nodes.append(NavState(x[1:10].reshape(3, 3), x[10:13], x[13:16], x[0]))
        elif kind == "icp":
            icp.append(IcpEdge(head, Pose(x[1:10].reshape(3, 3), x[10:13]), x[0]))
        else:
            delta = PreintDelta(x[1:10].reshape(3, 3), x[10:13], x[13:16], x[16:].reshape(9, 9))
            imu.append(ImuEdge(head, delta, x[0]))
    if gravity is None:
        raise ValueError("missing gravity record")
    return Graph(nodes, icp, imu, gravity)
