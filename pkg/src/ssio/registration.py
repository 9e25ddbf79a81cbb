"""Point-to-point ICP and nearest-neighbour overlap scores."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom import Pose, exp_so3, log_so3

log = logging.getLogger(__name__)


class PointCloud:
    """Immutable ``(N, 3)`` point set with a lazily built k-d tree."""

    __slots__ = ("points", "frame", "_tree", "_spacing")

    def __init__(self, points, frame: str | None = None):
        pts = np.array(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        pts.flags.writeable = False
        self.points = pts
        self.frame = frame
        self._tree = None
        self._spacing = None

    def __len__(self):
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def nearest(self, query: np.ndarray):
        """Distance and index of the nearest point for each query point."""
        d, i = self.tree.query(np.asarray(query, dtype=float), k=1)
        return d, i

    def median_spacing(self) -> float:
        if self._spacing is None:
            if len(self) < 2:
                raise ValueError("need at least two points to measure spacing")
            d, _ = self.tree.query(self.points, k=2)
            self._spacing = float(np.median(d[:, 1]))
        return self._spacing

    def transformed(self, T: Pose) -> PointCloud:
        return PointCloud(T.apply(self.points), self.frame)


def brute_force_nearest(query: np.ndarray, points: np.ndarray):
    """Exact NN by full distance matrix; ties go to the lowest index."""
    query = np.asarray(query, dtype=float).reshape(-1, 3)
    d2 = ((query[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    idx = np.argmin(d2, axis=1)
    return np.sqrt(d2[np.arange(len(query)), idx]), idx


def default_tau(target: PointCloud) -> float:
    return 2.0 * target.median_spacing()


@dataclass
class IcpConfig:
    """ICP settings.

    The correspondence cutoff starts at ``max_correspondence`` and then tracks
    ``cutoff_rms_factor`` times the previous inlier rms, never going below
    ``min_correspondence``. This drops pairs that only match because the two
    scans cover slightly different regions.
    """

    max_iterations: int = 60
    max_correspondence: float = 1.0
    min_correspondence: float = 0.1
    cutoff_rms_factor: float = 3.0
    tolerance: float = 1e-10

    def __post_init__(self):
        if min(self.max_iterations, self.max_correspondence, self.min_correspondence, self.tolerance) <= 0:
            raise ValueError("ICP settings must be positive")
        if self.min_correspondence > self.max_correspondence:
            raise ValueError("min_correspondence exceeds max_correspondence")
        if self.cutoff_rms_factor <= 0:
            raise ValueError("cutoff_rms_factor must be positive")


@dataclass
class IcpResult:
    transform: Pose
    rms: float
    iterations: int
    converged: bool
    message: str = ""


def kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform with ``dst ~ R src + t``."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    return Pose(R, cd - R @ cs)


def icp_align(source: PointCloud, target: PointCloud, init: Pose | None = None, cfg: IcpConfig | None = None) -> IcpResult:
    """Estimate the transform taking ``source`` coordinates into the ``target`` frame."""
    cfg = cfg or IcpConfig()
    T = init if init is not None else Pose.identity()
    if len(source) < 10 or len(target) < 10:
        raise ValueError("ICP needs at least 10 points per cloud")
    src = source.points
    rms = np.inf
    cutoff = cfg.max_correspondence
    for it in range(1, cfg.max_iterations + 1):
        moved = T.apply(src)
        d, j = target.nearest(moved)
        keep = d <= cutoff
        if keep.sum() < 3:
            msg = f"only {int(keep.sum())} correspondences within {cutoff} m"
            log.debug("icp: %s", msg)
            return IcpResult(T, float(rms), it, False, msg)
        step = kabsch(moved[keep], target.points[j[keep]])
        T = step @ T
        rms = float(np.sqrt(np.mean(np.sum((step.apply(moved[keep]) - target.points[j[keep]]) ** 2, axis=1))))
        size = max(np.linalg.norm(log_so3(step.R)), np.linalg.norm(step.t))
        new_cutoff = min(cfg.max_correspondence, max(cfg.min_correspondence, cfg.cutoff_rms_factor * rms))
        if size < cfg.tolerance and new_cutoff >= cutoff:
            return IcpResult(T, rms, it, True)
        cutoff = min(cutoff, new_cutoff)
    return IcpResult(T, float(rms), cfg.max_iterations, False, "iteration cap reached")


def overlap_ratio(P: PointCloud, Q: PointCloud, tau: float) -> float:
    """Fraction of points of ``P`` whose nearest neighbour in ``Q`` is within ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    d, _ = Q.nearest(P.points)
    return float(np.mean(d <= tau))


def symmetric_overlap(dT: Pose, P_i: PointCloud, P_next: PointCloud, tau: float) -> float:
    """Average of both directed overlaps after moving each cloud into the other's frame.

    ``dT`` maps coordinates of the later scan into the frame of the earlier one.
    """
    fwd = overlap_ratio(P_i, P_next.transformed(dT), tau)
    bwd = overlap_ratio(P_next, P_i.transformed(dT.inverse()), tau)
    return 0.5 * (fwd + bwd)


def perturb(T: Pose, rot: np.ndarray, trans: np.ndarray) -> Pose:
    return Pose(T.R @ exp_so3(np.asarray(rot, dtype=float)), T.t + np.asarray(trans, dtype=float))


# ---------------------------------------------------------------- cloud files


def read_xyz(path) -> PointCloud:
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected 'x y z'")
            try:
                pts.append([float(x) for x in parts[:3]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric coordinate") from None
    return PointCloud(pts)


def write_xyz(path, cloud) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    with open(path, "w") as fh:
        for x, y, z in pts:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_ply(path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}:1: missing 'ply' magic")
    n_vertex = None
    props = []
    in_vertex = False
    body = None
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}:{lineno}: only ascii PLY is supported")
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body = lineno
            break
    if body is None or n_vertex is None:
        raise ValueError(f"{path}: incomplete PLY header")
    try:
        cols = [props.index(c) for c in "xyz"]
    except ValueError:
        raise ValueError(f"{path}: PLY vertex lacks x/y/z properties") from None
    pts = []
    for lineno in range(body + 1, body + 1 + n_vertex):
        if lineno > len(lines):
            raise ValueError(f"{path}:{lineno}: expected {n_vertex} vertices")
        parts = lines[lineno - 1].split()
        try:
            pts.append([float(parts[c]) for c in cols])
        except (ValueError, IndexError):
            raise ValueError(f"{path}:{lineno}: malformed vertex line") from None
    return PointCloud(pts)


def write_ply(path, cloud) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\nproperty double x\nproperty double y\nproperty double z\nend_header\n")
        for x, y, z in pts:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_cloud(path) -> PointCloud:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_xyz(path)
