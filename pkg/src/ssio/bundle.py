"""Sequence bundle: IMU stream, scans, optional ground truth, metadata."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import Trajectory, read_tum, write_tum
from .imu import NavState
from .registration import read_cloud, write_xyz

BUNDLE_FORMAT = "ssio.bundle"
BUNDLE_VERSION = 1
IMU_HEADER = ["t", "wx", "wy", "wz", "ax", "ay", "az"]


@dataclass
class SequenceBundle:
    imu_t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    scan_times: np.ndarray
    scans: list
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    initial_state: NavState | None = None
    groundtruth: Trajectory | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.imu_t = np.asarray(self.imu_t, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        self.scan_times = np.asarray(self.scan_times, dtype=float)
        self.gravity = np.asarray(self.gravity, dtype=float)
        self.scans = [np.asarray(s, dtype=float).reshape(-1, 3) for s in self.scans]
        self.validate()

    def validate(self) -> None:
        n = len(self.imu_t)
        if self.gyro.shape[0] != n or self.accel.shape[0] != n:
            raise ValueError("IMU arrays have inconsistent lengths")
        if np.any(np.diff(self.imu_t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")
        if len(self.scans) != len(self.scan_times):
            raise ValueError("scan list and scan timestamps differ in length")
        if np.any(np.diff(self.scan_times) <= 0):
            raise ValueError("scan timestamps must be strictly increasing")
        for k, ts in enumerate(self.scan_times):
            if ts < self.imu_t[0] or ts > self.imu_t[-1]:
                raise ValueError(f"scan {k} at t={ts} is not bracketed by IMU samples")

    def start_state(self) -> NavState:
        if self.initial_state is not None:
            return self.initial_state.copy()
        if self.groundtruth is not None:
            j = self.groundtruth.lookup(self.scan_times[0])
            if j is not None:
                return self.groundtruth.state(j)
        raise ValueError("bundle has neither an initial state nor ground truth at the first scan")


def _state_doc(s: NavState) -> dict:
    return {"t": s.t, "R": s.R.reshape(-1).tolist(), "v": s.v.tolist(), "p": s.p.tolist()}


def export_bundle(bundle: SequenceBundle, root) -> Path:
    root = Path(root)
    (root / "scans").mkdir(parents=True, exist_ok=True)
    with open(root / "imu.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_HEADER)
        for t, g, a in zip(bundle.imu_t, bundle.gyro, bundle.accel):
            w.writerow([repr(float(x)) for x in (t, *g, *a)])
    with open(root / "scans.txt", "w") as fh:
        for k, (t, pts) in enumerate(zip(bundle.scan_times, bundle.scans)):
            name = f"scans/{k:06d}.xyz"
            write_xyz(root / name, pts)
            fh.write(f"{float(t)!r} {name}\n")
    meta = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "gravity": bundle.gravity.tolist(),
        "meta": bundle.meta,
        "initial_state": _state_doc(bundle.initial_state) if bundle.initial_state is not None else None,
    }
    if bundle.groundtruth is not None:
        gt = bundle.groundtruth
        write_tum(root / "groundtruth.tum", gt)
        if gt.v is not None:
            np.savetxt(root / "groundtruth_velocity.csv", np.column_stack([gt.t, gt.v]), delimiter=",",
                       header="t,vx,vy,vz", comments="", fmt="%.17g")
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return root


def read_imu_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != IMU_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(IMU_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 columns, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric cell") from None
    if len(rows) < 2:
        raise ValueError(f"{path}: fewer than two IMU samples")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1:4], arr[:, 4:7]


def _read_scan_index(path):
    times, files = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'timestamp file'")
            try:
                times.append(float(parts[0]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad timestamp") from None
            files.append(parts[1])
    return times, files


def ingest(root) -> SequenceBundle:
    root = Path(root)
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if meta and meta.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"{meta_path}: not a {BUNDLE_FORMAT} document")
    t, gyro, accel = read_imu_csv(root / "imu.csv")
    times, files = _read_scan_index(root / "scans.txt")
    for k, ts in enumerate(times):
        if ts < t[0] or ts > t[-1]:
            raise ValueError(f"scan {k} ({files[k]}) at t={ts} is not bracketed by IMU samples")
    scans = [read_cloud(root / f).points for f in files]
    gt = None
    if (root / "groundtruth.tum").exists():
        gt = read_tum(root / "groundtruth.tum")
        vpath = root / "groundtruth_velocity.csv"
        if vpath.exists():
            v = np.loadtxt(vpath, delimiter=",", skiprows=1, ndmin=2)
            if len(v) != len(gt) or not np.array_equal(v[:, 0], gt.t):
                raise ValueError(f"{vpath}: timestamps do not match groundtruth.tum")
            gt = Trajectory(gt.t, gt.R, gt.p, v[:, 1:4])
    init = meta.get("initial_state")
    init_state = None
    if init is not None:
        init_state = NavState(np.reshape(init["R"], (3, 3)), init["v"], init["p"], init["t"])
    return SequenceBundle(
        imu_t=t,
        gyro=gyro,
        accel=accel,
        scan_times=np.array(times),
        scans=scans,
        gravity=np.asarray(meta.get("gravity", [0.0, 0.0, -9.81])),
        initial_state=init_state,
        groundtruth=gt,
        meta=meta.get("meta", {}),
    )
