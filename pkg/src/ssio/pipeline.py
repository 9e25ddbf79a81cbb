"""Stage runner: pseudo-label -> gmm-fit -> train -> infer -> eval."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bundle import SequenceBundle, export_bundle, ingest
from .config import PipelineConfig
from .correction import ETA_FLOOR, TrainItem, WindowModel, dumps_document, segment_features, softplus, train
from .evaluation import IntervalEstimate, MetricsReport, Trajectory, ape, read_tum, rpe_fixed_interval, write_tum
from .imu import NavState, PreintDelta, preintegrate_batch, propagate_state, split_segments, stack_segments
from .motion import balance_weights, descriptors, fit_gmm, sample_weight, save_gmm, write_bic_table
from .pgo import Graph, IcpEdge, ImuEdge, dump_graph, solve_chunked
from .pseudolabel import dead_reckon, generate, read_table, register_sequence, write_table
from .registration import PointCloud, default_tau, symmetric_overlap
from .sim import simulate

log = logging.getLogger(__name__)

STAGES = ("pseudo-label", "gmm-fit", "train", "infer", "eval")

PSEUDO_LABELS = "pseudo_labels.txt"
TRAIN_GRAPH = "graph_training.txt"
GMM = "gmm.json"
BIC = "bic.txt"
SAMPLE_WEIGHTS = "sample_weights.txt"
MODEL = "model.json"
HISTORY = "train_history.txt"
TRAJ = "trajectory.tum"
TRAJ_BASE = "trajectory_uncorrected.tum"
INFER_GRAPH = "graph_inference.txt"
METRICS = "metrics.json"


class MissingArtifactError(RuntimeError):
    pass


class NoGroundTruthError(RuntimeError):
    pass


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path.name} not found in {path.parent}; run the {stage} stage first")
    return path


def scan_segments(bundle: SequenceBundle):
    return split_segments(bundle.imu_t, bundle.gyro, bundle.accel, bundle.scan_times)


def corrected_deltas(model: WindowModel, segs) -> list[PreintDelta]:
    """Apply the model to every segment and preintegrate with covariance."""
    raw = model.predict_raw(segment_features(segs))
    gyro, accel, dt = stack_segments(segs)
    mask = (dt > 0)[..., None]
    gyro = gyro + raw[:, None, 0:3] * mask
    accel = accel + raw[:, None, 3:6] * mask
    eta = np.broadcast_to((softplus(raw[:, 6:]) + ETA_FLOOR)[:, None, :], gyro.shape[:2] + (6,))
    dR, dv, dp, cov = preintegrate_batch(gyro, accel, dt, eta=eta)
    return [PreintDelta(dR[k], dv[k], dp[k], cov[k]) for k in range(len(segs))]


def untrained_model(cfg: PipelineConfig, segs) -> WindowModel:
    model = WindowModel(cfg.model.hidden, seed=cfg.seed, init_scale=cfg.model.init_scale)
    model.fit_normalization(segment_features(segs))
    return model


# ---------------------------------------------------------------- stages


def stage_pseudo_label(bundle, cfg: PipelineConfig, out: Path):
    res = generate(bundle, cfg.icp, cfg.weights, cfg.solver, cfg.chunk, cfg.overlap_tau)
    write_table(out / PSEUDO_LABELS, res.labels)
    (out / TRAIN_GRAPH).write_text(dump_graph(res.graph))
    return res


def stage_gmm_fit(bundle, cfg: PipelineConfig, out: Path):
    segs = scan_segments(bundle)
    Z, stats = descriptors(segs, cfg.window_length)
    fit = fit_gmm(Z, cfg.gmm.candidates, cfg.seed)
    bal = balance_weights(fit.model, Z, cfg.gmm.beta)
    w = sample_weight(fit.model, bal, Z)
    save_gmm(out / GMM, fit.model, stats, bal)
    write_bic_table(out / BIC, fit.table)
    with open(out / SAMPLE_WEIGHTS, "w") as fh:
        fh.write("# t0 weight\n")
        for s, wn in zip(segs, w):
            fh.write(f"{s.t_start!r} {float(wn)!r}\n")
    log.info("gmm: G=%d, weights in [%.3f, %.3f]", fit.model.G, float(w.min()), float(w.max()))
    return fit, w


def _read_weights(path: Path, labels) -> np.ndarray:
    rows = np.loadtxt(path, comments="#", ndmin=2)
    lookup = {float(t): float(w) for t, w in rows}
    try:
        return np.array([lookup[float(lb.t0)] for lb in labels])
    except KeyError as exc:
        raise ValueError(f"{path}: no weight for segment starting at {exc.args[0]}") from None


def stage_train(bundle, cfg: PipelineConfig, out: Path):
    labels = read_table(_need(out / PSEUDO_LABELS, "pseudo-label"))
    segs = scan_segments(bundle)
    if len(segs) != len(labels):
        raise ValueError(f"{len(labels)} pseudo-labels for {len(segs)} segments")
    wpath = out / SAMPLE_WEIGHTS
    if wpath.exists():
        weights = _read_weights(wpath, labels)
    else:
        log.warning("no %s; training with unit weights", SAMPLE_WEIGHTS)
        weights = np.ones(len(labels))
    items = [TrainItem(s, lb.start, lb.end, float(w)) for s, lb, w in zip(segs, labels, weights)]
    model = WindowModel(cfg.model.hidden, seed=cfg.seed, init_scale=cfg.model.init_scale)
    res = train(model, items, cfg.train, bundle.gravity)
    model.save(out / MODEL)
    with open(out / HISTORY, "w") as fh:
        fh.write("# epoch loss\n")
        for k, val in enumerate(res.history):
            fh.write(f"{k} {val!r}\n")
    log.info("train: loss %.6g -> %.6g", res.history[0], res.history[-1])
    return res


def estimate_trajectory(bundle, cfg: PipelineConfig, model: WindowModel, icp=None, clouds=None):
    """Corrected preintegration fused with scan registration by the adaptive graph."""
    segs = scan_segments(bundle)
    deltas = corrected_deltas(model, segs)
    clouds = clouds or [PointCloud(s) for s in bundle.scans]
    icp = icp or register_sequence(clouds, cfg.icp)
    times = bundle.scan_times
    dts = np.diff(times)
    g = bundle.gravity
    icp_edges = []
    for k, r in enumerate(icp):
        tau = cfg.overlap_tau if cfg.overlap_tau is not None else default_tau(clouds[k])
        icp_edges.append(IcpEdge(k, r.transform, symmetric_overlap(r.transform, clouds[k], clouds[k + 1], tau)))
    x0 = bundle.start_state()
    x0 = NavState(x0.R, x0.v, x0.p, times[0])

    def init(anchor, lo, hi):
        return dead_reckon(anchor, deltas[lo : hi - 1], dts[lo : hi - 1], g)

    graph = Graph(init(x0, 0, len(times)), icp_edges, [ImuEdge(k, d, h) for k, (d, h) in enumerate(zip(deltas, dts))], g)
    solved, _ = solve_chunked(graph, cfg.weights, "inference", cfg.solver, cfg.chunk, init=init)
    return Trajectory.from_states(solved.nodes), solved


def stage_infer(bundle, cfg: PipelineConfig, out: Path):
    model = WindowModel.load(_need(out / MODEL, "train"))
    clouds = [PointCloud(s) for s in bundle.scans]
    icp = register_sequence(clouds, cfg.icp)
    traj, graph = estimate_trajectory(bundle, cfg, model, icp, clouds)
    base, _ = estimate_trajectory(bundle, cfg, untrained_model(cfg, scan_segments(bundle)), icp, clouds)
    write_tum(out / TRAJ, traj)
    write_tum(out / TRAJ_BASE, base)
    (out / INFER_GRAPH).write_text(dump_graph(graph))
    return traj, base


def rpe_intervals(bundle, model: WindowModel, interval: float):
    """Re-run the integrator over each scan interval from the ground-truth state."""
    gt = bundle.groundtruth
    segs = [s for s in scan_segments(bundle) if abs(s.duration - interval) <= 1e-3]
    deltas = corrected_deltas(model, segs)
    out = []
    for s, d in zip(segs, deltas):
        j = gt.lookup(s.t_start)
        if j is None:
            continue
        start = gt.state(j)
        out.append(IntervalEstimate(start, propagate_state(start, d, bundle.gravity, s.duration)))
    return out


def stage_eval(bundle, cfg: PipelineConfig, out: Path) -> dict:
    if bundle.groundtruth is None:
        raise NoGroundTruthError("no ground truth")
    gt = bundle.groundtruth
    est = read_tum(_need(out / TRAJ, "infer"))
    base = read_tum(_need(out / TRAJ_BASE, "infer"))
    model = WindowModel.load(_need(out / MODEL, "train"))
    rpe_c = rpe_fixed_interval(rpe_intervals(bundle, model, cfg.rpe_interval), gt, cfg.rpe_interval)
    rpe_b = rpe_fixed_interval(
        rpe_intervals(bundle, untrained_model(cfg, scan_segments(bundle)), cfg.rpe_interval), gt, cfg.rpe_interval
    )
    corrected = MetricsReport(ape(est, gt), rpe_c.rpe, cfg.rpe_interval, rpe_c.count, rpe_c.skipped)
    baseline = MetricsReport(ape(base, gt), rpe_b.rpe, cfg.rpe_interval, rpe_b.count, rpe_b.skipped)
    report = {
        "format": "ssio.metrics",
        "version": 1,
        "corrected": corrected.to_dict(),
        "uncorrected": baseline.to_dict(),
        "ape_ratio": corrected.ape / baseline.ape if baseline.ape > 0 else None,
    }
    (out / METRICS).write_text(dumps_document(report))
    return report


def run_pipeline(bundle: SequenceBundle, cfg: PipelineConfig, stages=STAGES, out=".") -> dict | None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s): {', '.join(sorted(unknown))}")
    report = None
    for stage in STAGES:
        if stage not in stages:
            continue
        log.info("stage %s", stage)
        if stage == "pseudo-label":
            stage_pseudo_label(bundle, cfg, out)
        elif stage == "gmm-fit":
            stage_gmm_fit(bundle, cfg, out)
        elif stage == "train":
            stage_train(bundle, cfg, out)
        elif stage == "infer":
            stage_infer(bundle, cfg, out)
        else:
            report = stage_eval(bundle, cfg, out)
    return report


def load_or_simulate(cfg: PipelineConfig, out: Path, bundle_dir=None) -> SequenceBundle:
    """Ingest ``bundle_dir`` (or ``out/bundle``), simulating it first if absent."""
    path = Path(bundle_dir) if bundle_dir else out / "bundle"
    if not (path / "imu.csv").exists():
        if bundle_dir:
            raise MissingArtifactError(f"no bundle at {path}")
        export_bundle(simulate(cfg.sim), path)
    return ingest(path)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
