import json
import shutil

import numpy as np
import pytest

from ssio import cli
from ssio.bundle import SequenceBundle, export_bundle, ingest, read_imu_csv
from ssio.config import ConfigError, PipelineConfig, config_from_dict, load_config
from ssio.geom import log_so3
from ssio.imu import preintegrate
from ssio.pipeline import (
    METRICS,
    MODEL,
    PSEUDO_LABELS,
    TRAJ,
    TRAJ_BASE,
    MissingArtifactError,
    NoGroundTruthError,
    run_pipeline,
    scan_segments,
    stage_eval,
)
from ssio.sim import RECIPES, SimConfig, ideal_imu, make_landmarks, motion_model, simulate

SHORT = {
    "sim": {"duration": 8.0, "landmarks": 1500, "points_per_scan": 300, "gyro_bias": [0.02] * 3, "accel_bias": [0.05] * 3},
    "train": {"epochs": 5, "gradient": "analytic"},
    "gmm": {"candidates": [1, 2]},
    "model": {"hidden": 4},
}


def small_sim(**kw):
    base = dict(duration=2.0, landmarks=300, points_per_scan=40)
    base.update(kw)
    return SimConfig(**base)


def relative_truth(bundle, k):
    gt, g = bundle.groundtruth, bundle.gravity
    i, j = gt.lookup(bundle.scan_times[k]), gt.lookup(bundle.scan_times[k + 1])
    T = gt.t[j] - gt.t[i]
    Ri = gt.R[i]
    return Ri.T @ gt.R[j], Ri.T @ (gt.v[j] - gt.v[i] - g * T), Ri.T @ (gt.p[j] - gt.p[i] - gt.v[i] * T - 0.5 * g * T * T)


# ---------------------------------------------------------------- simulator


@pytest.mark.parametrize("recipe", RECIPES)
def test_simulated_imu_reproduces_truth(recipe):
    b = simulate(SimConfig(duration=10.0, trajectory=recipe, landmarks=100, points_per_scan=10))
    for k, seg in enumerate(scan_segments(b)):
        _, _, dp = relative_truth(b, k)
        assert np.linalg.norm(preintegrate(seg).dp - dp) <= 1e-4


@pytest.mark.parametrize("recipe", ["figure-eight", "polyline", "random-smooth"])
def test_ideal_imu_matches_finite_differences(recipe):
    cfg = small_sim(trajectory=recipe, duration=10.0)
    motion = motion_model(cfg, np.random.default_rng(cfg.seed))
    g = np.asarray(cfg.gravity)
    t = np.linspace(1.0, 9.0, 17)
    omega, accel, R, _, p = ideal_imu(motion, t, g)
    h_rot, h_pos = 1e-5, 1e-3
    Rm = ideal_imu(motion, t - h_rot, g)[2]
    Rp = ideal_imu(motion, t + h_rot, g)[2]
    pm = ideal_imu(motion, t - h_pos, g)[4]
    pp = ideal_imu(motion, t + h_pos, g)[4]
    w_fd = np.array([log_so3(a.T @ b) for a, b in zip(Rm, Rp)]) / (2 * h_rot)
    a_fd = (pp - 2 * p + pm) / h_pos**2
    f_fd = np.einsum("nji,nj->ni", R, a_fd - g)
    assert np.abs(omega - w_fd).max() <= 1e-6
    assert np.abs(accel - f_fd).max() <= 1e-4


def test_static_trajectory():
    b = simulate(small_sim(trajectory="static"))
    R = b.groundtruth.R[0]
    assert np.array_equal(b.gyro, np.zeros_like(b.gyro))
    assert np.allclose(b.accel, -R.T @ b.gravity, atol=1e-12)
    assert np.all(b.groundtruth.R == R)


def test_biases_and_noise_applied():
    clean = simulate(small_sim())
    biased = simulate(small_sim(gyro_bias=[0.1, 0, 0], accel_bias=[0, 0, 0.2]))
    assert np.allclose(biased.gyro - clean.gyro, [0.1, 0, 0], atol=1e-15)
    assert np.allclose(biased.accel - clean.accel, [0, 0, 0.2], atol=1e-14)
    noisy = simulate(small_sim(gyro_noise=0.01))
    d = noisy.gyro - clean.gyro
    assert abs(d.std() - 0.01) < 0.001 and abs(d.mean()) < 0.001


def test_scans_are_landmarks_in_sensor_frame():
    cfg = small_sim()
    b = simulate(cfg)
    rng = np.random.default_rng(cfg.seed)
    motion_model(cfg, rng)
    landmarks = make_landmarks(cfg, rng)
    gt = b.groundtruth
    for k in (0, len(b.scan_times) // 2, len(b.scan_times) - 1):
        j = gt.lookup(b.scan_times[k])
        world = b.scans[k] @ gt.R[j].T + gt.p[j]
        d = np.linalg.norm(world[:, None] - landmarks[None], axis=2).min(axis=1)
        assert 0 < len(b.scans[k]) <= cfg.points_per_scan
        assert d.max() <= 1e-9
        assert np.all(np.linalg.norm(b.scans[k], axis=1) <= cfg.lidar_range + 1e-9)


def test_scan_times_on_imu_grid():
    b = simulate(small_sim())
    assert len(b.scan_times) == 11
    assert np.all(np.isin(b.scan_times, b.imu_t))


def test_same_seed_byte_identical(tmp_path):
    export_bundle(simulate(small_sim(seed=3)), tmp_path / "a")
    export_bundle(simulate(small_sim(seed=3)), tmp_path / "b")
    export_bundle(simulate(small_sim(seed=4, trajectory="random-smooth")), tmp_path / "c")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "imu.csv").read_bytes() != (tmp_path / "c" / "imu.csv").read_bytes()


@pytest.mark.parametrize(
    "kw", [{"imu_rate": 40.0}, {"scan_rate": 0.0}, {"duration": -1.0}, {"trajectory": "spiral"}, {"imu_rate": 203.0}]
)
def test_sim_config_validation(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


# ---------------------------------------------------------------- ingest


def test_export_ingest_round_trip(tmp_path):
    b = simulate(small_sim(gyro_noise=0.01, accel_noise=0.05))
    again = ingest(export_bundle(b, tmp_path / "b"))
    for name in ("imu_t", "gyro", "accel", "scan_times", "gravity"):
        assert np.array_equal(getattr(again, name), getattr(b, name)), name
    assert len(again.scans) == len(b.scans)
    assert all(np.array_equal(x, y) for x, y in zip(again.scans, b.scans))
    gt, gt2 = b.groundtruth, again.groundtruth
    assert np.array_equal(gt.t, gt2.t) and np.array_equal(gt.p, gt2.p) and np.array_equal(gt.v, gt2.v)
    assert np.abs(gt.R - gt2.R).max() <= 1e-9
    s, s2 = b.initial_state, again.initial_state
    assert np.array_equal(s.R, s2.R) and np.array_equal(s.v, s2.v) and np.array_equal(s.p, s2.p) and s.t == s2.t
    assert again.meta == b.meta


def test_csv_non_numeric_cell(tmp_path):
    (tmp_path / "imu.csv").write_text("t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.8\n0.005,0,0,oops,0,0,9.8\n")
    with pytest.raises(ValueError, match=r"imu.csv:3: non-numeric"):
        read_imu_csv(tmp_path / "imu.csv")


def test_csv_wrong_header(tmp_path):
    (tmp_path / "imu.csv").write_text("time,a,b\n")
    with pytest.raises(ValueError, match=":1:"):
        read_imu_csv(tmp_path / "imu.csv")


def test_csv_short_row(tmp_path):
    (tmp_path / "imu.csv").write_text("t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.8\n0.005,0,0\n")
    with pytest.raises(ValueError, match=":3: expected 7 columns"):
        read_imu_csv(tmp_path / "imu.csv")


def test_scan_before_first_imu_sample(tmp_path):
    root = export_bundle(simulate(small_sim()), tmp_path / "b")
    lines = (root / "scans.txt").read_text().splitlines()
    lines[0] = "-0.5 " + lines[0].split()[1]
    (root / "scans.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=r"scan 0 \(scans/000000.xyz\).*not bracketed"):
        ingest(root)


def test_bundle_validation():
    with pytest.raises(ValueError, match="bracketed"):
        SequenceBundle([0.0, 1.0], np.zeros((2, 3)), np.zeros((2, 3)), [2.0], [np.zeros((1, 3))])
    with pytest.raises(ValueError, match="inconsistent"):
        SequenceBundle([0.0, 1.0], np.zeros((3, 3)), np.zeros((2, 3)), [0.5], [np.zeros((1, 3))])


def test_bundle_without_start_state():
    b = SequenceBundle([0.0, 1.0], np.zeros((2, 3)), np.zeros((2, 3)), [0.5], [np.zeros((1, 3))])
    with pytest.raises(ValueError, match="neither"):
        b.start_state()


# ---------------------------------------------------------------- config


def test_config_defaults_and_seed_propagation():
    cfg = config_from_dict({"seed": 11})
    assert cfg.sim.seed == 11 and cfg.train.seed == 11
    cfg.reseed(5)
    assert cfg.sim.seed == 5 and cfg.train.seed == 5 and cfg.seed == 5


@pytest.mark.parametrize(
    "doc, where",
    [
        ({"sedd": 1}, "config: unknown key"),
        ({"sim": {"durration": 1.0}}, "config.sim: unknown key"),
        ({"train": {"seed": 3}}, "config.train: unknown key"),
        ({"gmm": {"beta": 1.5}}, "config.gmm"),
        ({"chunk": 1}, "config: chunk"),
        ({"train": {"gradient": "magic"}}, "config.train"),
    ],
)
def test_config_rejections(doc, where):
    with pytest.raises(ConfigError, match=where):
        config_from_dict(doc)


def test_config_file_round_trip(tmp_path):
    cfg = config_from_dict(SHORT)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    again = load_config(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()


def test_config_json_error_cites_line(tmp_path):
    (tmp_path / "c.json").write_text('{\n "seed": 1,\n}\n')
    with pytest.raises(ConfigError, match=r"c.json:3"):
        load_config(tmp_path / "c.json")


def test_shipped_config_loads():
    cfg = load_config("configs/selfsup_figure8.json")
    assert isinstance(cfg, PipelineConfig) and cfg.train.gradient == "analytic"


# ---------------------------------------------------------------- pipeline / CLI


@pytest.fixture(scope="module")
def short_cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(SHORT))
    code = cli.main(["pipeline", "--config", str(root / "cfg.json"), "--out", str(root / "run")])
    return root, code


def test_cli_pipeline_produces_artifacts(short_cli_run):
    root, code = short_cli_run
    assert code == 0
    run = root / "run"
    for name in (PSEUDO_LABELS, MODEL, TRAJ, TRAJ_BASE, METRICS, "gmm.json", "bic.txt", "config.json", "bundle/imu.csv"):
        assert (run / name).exists(), name
    report = json.loads((run / METRICS).read_text())
    assert report["corrected"]["ape"] >= 0 and report["uncorrected"]["rpe"] >= 0
    assert report["corrected"]["count"] == 40


def test_cli_rerun_identical_metrics(short_cli_run, tmp_path):
    root, _ = short_cli_run
    assert cli.main(["pipeline", "--config", str(root / "cfg.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / METRICS).read_bytes() == (root / "run" / METRICS).read_bytes()


def test_cli_single_stage_reuses_artifacts(short_cli_run, tmp_path, capsys):
    root, _ = short_cli_run
    for name in ("bundle", TRAJ, TRAJ_BASE, MODEL):
        src = root / "run" / name
        (shutil.copytree if src.is_dir() else shutil.copy)(src, tmp_path / name)
    assert cli.main(["eval", "--config", str(root / "cfg.json"), "--out", str(tmp_path)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((root / "run" / METRICS).read_text())


def test_missing_artifact_named(tmp_path):
    b = simulate(small_sim())
    with pytest.raises(MissingArtifactError, match=PSEUDO_LABELS):
        run_pipeline(b, PipelineConfig(), ["train"], tmp_path)
    with pytest.raises(MissingArtifactError, match=MODEL):
        run_pipeline(b, PipelineConfig(), ["infer"], tmp_path)


def test_cli_missing_artifact_exit_code(tmp_path, caplog):
    export_bundle(simulate(small_sim()), tmp_path / "bundle")
    assert cli.main(["infer", "--out", str(tmp_path)]) == 2
    assert MODEL in caplog.text


def test_cli_eval_without_ground_truth(tmp_path, capsys):
    root = export_bundle(simulate(small_sim()), tmp_path / "bundle")
    (root / "groundtruth.tum").unlink()
    (root / "groundtruth_velocity.csv").unlink()
    assert cli.main(["eval", "--out", str(tmp_path)]) == 3
    assert "no ground truth" in capsys.readouterr().out


def test_eval_stage_without_ground_truth_raises(tmp_path):
    b = simulate(small_sim())
    b.groundtruth = None
    with pytest.raises(NoGroundTruthError, match="no ground truth"):
        stage_eval(b, PipelineConfig(), tmp_path)


def test_cli_bad_config_exit_code(tmp_path, caplog):
    (tmp_path / "c.json").write_text('{"bogus": 1}')
    assert cli.main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2
    assert "bogus" in caplog.text


def test_cli_simulate_with_seed_override(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"sim": {"duration": 1.0, "landmarks": 50, "points_per_scan": 5}}))
    assert cli.main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "a"), "--seed", "9"]) == 0
    saved = json.loads((tmp_path / "a" / "config.json").read_text())
    assert saved["seed"] == 9
    assert (tmp_path / "a" / "bundle" / "meta.json").exists()


def test_cli_explicit_missing_bundle(tmp_path):
    assert cli.main(["pseudo-label", "--out", str(tmp_path), "--bundle", str(tmp_path / "nowhere")]) == 2


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(ValueError, match="unknown stage"):
        run_pipeline(simulate(small_sim()), PipelineConfig(), ["deploy"], tmp_path)
