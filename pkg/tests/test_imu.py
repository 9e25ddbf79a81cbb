import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from ssio.geom import exp_so3, geodesic_distance, log_so3, orthonormality_error, skew
from ssio.imu import (
    CorrectionOutput,
    ImuSegment,
    NavState,
    PreintDelta,
    correct_segment,
    preintegrate,
    preintegrate_batch,
    preintegrate_batch_reference,
    preintegrate_corrected,
    propagate_covariance,
    propagate_state,
    split_segments,
    stack_segments,
)

from conftest import SmoothSignal, fine_oracle, random_state, sampled_segment


def constant_segment(gyro, accel, duration=1.0, n=1000):
    t = np.arange(n) * duration / n
    return ImuSegment(t, np.tile(gyro, (n, 1)), np.tile(accel, (n, 1)), 0.0, duration)


def random_segment(rng, n=40, duration=0.2):
    t = np.sort(rng.uniform(0, duration, n))
    t[0] = 0.0
    return ImuSegment(t, rng.normal(size=(n, 3)), rng.normal(size=(n, 3)) + [0, 0, 9.81], 0.0, duration)


def unit_eta(n, value=1.0):
    return CorrectionOutput(np.zeros((n, 6)), np.full((n, 6), value))


# ---------------------------------------------------------------- segments


def test_segment_rejects_single_sample():
    with pytest.raises(ValueError, match="at least 2"):
        ImuSegment([0.0], [[0, 0, 0]], [[0, 0, 0]], 0.0, 0.1)


def test_segment_rejects_unsorted_times():
    with pytest.raises(ValueError, match="increasing"):
        ImuSegment([0.0, 0.2, 0.1], np.zeros((3, 3)), np.zeros((3, 3)), 0.0, 0.3)


def test_segment_rejects_samples_outside_window():
    with pytest.raises(ValueError, match="outside"):
        ImuSegment([0.0, 0.5], np.zeros((2, 3)), np.zeros((2, 3)), 0.1, 0.3)


def test_last_sample_held_until_end():
    seg = ImuSegment([0.0, 0.1, 0.25], np.zeros((3, 3)), np.zeros((3, 3)), 0.0, 0.3)
    assert np.allclose(seg.dts(), [0.1, 0.15, 0.05])


def test_split_segments_half_open(rng):
    t = np.arange(0, 1.0001, 0.01)
    segs = split_segments(t, rng.normal(size=(len(t), 3)), rng.normal(size=(len(t), 3)), [0.0, 0.5, 1.0])
    assert len(segs[0]) == 50 and segs[0].t[-1] == pytest.approx(0.49)
    assert segs[1].t[0] == pytest.approx(0.5)


def test_from_samples_round_trip(rng):
    seg = random_segment(rng)
    again = ImuSegment.from_samples(seg.samples, seg.t_start, seg.t_end)
    assert np.array_equal(again.gyro, seg.gyro) and np.array_equal(again.t, seg.t)


# ---------------------------------------------------------------- corrections


def test_zero_correction_leaves_segment(rng):
    seg = random_segment(rng)
    out = correct_segment(seg, CorrectionOutput(np.zeros((len(seg), 6)), np.ones((len(seg), 6))))
    assert np.array_equal(out.gyro, seg.gyro) and np.array_equal(out.accel, seg.accel)


def test_constant_gyro_z_correction(rng):
    seg = random_segment(rng)
    sigma = np.tile([0, 0, 0.1, 0, 0, 0], (len(seg), 1))
    out = correct_segment(seg, CorrectionOutput(sigma, np.ones_like(sigma)))
    assert np.allclose(out.gyro[:, 2] - seg.gyro[:, 2], 0.1)
    assert np.array_equal(out.gyro[:, :2], seg.gyro[:, :2]) and np.array_equal(out.t, seg.t)


def test_random_correction_elementwise(rng):
    seg = random_segment(rng)
    sigma = rng.normal(size=(len(seg), 6))
    out = correct_segment(seg, CorrectionOutput(sigma, np.ones_like(sigma)))
    for k in range(len(seg)):
        assert np.array_equal(out.gyro[k], seg.gyro[k] + sigma[k, :3])
        assert np.array_equal(out.accel[k], seg.accel[k] + sigma[k, 3:])


def test_correction_length_mismatch(rng):
    seg = random_segment(rng, n=10)
    with pytest.raises(ValueError, match="entries"):
        correct_segment(seg, unit_eta(9))


def test_correction_rejects_nonpositive_eta():
    with pytest.raises(ValueError, match="positive"):
        CorrectionOutput(np.zeros((2, 6)), np.zeros((2, 6)))


# ---------------------------------------------------------------- preintegration


def test_constant_rate_quarter_turn():
    d = preintegrate(constant_segment([0, 0, np.pi / 2], [0, 0, 0]))
    assert geodesic_distance(d.dR, exp_so3([0, 0, np.pi / 2])) < 1e-6
    assert np.allclose(d.dv, 0) and np.allclose(d.dp, 0)


def test_constant_acceleration():
    d = preintegrate(constant_segment([0, 0, 0], [1, 0, 0]))
    assert np.abs(d.dv - [1, 0, 0]).max() <= 1e-9
    assert np.abs(d.dp - [0.5, 0, 0]).max() <= 1e-3


def test_preintegrate_matches_per_sample_sums(rng):
    seg = random_segment(rng)
    R, v, p = np.eye(3), np.zeros(3), np.zeros(3)
    for w, a, h in zip(seg.gyro, seg.accel, seg.dts()):
        p = p + v * h + 0.5 * R @ a * h * h
        v = v + R @ a * h
        R = R @ Rotation.from_rotvec(w * h).as_matrix()
    d = preintegrate(seg)
    assert np.allclose(d.dR, R, atol=1e-12) and np.allclose(d.dv, v, atol=1e-12) and np.allclose(d.dp, p, atol=1e-12)


def test_compiled_and_reference_agree(rng):
    segs = [random_segment(rng, n=n) for n in (10, 25, 40)]
    gyro, accel, dt = stack_segments(segs)
    eta = rng.uniform(0.01, 0.1, size=gyro.shape[:2] + (6,))
    a = preintegrate_batch(gyro, accel, dt, eta=eta, sigma0=np.eye(9) * 1e-3)
    b = preintegrate_batch_reference(gyro, accel, dt, eta=eta, sigma0=np.eye(9) * 1e-3)
    for x, y in zip(a, b):
        assert np.allclose(x, y, atol=1e-13, rtol=1e-11)


def test_padding_with_zero_duration_is_neutral(rng):
    seg = random_segment(rng, n=10)
    long_seg = random_segment(rng, n=30)
    gyro, accel, dt = stack_segments([seg, long_seg])
    dR, dv, dp, _ = preintegrate_batch(gyro, accel, dt)
    d = preintegrate(seg)
    assert np.allclose(dR[0], d.dR, atol=1e-15) and np.allclose(dp[0], d.dp, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_first_order_convergence(seed):
    """Halving the sample spacing shrinks the position error against a fine-step oracle."""
    rng = np.random.default_rng(seed)
    sig = SmoothSignal(rng)
    _, _, p_ref = fine_oracle(sig, 0.0, 0.2)
    errs = [np.linalg.norm(preintegrate(sampled_segment(sig, 0.0, 0.2, rate)).dp - p_ref) for rate in (200, 400, 800)]
    assert errs[0] > errs[1] > errs[2]
    assert 1.5 < errs[0] / errs[1] < 2.5 and 1.5 < errs[1] / errs[2] < 2.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_dR_is_rotation(seed, scale):
    rng = np.random.default_rng(seed)
    n = 200
    seg = ImuSegment(np.arange(n) * 0.005, rng.normal(scale=scale, size=(n, 3)), rng.normal(size=(n, 3)), 0.0, 1.0)
    d = preintegrate(seg)
    assert orthonormality_error(d.dR) <= 1e-7
    assert np.linalg.det(d.dR) == pytest.approx(1.0, abs=1e-7)


# ---------------------------------------------------------------- state propagation


def test_free_fall():
    s = propagate_state(NavState(np.eye(3), np.zeros(3), [1, 2, 3]), PreintDelta(np.eye(3), np.zeros(3), np.zeros(3)), [0, 0, -9.81], 1.0)
    assert np.allclose(s.p, [1, 2, 3 - 4.905]) and s.t == 1.0


def test_constant_velocity():
    s = propagate_state(NavState(np.eye(3), [1, 0, 0], np.zeros(3)), PreintDelta(np.eye(3), np.zeros(3), np.zeros(3)), np.zeros(3), 2.0)
    assert np.allclose(s.p, [2, 0, 0]) and np.allclose(s.v, [1, 0, 0])


@pytest.mark.parametrize("seed", range(10))
def test_propagate_matches_direct_formula(seed):
    rng = np.random.default_rng(seed)
    x = random_state(rng, t=3.0)
    d = PreintDelta(exp_so3(rng.normal(size=3)), rng.normal(size=3), rng.normal(size=3))
    g = rng.normal(size=3)
    h = rng.uniform(0.01, 1)
    s = propagate_state(x, d, g, h)
    R, v, p = x.R, x.v, x.p
    assert np.allclose(s.R, R.dot(d.dR), atol=1e-12)
    assert np.allclose(s.v, [v[i] + g[i] * h + sum(R[i, j] * d.dv[j] for j in range(3)) for i in range(3)], atol=1e-12)
    expected_p = [p[i] + v[i] * h + 0.5 * g[i] * h ** 2 + sum(R[i, j] * d.dp[j] for j in range(3)) for i in range(3)]
    assert np.allclose(s.p, expected_p, atol=1e-12)
    assert s.t == pytest.approx(3.0 + h)


def test_propagate_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        propagate_state(NavState(np.eye(3), np.zeros(3), np.zeros(3)), PreintDelta(np.eye(3), np.zeros(3), np.zeros(3)), np.zeros(3), 0.0)


# ---------------------------------------------------------------- covariance


def test_no_noise_no_covariance(rng):
    seg = random_segment(rng)
    cov = propagate_covariance(seg, CorrectionOutput(np.zeros((len(seg), 6)), np.full((len(seg), 6), 1e-300)))
    assert np.abs(cov).max() < 1e-300


def transition(dR, w, a, h):
    """Error-state transition for one held sample, built by hand."""
    A = np.eye(9)
    A[:3, :3] = Rotation.from_rotvec(w * h).as_matrix().T
    A[3:6, :3] = -dR @ skew(a) * h
    A[6:9, :3] = -0.5 * dR @ skew(a) * h * h
    A[6:9, 3:6] = np.eye(3) * h
    return A


def test_identity_prior_is_transported(rng):
    seg = random_segment(rng, n=20)
    gyro, accel, dt = seg.gyro[None], seg.accel[None], seg.dts()[None]
    _, _, _, cov = preintegrate_batch(gyro, accel, dt, eta=np.zeros((1, len(seg), 6)), sigma0=np.eye(9))
    A_total = np.eye(9)
    dR = np.eye(3)
    for w, a, h in zip(seg.gyro, seg.accel, seg.dts()):
        A_total = transition(dR, w, a, h) @ A_total
        dR = dR @ Rotation.from_rotvec(w * h).as_matrix()
    assert np.allclose(cov[0], A_total @ A_total.T, atol=1e-12)


def test_covariance_rejects_non_psd_prior(rng):
    seg = random_segment(rng)
    S = np.eye(9)
    S[0, 0] = -1
    with pytest.raises(ValueError, match="semidefinite"):
        propagate_covariance(seg, unit_eta(len(seg)), S)


def monte_carlo_blocks(seg, eta, trials, rng):
    n = len(seg)
    dt = np.tile(seg.dts(), (trials, 1))
    gyro = seg.gyro + rng.normal(size=(trials, n, 3)) * np.sqrt(eta[:3])
    accel = seg.accel + rng.normal(size=(trials, n, 3)) * np.sqrt(eta[3:])
    dR, dv, dp, _ = preintegrate_batch(gyro, accel, dt)
    ref = preintegrate(seg)
    err = np.concatenate([log_so3(ref.dR.T @ dR), dv - ref.dv, dp - ref.dp], axis=1)
    return np.cov(err.T)


@pytest.mark.parametrize("seed", range(3))
def test_covariance_matches_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    sig = SmoothSignal(rng, gyro_amp=1.0)
    seg = sampled_segment(sig, 0.0, 1.0, 200)
    eta = np.r_[np.full(3, 1e-3), np.full(3, 1e-2)]
    cov = propagate_covariance(seg, CorrectionOutput(np.zeros((len(seg), 6)), np.tile(eta, (len(seg), 1))))
    mc = monte_carlo_blocks(seg, eta, 20000, rng)
    for b in range(3):
        sl = slice(3 * b, 3 * b + 3)
        assert np.all(np.abs(np.diag(cov[sl, sl]) / np.diag(mc[sl, sl]) - 1) < 0.15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-8, 1.0), st.floats(1e-8, 1.0))
def test_covariance_symmetric_psd(seed, eta_w, eta_a):
    rng = np.random.default_rng(seed)
    seg = random_segment(rng, n=30)
    eta = np.tile(np.r_[np.full(3, eta_w), np.full(3, eta_a)], (len(seg), 1))
    d = preintegrate_corrected(seg, CorrectionOutput(rng.normal(scale=0.1, size=(len(seg), 6)), eta))
    assert np.abs(d.cov - d.cov.T).max() <= 1e-10
    assert np.linalg.eigvalsh(d.cov).min() >= -1e-10 * max(1.0, np.abs(d.cov).max())


def test_covariance_trace_nondecreasing(rng):
    seg = random_segment(rng, n=40)
    K = len(seg)
    # Zero-duration samples leave the covariance untouched, so truncating dt gives the k-step iterate.
    dt = np.tril(np.ones((K + 1, K)), -1) * seg.dts()
    gyro = np.broadcast_to(seg.gyro, (K + 1, K, 3))
    accel = np.broadcast_to(seg.accel, (K + 1, K, 3))
    *_, cov = preintegrate_batch(gyro, accel, dt, eta=np.full((K + 1, K, 6), 0.01))
    traces = np.trace(cov, axis1=1, axis2=2)
    assert traces[0] == 0.0
    assert np.all(np.diff(traces) > 0)
