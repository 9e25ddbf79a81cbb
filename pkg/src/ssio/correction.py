"""Learned IMU corrections: model interface, window model, losses and trainer."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .geom import log_so3
from .imu import CorrectionOutput, ImuSegment, NavState, preintegrate_batch, stack_segments

log = logging.getLogger(__name__)

FEATURE_DIM = 12
OUTPUT_DIM = 12
ETA_FLOOR = 1e-6
CHECKPOINT_FORMAT = "ssio.window-model"
CHECKPOINT_VERSION = 1


class DegenerateCovarianceError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------- features


def window_features(gyro: np.ndarray, accel: np.ndarray) -> np.ndarray:
    """Fixed 12-dim summary of an IMU window.

    ``[mean(w) x3, std(w) x3, mean|w|, std|w|, mean|a|, std|a|,
    std(diff|w|), std(diff|a|)]``
    """
    gyro = np.asarray(gyro, dtype=float)
    accel = np.asarray(accel, dtype=float)
    wn = np.linalg.norm(gyro, axis=1)
    an = np.linalg.norm(accel, axis=1)
    return np.concatenate(
        [
            gyro.mean(axis=0),
            gyro.std(axis=0),
            [wn.mean(), wn.std(), an.mean(), an.std(), np.diff(wn).std(), np.diff(an).std()],
        ]
    )


def segment_features(segments: Sequence[ImuSegment]) -> np.ndarray:
    return np.array([window_features(s.gyro, s.accel) for s in segments]).reshape(-1, FEATURE_DIM)


# ---------------------------------------------------------------- models


class CorrectionModel(Protocol):
    """Anything that maps a segment to per-sample corrections and variances."""

    def predict(self, seg: ImuSegment) -> CorrectionOutput: ...

    def get_params(self) -> np.ndarray: ...

    def set_params(self, theta: np.ndarray) -> None: ...


class WindowModel:
    """Two-layer perceptron from window features to one correction per window.

    Outputs are 6 additive corrections (gyro, accel) applied to every sample of
    the window and 6 raw values mapped to variances by ``softplus + floor``.
    """

    def __init__(self, hidden: int = 8, n_features: int = FEATURE_DIM, seed: int = 0, init_scale: float = 0.1):
        self.hidden = int(hidden)
        self.n_features = int(n_features)
        rng = np.random.default_rng(seed)
        self.W1 = rng.normal(scale=init_scale, size=(self.hidden, self.n_features))
        self.b1 = np.zeros(self.hidden)
        self.W2 = np.zeros((OUTPUT_DIM, self.hidden))
        self.b2 = np.zeros(OUTPUT_DIM)
        self.feature_mean = np.zeros(self.n_features)
        self.feature_std = np.ones(self.n_features)

    @property
    def n_params(self) -> int:
        return (self.n_features + 1) * self.hidden + (self.hidden + 1) * OUTPUT_DIM

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        F, H = self.n_features, self.hidden
        i = 0
        self.W1 = theta[i : i + H * F].reshape(H, F).copy()
        i += H * F
        self.b1 = theta[i : i + H].copy()
        i += H
        self.W2 = theta[i : i + OUTPUT_DIM * H].reshape(OUTPUT_DIM, H).copy()
        i += OUTPUT_DIM * H
        self.b2 = theta[i:].copy()

    def fit_normalization(self, features: np.ndarray) -> None:
        features = np.asarray(features, dtype=float)
        self.feature_mean = features.mean(axis=0)
        std = features.std(axis=0)
        self.feature_std = np.where(std > 1e-12, std, 1.0)

    def forward(self, features: np.ndarray):
        """Raw ``(N, 12)`` outputs plus a cache for :meth:`backward`."""
        x = (np.asarray(features, dtype=float) - self.feature_mean) / self.feature_std
        hid = np.tanh(x @ self.W1.T + self.b1)
        return hid @ self.W2.T + self.b2, (x, hid)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product: d(loss)/d(theta) given d(loss)/d(raw outputs)."""
        x, hid = cache
        gW2 = grad_out.T @ hid
        gb2 = grad_out.sum(axis=0)
        gpre = (grad_out @ self.W2) * (1.0 - hid * hid)
        gW1 = gpre.T @ x
        gb1 = gpre.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def predict_raw(self, features: np.ndarray) -> np.ndarray:
        return self.forward(features)[0]

    def predict(self, seg: ImuSegment) -> CorrectionOutput:
        raw = self.predict_raw(window_features(seg.gyro, seg.accel)[None])[0]
        return raw_to_output(raw, len(seg))

    # -- checkpoint ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "n_features": self.n_features,
            "hidden": self.hidden,
            "theta": self.get_params().tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> WindowModel:
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a window-model checkpoint: format={doc.get('format')!r}")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        model = cls(hidden=doc["hidden"], n_features=doc["n_features"])
        model.set_params(np.array(doc["theta"], dtype=float))
        model.feature_mean = np.array(doc["feature_mean"], dtype=float)
        model.feature_std = np.array(doc["feature_std"], dtype=float)
        return model

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(dumps_document(self.to_dict()))

    @classmethod
    def load(cls, path) -> WindowModel:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def dumps_document(doc: dict) -> str:
    """Deterministic text form shared by all checkpoint-like artifacts."""
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def raw_to_output(raw: np.ndarray, n_samples: int) -> CorrectionOutput:
    sigma = np.tile(raw[:6], (n_samples, 1))
    eta = np.tile(softplus(raw[6:]) + ETA_FLOOR, (n_samples, 1))
    return CorrectionOutput(sigma, eta)


def predict(model: CorrectionModel, seg: ImuSegment) -> CorrectionOutput:
    return model.predict(seg)


# ---------------------------------------------------------------- losses


@dataclass
class LossBreakdown:
    L_r: float
    L_v: float
    L_p: float
    L_r_cov: float
    L_v_cov: float
    L_p_cov: float
    epsilon: float

    @property
    def total(self) -> float:
        return self.L_r + self.L_v + self.L_p + self.epsilon * (self.L_r_cov + self.L_v_cov + self.L_p_cov)


def _pose_errors(R_pred, v_pred, p_pred, R_label, v_label, p_label):
    e_r = log_so3(np.swapaxes(R_label, -1, -2) @ R_pred)
    return e_r, v_label - v_pred, p_label - p_pred


def _gaussian_nll(e: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``0.5 (e^T S^-1 e + ln det S)`` over a batch."""
    sign, logdet = np.linalg.slogdet(S)
    if np.any(sign <= 0) or np.any(logdet < np.log(1e-300)):
        bad = np.flatnonzero((sign <= 0) | (logdet < np.log(1e-300)))
        raise DegenerateCovarianceError(f"singular covariance block at index {bad[0]}")
    maha = np.einsum("ni,ni->n", e, np.linalg.solve(S, e[..., None])[..., 0])
    return 0.5 * (maha + logdet)


def pose_losses(pred: NavState, label: NavState) -> tuple[float, float, float]:
    e_r, e_v, e_p = _pose_errors(pred.R, pred.v, pred.p, label.R, label.v, label.p)
    return float(np.linalg.norm(e_r)), float(np.linalg.norm(e_v)), float(np.linalg.norm(e_p))


def cov_losses(pred: NavState, label: NavState, cov: np.ndarray) -> tuple[float, float, float]:
    cov = np.asarray(cov, dtype=float)
    errs = _pose_errors(pred.R, pred.v, pred.p, label.R, label.v, label.p)
    out = []
    for b, e in enumerate(errs):
        S = cov[3 * b : 3 * b + 3, 3 * b : 3 * b + 3]
        out.append(float(_gaussian_nll(e[None], S[None])[0]))
    return tuple(out)


def batch_loss(items: Sequence[tuple[LossBreakdown, float]], epsilon: float) -> float:
    if len(items) == 0:
        raise ValueError("empty batch")
    total = 0.0
    for b, w in items:
        if w < 0:
            raise ValueError("motion weights must be nonnegative")
        total += w * (b.L_r + b.L_v + b.L_p + epsilon * (b.L_r_cov + b.L_v_cov + b.L_p_cov))
    return total / len(items)


# ---------------------------------------------------------------- batched training objective


@dataclass
class TrainBatch:
    """Stacked segments, start states, pseudo-label targets and motion weights."""

    gyro: np.ndarray
    accel: np.ndarray
    dt: np.ndarray
    features: np.ndarray
    dt_seg: np.ndarray
    R0: np.ndarray
    v0: np.ndarray
    p0: np.ndarray
    R1: np.ndarray
    v1: np.ndarray
    p1: np.ndarray
    weights: np.ndarray
    gravity: np.ndarray

    def __len__(self):
        return len(self.weights)

    def subset(self, idx) -> TrainBatch:
        kw = {k: getattr(self, k)[idx] for k in self.__dataclass_fields__ if k != "gravity"}
        return TrainBatch(gravity=self.gravity, **kw)


@dataclass
class TrainItem:
    segment: ImuSegment
    start: NavState
    label: NavState
    weight: float = 1.0


def make_batch(items: Sequence[TrainItem], gravity) -> TrainBatch:
    segs = [it.segment for it in items]
    gyro, accel, dt = stack_segments(segs)
    return TrainBatch(
        gyro=gyro,
        accel=accel,
        dt=dt,
        features=segment_features(segs),
        dt_seg=np.array([s.duration for s in segs]),
        R0=np.array([it.start.R for it in items]),
        v0=np.array([it.start.v for it in items]),
        p0=np.array([it.start.p for it in items]),
        R1=np.array([it.label.R for it in items]),
        v1=np.array([it.label.v for it in items]),
        p1=np.array([it.label.p for it in items]),
        weights=np.array([it.weight for it in items], dtype=float),
        gravity=np.asarray(gravity, dtype=float),
    )


def segment_loss_terms(raw: np.ndarray, batch: TrainBatch, with_cov: bool = True) -> np.ndarray:
    """Per-segment ``(N, 6)`` array ``[L_r, L_v, L_p, L_r_cov, L_v_cov, L_p_cov]``."""
    mask = (batch.dt > 0)[..., None]
    gyro = batch.gyro + raw[:, None, 0:3] * mask
    accel = batch.accel + raw[:, None, 3:6] * mask
    eta = None
    if with_cov:
        eta = np.broadcast_to((softplus(raw[:, 6:]) + ETA_FLOOR)[:, None, :], batch.gyro.shape[:2] + (6,))
    dR, dv, dp, cov = preintegrate_batch(gyro, accel, batch.dt, eta=eta)

    h = batch.dt_seg[:, None]
    g = batch.gravity
    R_pred = batch.R0 @ dR
    v_pred = batch.v0 + g * h + np.einsum("nij,nj->ni", batch.R0, dv)
    p_pred = batch.p0 + batch.v0 * h + 0.5 * g * h * h + np.einsum("nij,nj->ni", batch.R0, dp)

    e_r, e_v, e_p = _pose_errors(R_pred, v_pred, p_pred, batch.R1, batch.v1, batch.p1)
    out = np.zeros((len(batch), 6))
    out[:, 0] = np.linalg.norm(e_r, axis=1)
    out[:, 1] = np.linalg.norm(e_v, axis=1)
    out[:, 2] = np.linalg.norm(e_p, axis=1)
    if with_cov:
        # Velocity/position covariances are in the start body frame; the errors are world-frame.
        R0t = np.swapaxes(batch.R0, 1, 2)
        out[:, 3] = _gaussian_nll(e_r, cov[:, 0:3, 0:3])
        out[:, 4] = _gaussian_nll(np.einsum("nij,nj->ni", R0t, e_v), cov[:, 3:6, 3:6])
        out[:, 5] = _gaussian_nll(np.einsum("nij,nj->ni", R0t, e_p), cov[:, 6:9, 6:9])
    return out


def segment_totals(raw: np.ndarray, batch: TrainBatch, epsilon: float) -> np.ndarray:
    terms = segment_loss_terms(raw, batch, with_cov=epsilon != 0.0)
    return terms[:, :3].sum(axis=1) + epsilon * terms[:, 3:].sum(axis=1)


def weighted_loss(raw: np.ndarray, batch: TrainBatch, epsilon: float) -> float:
    totals = segment_totals(raw, batch, epsilon)
    bad = np.flatnonzero(~np.isfinite(totals))
    if len(bad):
        raise TrainingDivergedError(f"non-finite loss at segment {int(bad[0])}")
    return float(np.mean(batch.weights * totals))


def raw_output_gradient(raw: np.ndarray, batch: TrainBatch, epsilon: float, step: float) -> np.ndarray:
    """d(weighted_loss)/d(raw) by central differences.

    Each segment's loss depends only on its own outputs, so one perturbation
    of output ``j`` for all segments at once yields the whole column.
    """
    scale = batch.weights / len(batch)
    grad = np.zeros_like(raw)
    for j in range(raw.shape[1]):
        up = raw.copy()
        up[:, j] += step
        down = raw.copy()
        down[:, j] -= step
        grad[:, j] = scale * (segment_totals(up, batch, epsilon) - segment_totals(down, batch, epsilon)) / (2 * step)
    return grad


# ---------------------------------------------------------------- optimisation


@dataclass
class TrainConfig:
    epsilon: float = 1e-3
    learning_rate: float = 1e-3
    epochs: int = 30
    gradient: str = "finite-difference"
    fd_step: float = 1e-5
    optimizer: str = "adam"
    batch_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.gradient not in ("finite-difference", "analytic"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")
        if self.epsilon < 0 or self.learning_rate < 0 or self.epochs < 0:
            raise ValueError("epsilon, learning_rate and epochs must be nonnegative")


def central_difference(fn: Callable[[np.ndarray], float], theta: np.ndarray, step: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        grad[j] = (fn(theta + e) - fn(theta - e)) / (2 * step)
    return grad


@dataclass
class _Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def gradient_descent(
    loss_fn: Callable[[np.ndarray, np.ndarray | None], float],
    theta0: np.ndarray,
    cfg: TrainConfig,
    n_items: int = 1,
    grad_fn: Callable[[np.ndarray, np.ndarray | None], np.ndarray] | None = None,
):
    """Generic first-order loop.

    ``loss_fn(theta, idx)`` and ``grad_fn(theta, idx)`` evaluate on the item
    subset ``idx`` (``None`` for all items).  Returns ``(theta, history)`` where
    ``history[e]`` is the full loss at the start of epoch ``e`` and the last
    entry is the final loss.
    """
    theta = np.array(theta0, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    adam = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else None
    if grad_fn is None:
        def grad_fn(th, idx):
            return central_difference(lambda x: loss_fn(x, idx), th, cfg.fd_step)

    history = []
    for epoch in range(cfg.epochs):
        history.append(loss_fn(theta, None))
        if cfg.batch_size and cfg.batch_size < n_items:
            order = rng.permutation(n_items)
            batches = [order[i : i + cfg.batch_size] for i in range(0, n_items, cfg.batch_size)]
        else:
            batches = [None]
        for idx in batches:
            grad = grad_fn(theta, idx)
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"non-finite gradient in epoch {epoch}")
            theta = adam.step(theta, grad) if adam else theta - cfg.learning_rate * grad
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    history.append(loss_fn(theta, None))
    return theta, history


@dataclass
class TrainResult:
    model: WindowModel
    history: list[float] = field(default_factory=list)


def train(model: WindowModel, items: Sequence[TrainItem], cfg: TrainConfig, gravity=(0.0, 0.0, -9.81)) -> TrainResult:
    """Fit ``model`` to pseudo-labels with motion-weighted self-supervised loss."""
    if len(items) == 0:
        raise ValueError("empty training set")
    full = make_batch(items, gravity)
    model.fit_normalization(full.features)

    def batch_for(idx):
        return full if idx is None else full.subset(idx)

    def loss_fn(theta, idx):
        model.set_params(theta)
        b = batch_for(idx)
        return weighted_loss(model.predict_raw(b.features), b, cfg.epsilon)

    grad_fn = None
    if cfg.gradient == "analytic":
        def grad_fn(theta, idx):
            model.set_params(theta)
            b = batch_for(idx)
            raw, cache = model.forward(b.features)
            return model.backward(cache, raw_output_gradient(raw, b, cfg.epsilon, cfg.fd_step))

    theta, history = gradient_descent(loss_fn, model.get_params(), cfg, n_items=len(full), grad_fn=grad_fn)
    model.set_params(theta)
    return TrainResult(model, history)
