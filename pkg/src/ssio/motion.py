"""Motion descriptors, diagonal GMM with BIC selection, and class-balanced weights."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .correction import dumps_document, window_features
from .imu import ImuSegment

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-4
COLLAPSE_WEIGHT = 1e-8
GMM_FORMAT = "ssio.gmm"
GMM_VERSION = 1


class EmCollapseError(RuntimeError):
    pass


# ---------------------------------------------------------------- descriptors


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> NormStats:
        features = np.asarray(features, dtype=float)
        std = features.std(axis=0)
        return cls(features.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.mean) / self.std


def raw_descriptor(window: ImuSegment, window_length: float = 0.2) -> np.ndarray:
    if len(window) < 4:
        raise ValueError("descriptor window needs at least 4 samples")
    if abs(window.duration - window_length) > 0.2 * window_length:
        raise ValueError(f"window of {window.duration:.3f} s is not within 20% of {window_length} s")
    return window_features(window.gyro, window.accel)


def extract_descriptor(window: ImuSegment, stats: NormStats, window_length: float = 0.2) -> np.ndarray:
    return stats.apply(raw_descriptor(window, window_length))


def descriptors(windows, window_length: float = 0.2):
    """Standardized descriptors for a dataset plus the stats used."""
    F = np.array([raw_descriptor(w, window_length) for w in windows])
    stats = NormStats.fit(F)
    return stats.apply(F), stats


# ---------------------------------------------------------------- GMM


@dataclass
class GmmModel:
    pi: np.ndarray
    mu: np.ndarray
    var: np.ndarray  # diagonal covariances, (G, F)

    @property
    def G(self) -> int:
        return len(self.pi)

    def log_joint(self, Z: np.ndarray) -> np.ndarray:
        """``log pi_g + log N(z | mu_g, diag var_g)`` as an ``(N, G)`` array."""
        Z = np.atleast_2d(Z)
        d = Z[:, None, :] - self.mu[None]
        quad = np.sum(d * d / self.var[None], axis=2)
        logdet = np.sum(np.log(self.var), axis=1)
        F = Z.shape[1]
        return np.log(self.pi)[None] - 0.5 * (quad + logdet[None] + F * np.log(2 * np.pi))

    def log_likelihood(self, Z) -> float:
        return float(np.sum(_logsumexp(self.log_joint(Z))))

    def to_dict(self) -> dict:
        return {
            "format": GMM_FORMAT,
            "version": GMM_VERSION,
            "pi": self.pi.tolist(),
            "mu": self.mu.tolist(),
            "var": self.var.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> GmmModel:
        if doc.get("format") != GMM_FORMAT or doc.get("version") != GMM_VERSION:
            raise ValueError("not a version-1 GMM document")
        return cls(np.array(doc["pi"]), np.array(doc["mu"]), np.array(doc["var"]))


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def responsibilities(model: GmmModel, Z) -> np.ndarray:
    """Posterior component probabilities; ``(G,)`` for one descriptor, ``(N, G)`` for many."""
    Z = np.asarray(Z, dtype=float)
    single = Z.ndim == 1
    lj = model.log_joint(Z)
    gamma = np.exp(lj - _logsumexp(lj)[:, None])
    return gamma[0] if single else gamma


def _kmeanspp(Z, G, rng):
    centers = [Z[rng.integers(len(Z))]]
    for _ in range(1, G):
        d2 = np.min(((Z[:, None] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.integers(len(Z)) if total <= 0 else rng.choice(len(Z), p=d2 / total)
        centers.append(Z[idx])
    return np.array(centers)


def _init_model(Z, G, rng) -> GmmModel:
    mu = _kmeanspp(Z, G, rng)
    var = np.tile(np.maximum(Z.var(axis=0), VAR_FLOOR), (G, 1))
    return GmmModel(np.full(G, 1.0 / G), mu, var)


@dataclass
class EmTrace:
    loglik: list
    iterations: int
    reseeds: int


def fit_em(Z, G: int, rng: np.random.Generator, max_iter: int = 300, tol: float = 1e-8):
    """EM for a diagonal GMM; returns the model and the per-iteration log-likelihoods."""
    Z = np.asarray(Z, dtype=float)
    N = len(Z)
    model = _init_model(Z, G, rng)
    trace = []
    reseeded = False
    for it in range(max_iter):
        lj = model.log_joint(Z)
        lse = _logsumexp(lj)
        ll = float(lse.sum())
        if trace and ll - trace[-1] < tol * N:
            trace.append(ll)
            break
        trace.append(ll)
        gamma = np.exp(lj - lse[:, None])
        Nk = gamma.sum(axis=0)
        pi = Nk / N
        if np.any(pi < COLLAPSE_WEIGHT):
            if reseeded:
                raise EmCollapseError(f"component weight fell below {COLLAPSE_WEIGHT} twice (G={G})")
            reseeded = True
            bad = np.flatnonzero(pi < COLLAPSE_WEIGHT)
            log.debug("em: re-seeding %d collapsed component(s)", len(bad))
            mu = model.mu.copy()
            mu[bad] = Z[rng.choice(N, size=len(bad), replace=False)]
            model = GmmModel(np.full(G, 1.0 / G), mu, model.var)
            trace = []
            continue
        mu = (gamma.T @ Z) / Nk[:, None]
        var = (gamma.T @ (Z * Z)) / Nk[:, None] - mu * mu
        model = GmmModel(pi / pi.sum(), mu, np.maximum(var, VAR_FLOOR))
    else:
        trace.append(model.log_likelihood(Z))
    return model, EmTrace(trace, len(trace) - 1, int(reseeded))


def n_free_params(G: int, F: int) -> int:
    return G * (2 * F + 1) - 1


def bic(model: GmmModel, Z) -> float:
    N, F = np.shape(Z)
    return n_free_params(model.G, F) * np.log(N) - 2.0 * model.log_likelihood(Z)


@dataclass
class GmmFit:
    model: GmmModel
    table: list  # (G, BIC)
    traces: dict


def fit_gmm(Z, candidates=(1, 2, 3, 4), seed: int = 0) -> GmmFit:
    Z = np.asarray(Z, dtype=float)
    candidates = sorted(set(int(g) for g in candidates))
    if not candidates or candidates[0] < 1:
        raise ValueError("candidate component counts must be positive")
    if len(Z) < 10 * candidates[-1]:
        raise ValueError(f"need at least {10 * candidates[-1]} descriptors, got {len(Z)}")
    table, traces, best = [], {}, None
    for G in candidates:
        model, trace = fit_em(Z, G, np.random.default_rng([seed, G]))
        score = bic(model, Z)
        table.append((G, float(score)))
        traces[G] = trace
        if best is None or score < best[1]:
            best = (model, score)
    return GmmFit(best[0], table, traces)


def write_bic_table(path, table) -> None:
    with open(path, "w") as fh:
        fh.write("# G BIC\n")
        for G, score in table:
            fh.write(f"{G} {score!r}\n")


def save_gmm(path, model: GmmModel, stats: NormStats | None = None, balance: BalanceWeights | None = None) -> None:
    doc = model.to_dict()
    if stats is not None:
        doc["norm_mean"] = stats.mean.tolist()
        doc["norm_std"] = stats.std.tolist()
    if balance is not None:
        doc["beta"] = balance.beta
        doc["N_g"] = balance.N_g.tolist()
    with open(path, "w") as fh:
        fh.write(dumps_document(doc))


def load_gmm(path):
    with open(path) as fh:
        doc = json.load(fh)
    model = GmmModel.from_dict(doc)
    stats = NormStats(np.array(doc["norm_mean"]), np.array(doc["norm_std"])) if "norm_mean" in doc else None
    balance = balance_from_counts(np.array(doc["N_g"]), doc["beta"]) if "N_g" in doc else None
    return model, stats, balance


# ---------------------------------------------------------------- reweighting


@dataclass
class BalanceWeights:
    beta: float
    N_g: np.ndarray
    w_raw: np.ndarray
    w: np.ndarray


def class_balanced(N_g, beta: float) -> np.ndarray:
    """``(1 - beta) / (1 - beta**N)``; empty components take the largest weight."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    N_g = np.asarray(N_g, dtype=float)
    empty = N_g <= 0
    denom = -np.expm1(np.where(empty, 1.0, N_g) * np.log(beta))
    w = (1.0 - beta) / denom
    if np.all(empty):
        return np.ones_like(N_g)
    w[empty] = w[~empty].max()
    return w


def balance_from_counts(N_g, beta: float) -> BalanceWeights:
    w = class_balanced(N_g, beta)
    return BalanceWeights(beta, np.asarray(N_g, dtype=float), w, w / w.mean())


def balance_weights(model: GmmModel, Z, beta: float = 0.999) -> BalanceWeights:
    return balance_from_counts(responsibilities(model, np.atleast_2d(Z)).sum(axis=0), beta)


def sample_weight(model: GmmModel, weights: BalanceWeights, Z):
    """Responsibility-weighted normalized component weight (scalar or per row)."""
    return responsibilities(model, Z) @ weights.w


# ---------------------------------------------------------------- distribution distance


def wasserstein_1d(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if len(a) == 0 or len(b) == 0:
        raise ValueError("samples must be nonempty")
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    xs = np.concatenate([a, b])
    xs.sort()
    dx = np.diff(xs)
    Fa = np.searchsorted(a, xs[:-1], side="right") / len(a)
    Fb = np.searchsorted(b, xs[:-1], side="right") / len(b)
    return float(np.sum(np.abs(Fa - Fb) * dx))
