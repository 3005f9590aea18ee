"""Synthetic i.i.d. Gaussian sources with closed-form LLRs.

Every class k emits frames x ~ N(mu_k, sigma^2 I). Because the frames are
i.i.d. given the class, the true LLR matrix is a cumulative sum of per-frame
linear terms and the true window posterior is a softmax of summed
log-densities.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .core import InvalidInput, LlrMatrixSeries, SequenceBatch


@dataclass(frozen=True)
class GaussianSourceSpec:
    means: np.ndarray
    sigma: float = 1.0
    priors: np.ndarray | None = None

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if mu.shape[0] < 2:
            raise InvalidInput("need at least two class means")
        if not np.all(np.isfinite(mu)):
            raise InvalidInput("means must be finite")
        diffs = mu[:, None, :] - mu[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        if np.any(dist[~np.eye(mu.shape[0], dtype=bool)] == 0):
            raise InvalidInput("class means must be pairwise distinct")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise InvalidInput("sigma must be positive")
        if self.priors is None:
            pi = np.full(mu.shape[0], 1.0 / mu.shape[0])
        else:
            pi = np.asarray(self.priors, dtype=np.float64)
            if pi.shape != (mu.shape[0],) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
                raise InvalidInput("priors must be a probability vector over classes")
        mu.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "priors", pi)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def scaled(self, factor: float) -> "GaussianSourceSpec":
        return GaussianSourceSpec(self.means * factor, self.sigma, self.priors)


def equilateral_spec(K: int = 3, kl: float = 0.5, sigma: float = 1.0) -> GaussianSourceSpec:
    """K classes on a regular simplex with every pairwise KL divergence equal to ``kl``.

    The simplex lives in K-1 dimensions (d = 2 for K = 3).
    """
    if K < 2:
        raise InvalidInput("K must be >= 2")
    # vertices of a regular simplex: centred basis vectors projected to K-1 dims
    e = np.eye(K) - 1.0 / K
    q, _ = np.linalg.qr(e.T)
    pts = e @ q[:, : K - 1]
    side = np.linalg.norm(pts[0] - pts[1])
    target = sigma * np.sqrt(2.0 * kl)
    return GaussianSourceSpec(pts * (target / side), sigma)


def _stream(seed: int, index: int) -> np.random.Generator:
    # Philox is counter-based; the 128-bit key pins the stream to (seed, sequence index)
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_sequences(spec: GaussianSourceSpec, M: int, T: int, seed: int) -> SequenceBatch:
    """Draw M labelled sequences of length T.

    Sequence i is generated entirely from the Philox stream keyed by
    (seed, i): first its label, then its T x d Gaussian noise. The result is
    therefore independent of how sequences are split across workers.
    """
    if M < 1 or T < 1:
        raise InvalidInput("M and T must be >= 1")
    cdf = np.cumsum(spec.priors)
    cdf[-1] = 1.0
    labels = np.empty(M, dtype=np.int64)
    noise = np.empty((M, T, spec.d))
    for i in range(M):
        g = _stream(seed, i)
        labels[i] = int(np.searchsorted(cdf, g.random(), side="right"))
        noise[i] = g.standard_normal((T, spec.d))
    labels = np.minimum(labels, spec.K - 1)
    x = spec.means[labels][:, None, :] + spec.sigma * noise
    return SequenceBatch(x, labels, spec.K)


def frame_log_densities(spec: GaussianSourceSpec, x: np.ndarray) -> np.ndarray:
    """log N(x; mu_k, sigma^2 I) for every class, shape (..., K)."""
    x = np.asarray(x, dtype=np.float64)
    sq = ((x[..., None, :] - spec.means) ** 2).sum(-1)
    return -0.5 * sq / spec.sigma**2 - 0.5 * spec.d * np.log(2 * np.pi * spec.sigma**2)


def frame_llr_terms(spec: GaussianSourceSpec, x: np.ndarray) -> np.ndarray:
    """Per-frame class scores x.mu_k/sigma^2 - |mu_k|^2/(2 sigma^2), shape (..., K).

    Pairwise differences of these scores are the per-frame LLRs.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = spec.means
    return (x @ mu.T - 0.5 * (mu**2).sum(-1)) / spec.sigma**2


def true_scores(spec: GaussianSourceSpec, frames: np.ndarray) -> np.ndarray:
    """Cumulative per-class log-likelihood scores; frames (..., T, d) -> (..., T, K)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != spec.d:
        raise InvalidInput(f"frame dimension {frames.shape[-1]} != source dimension {spec.d}")
    return np.cumsum(frame_llr_terms(spec, frames), axis=-2)


def true_llr(spec: GaussianSourceSpec, sequence: np.ndarray) -> LlrMatrixSeries:
    """Closed-form LLR matrix series for one T x d sequence."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2:
        raise InvalidInput("sequence must be T x d")
    return LlrMatrixSeries.from_scores(true_scores(spec, seq))


def true_llr_batch(spec: GaussianSourceSpec, features: np.ndarray) -> np.ndarray:
    """LLR tensor of shape (M, T, K, K) for a whole batch."""
    s = true_scores(spec, features)
    return s[..., :, None] - s[..., None, :]


def true_posterior(spec: GaussianSourceSpec, window: np.ndarray) -> np.ndarray:
    """Bayes posterior over classes given a nonempty window of frames."""
    w = np.atleast_2d(np.asarray(window, dtype=np.float64))
    if w.shape[0] < 1:
        raise InvalidInput("window must contain at least one frame")
    logp = frame_log_densities(spec, w).sum(0) + np.log(spec.priors)
    return np.exp(log_softmax(logp))


def true_posterior_series(spec: GaussianSourceSpec, sequence: np.ndarray, max_window: int):
    """Window posteriors for every end-time and window length up to ``max_window``.

    Returns an array shaped like ``PosteriorSeries.values``.
    """
    from .core import PosteriorSeries

    seq = np.asarray(sequence, dtype=np.float64)
    T = seq.shape[0]
    logd = frame_log_densities(spec, seq)
    csum = np.vstack([np.zeros((1, spec.K)), np.cumsum(logd, axis=0)])
    out = np.full((T, max_window, spec.K), np.nan)
    logpi = np.log(spec.priors)
    for t in range(T):
        for w in range(1, min(t + 1, max_window) + 1):
            out[t, w - 1] = np.exp(log_softmax(csum[t + 1] - csum[t + 1 - w] + logpi))
    return PosteriorSeries(out)


def kl_matrix(spec: GaussianSourceSpec) -> np.ndarray:
    """I_kl = E_k[lambda_kl(1)] = |mu_k - mu_l|^2 / (2 sigma^2)."""
    mu = spec.means
    sq = ((mu[:, None, :] - mu[None, :, :]) ** 2).sum(-1)
    return sq / (2.0 * spec.sigma**2)
