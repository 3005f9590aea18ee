"""LLR matrices from window posteriors under an N-th order Markov approximation.

Both constructors produce per-class log-scores L_k(t); the LLR matrix is
lambda_kl(t) = L_k(t) - L_l(t), so antisymmetry and additivity hold by
construction.

Warm-up: for 1-based t <= N the window of length N+1 is not available yet,
so the longest available window (length t) is used and the M-TANDEM sum
starts at s = min(N+1, t).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import (
    POSTERIOR_FLOOR,
    ClassPriorStats,
    InvalidInput,
    LlrMatrixSeries,
    PosteriorSeries,
)


class Formula(str, Enum):
    M_TANDEM = "tandem"
    M_TANDEMWO = "tandemwo"


@dataclass(frozen=True)
class TandemConfig:
    order: int = 0
    formula: Formula = Formula.M_TANDEM
    include_prior_ratio: bool = False

    def __post_init__(self):
        if self.order < 0:
            raise InvalidInput("Markov order must be >= 0")
        object.__setattr__(self, "formula", Formula(self.formula))


def _check_windows(logp: np.ndarray, order: int, formula: Formula) -> None:
    T, W = logp.shape[-3], logp.shape[-2]
    need = min(order + 1, T)
    if W < need:
        raise InvalidInput(f"posteriors carry windows up to {W}, need {need}")
    idx_t = np.arange(T)
    # longest window used at each end-time
    used = np.minimum(idx_t + 1, order + 1)
    picked = logp[..., idx_t, used - 1, :]
    if np.any(np.isnan(picked)):
        raise InvalidInput("missing window posteriors")
    if formula is Formula.M_TANDEM and order >= 1 and T > order + 1:
        prev = logp[..., order : T - 1, order - 1, :]
        if np.any(np.isnan(prev)):
            raise InvalidInput("missing length-N window posteriors")


def tandem_scores(logp: np.ndarray, order: int) -> np.ndarray:
    """M-TANDEM log-scores from log window posteriors.

    ``logp`` has shape (..., T, W, K) with ``logp[..., t, w-1, :]`` the log
    posterior of the length-w window ending at 0-based frame t. Returns
    (..., T, K).
    """
    logp = np.asarray(logp, dtype=np.float64)
    T = logp.shape[-3]
    N = order
    out = np.empty(logp.shape[:-3] + (T, logp.shape[-1]))
    warm = min(N + 1, T)
    for t in range(warm):
        out[..., t, :] = logp[..., t, t, :]
    if T > N + 1:
        inc = logp[..., N + 1 :, N, :]
        if N >= 1:
            inc = inc - logp[..., N : T - 1, N - 1, :]
        out[..., N + 1 :, :] = out[..., N : N + 1, :] + np.cumsum(inc, axis=-2)
    return out


def tandem_scores_adjoint(grad_scores: np.ndarray, order: int, W: int) -> np.ndarray:
    """Gradient of ``tandem_scores`` w.r.t. ``logp`` given dLoss/dscores."""
    g = np.asarray(grad_scores, dtype=np.float64)
    T = g.shape[-2]
    N = order
    out = np.zeros(g.shape[:-2] + (T, W, g.shape[-1]))
    warm = min(N + 1, T)
    for t in range(warm - 1):
        out[..., t, t, :] += g[..., t, :]
    # suffix sums: every score from frame N onwards inherits the frame-N window
    suffix = np.flip(np.cumsum(np.flip(g, axis=-2), axis=-2), axis=-2)
    out[..., warm - 1, warm - 1, :] += suffix[..., warm - 1, :]
    if T > N + 1:
        out[..., N + 1 :, N, :] += suffix[..., N + 1 :, :]
        if N >= 1:
            out[..., N : T - 1, N - 1, :] -= suffix[..., N + 1 :, :]
    return out


def oblivion_scores(logp: np.ndarray, order: int) -> np.ndarray:
    """M-TANDEMwO log-scores: the latest window of length min(t, N+1)."""
    logp = np.asarray(logp, dtype=np.float64)
    T = logp.shape[-3]
    t = np.arange(T)
    w = np.minimum(t + 1, order + 1) - 1
    return logp[..., t, w, :]


def oblivion_scores_adjoint(grad_scores: np.ndarray, order: int, W: int) -> np.ndarray:
    g = np.asarray(grad_scores, dtype=np.float64)
    T = g.shape[-2]
    out = np.zeros(g.shape[:-2] + (T, W, g.shape[-1]))
    t = np.arange(T)
    w = np.minimum(t + 1, order + 1) - 1
    out[..., t, w, :] = g
    return out


def scores_from_log_posteriors(logp: np.ndarray, cfg: TandemConfig, priors: ClassPriorStats | None = None):
    if cfg.formula is Formula.M_TANDEM:
        s = tandem_scores(logp, cfg.order)
    else:
        s = oblivion_scores(logp, cfg.order)
    if cfg.include_prior_ratio:
        if priors is None:
            raise InvalidInput("include_prior_ratio needs class prior statistics")
        s = s - np.log(priors.counts)
    return s


def scores_adjoint(grad_scores: np.ndarray, cfg: TandemConfig, W: int) -> np.ndarray:
    if cfg.formula is Formula.M_TANDEM:
        return tandem_scores_adjoint(grad_scores, cfg.order, W)
    return oblivion_scores_adjoint(grad_scores, cfg.order, W)


def _log_posteriors(posteriors: PosteriorSeries) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.log(np.maximum(posteriors.values, POSTERIOR_FLOOR))


def m_tandem_llr(posteriors: PosteriorSeries, cfg: TandemConfig, priors: ClassPriorStats | None = None) -> LlrMatrixSeries:
    logp = _log_posteriors(posteriors)
    _check_windows(logp, cfg.order, Formula.M_TANDEM)
    c = TandemConfig(cfg.order, Formula.M_TANDEM, cfg.include_prior_ratio)
    return LlrMatrixSeries.from_scores(scores_from_log_posteriors(logp, c, priors))


def m_tandemwo_llr(posteriors: PosteriorSeries, cfg: TandemConfig, priors: ClassPriorStats | None = None) -> LlrMatrixSeries:
    logp = _log_posteriors(posteriors)
    _check_windows(logp, cfg.order, Formula.M_TANDEMWO)
    c = TandemConfig(cfg.order, Formula.M_TANDEMWO, cfg.include_prior_ratio)
    return LlrMatrixSeries.from_scores(scores_from_log_posteriors(logp, c, priors))


def llr_from_posteriors(posteriors: PosteriorSeries, cfg: TandemConfig, priors: ClassPriorStats | None = None) -> LlrMatrixSeries:
    if cfg.formula is Formula.M_TANDEM:
        return m_tandem_llr(posteriors, cfg, priors)
    return m_tandemwo_llr(posteriors, cfg, priors)
