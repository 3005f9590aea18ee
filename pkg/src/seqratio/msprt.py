"""Sequential decision rules over LLR matrix series.

Time is 1-based in results (hitting times run 1..T). Ties are resolved
deterministically: argmax/argmin pick the smallest class index, and when
several classes cross at the same frame the one with the largest min-rival
margin wins.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Decision,
    InvalidInput,
    LlrMatrixSeries,
    ThresholdMatrix,
    rival_margins,
)


@dataclass(frozen=True)
class ErrorStats:
    """Empirical error probabilities alpha_kl = P_k(d = l)."""

    alpha: np.ndarray
    trials: np.ndarray
    weights: np.ndarray | None = None
    mean_hitting_time: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def alpha_k(self) -> np.ndarray:
        a = self.alpha.copy()
        np.fill_diagonal(a, 0.0)
        return a.sum(axis=1)

    @property
    def beta(self) -> np.ndarray:
        w = np.ones_like(self.alpha) if self.weights is None else self.weights
        a = self.alpha * w
        np.fill_diagonal(a, 0.0)
        return a.sum(axis=0)

    @property
    def sem(self) -> np.ndarray:
        n = np.maximum(self.trials, 1)[:, None]
        return np.sqrt(self.alpha * (1 - self.alpha) / n)


def np_decisions(llr_values: np.ndarray) -> np.ndarray:
    """argmax_k min_{l != k} lambda_kl for every leading index; (..., K, K) -> (...)."""
    K = llr_values.shape[-1]
    m = np.where(np.eye(K, dtype=bool), np.inf, llr_values).min(axis=-1)
    return np.argmax(m, axis=-1)


def np_test(llr: LlrMatrixSeries, t: int) -> int:
    """Neyman-Pearson fixed-time decision at 1-based frame t."""
    if not 1 <= t <= llr.T:
        raise InvalidInput(f"t={t} outside 1..{llr.T}")
    return int(np_decisions(llr.values[t - 1]))


def _threshold_array(thresholds, K) -> np.ndarray:
    if isinstance(thresholds, ThresholdMatrix):
        if thresholds.K != K:
            raise InvalidInput("threshold matrix size does not match K")
        return thresholds.a
    a = np.full((K, K), float(thresholds))
    np.fill_diagonal(a, 0.0)
    return a


def run_msprt_batch(llr_values: np.ndarray, thresholds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised MSPRT over a batch.

    ``llr_values`` has shape (M, T, K, K). Returns (predicted, hitting_time,
    forced) arrays of length M; hitting times are 1-based. At the last frame
    the thresholds collapse to zero so every sequence stops by T.
    """
    v = np.asarray(llr_values, dtype=np.float64)
    if v.ndim == 3:
        v = v[None]
    M, T, K, _ = v.shape
    a = _threshold_array(thresholds, K)
    margins = rival_margins(v, a)  # (M, T, K)
    crossed = margins >= 0
    any_cross = crossed.any(axis=-1)  # (M, T)
    stopped = any_cross.any(axis=1)
    first = np.where(stopped, np.argmax(any_cross, axis=1), T - 1)
    idx = np.arange(M)
    at_stop = margins[idx, first]  # (M, K)
    cand = np.where(crossed[idx, first], at_stop, -np.inf)
    pred = np.argmax(cand, axis=-1)
    forced = ~stopped
    if np.any(forced):
        pred[forced] = np_decisions(v[forced, T - 1])
    return pred, first + 1, forced


def run_msprt(llr: LlrMatrixSeries, thresholds) -> Decision:
    """Matrix SPRT on one series with a threshold matrix (or a scalar)."""
    pred, tau, forced = run_msprt_batch(llr.values[None], thresholds)
    return Decision(int(pred[0]), int(tau[0]), bool(forced[0]))


def binary_sprt(llr12: np.ndarray, threshold: float) -> tuple[int, int, bool]:
    """Classical two-sided Wald SPRT on a scalar LLR path lambda_12(t).

    Stops when lambda_12 >= a (class 0) or lambda_12 <= -a (class 1); forced
    sign decision at the last frame.
    """
    path = np.asarray(llr12, dtype=np.float64)
    for t, v in enumerate(path, start=1):
        if v >= threshold:
            return 0, t, False
        if v <= -threshold:
            return 1, t, False
    return (0 if path[-1] >= 0 else 1), len(path), True


def bound_matrix(thresholds: ThresholdMatrix) -> np.ndarray:
    """Upper bounds exp(-a_kl) on alpha_kl; the diagonal is reported as 1."""
    b = np.exp(-thresholds.a)
    np.fill_diagonal(b, 1.0)
    return b


def row_error_bounds(thresholds: ThresholdMatrix, weights: np.ndarray | None = None) -> dict:
    """Bounds on alpha_k = sum_{l != k} e^{-a_kl} and beta_l = sum_{k != l} w_kl e^{-a_kl}."""
    e = np.exp(-thresholds.a)
    np.fill_diagonal(e, 0.0)
    w = np.ones_like(e) if weights is None else np.asarray(weights, dtype=np.float64)
    return {"alpha_k": e.sum(axis=1), "beta_l": (w * e).sum(axis=0)}


def error_stats(labels: np.ndarray, predicted: np.ndarray, K: int, hitting_times=None, weights=None) -> ErrorStats:
    y = np.asarray(labels)
    d = np.asarray(predicted)
    conf = np.zeros((K, K))
    np.add.at(conf, (y, d), 1.0)
    trials = conf.sum(axis=1)
    alpha = conf / np.maximum(trials, 1)[:, None]
    mht = float(np.mean(hitting_times)) if hitting_times is not None else float("nan")
    return ErrorStats(alpha, trials, weights, mht)


def estimate_errors(source, thresholds, trials: int, T: int = 100, seed: int = 0, weights=None) -> ErrorStats:
    """Monte Carlo error probabilities of the MSPRT.

    ``source`` is either a ``GaussianSourceSpec`` (true LLRs of freshly
    sampled sequences are used) or a pair ``(llr_values, labels)`` of
    precomputed LLRs over labelled data.
    """
    from .oracle import GaussianSourceSpec, sample_sequences, true_llr_batch

    if isinstance(source, GaussianSourceSpec):
        batch = sample_sequences(source, trials, T, seed)
        llr = true_llr_batch(source, batch.features)
        labels = batch.labels
        K = source.K
    else:
        llr, labels = source
        llr = np.asarray(llr)
        labels = np.asarray(labels)
        K = llr.shape[-1]
    pred, tau, _ = run_msprt_batch(llr, thresholds)
    return error_stats(labels, pred, K, tau, weights)
