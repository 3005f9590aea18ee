"""Metrics and experiment harnesses for speed-accuracy evaluation."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Decision, DegenerateInput, EmptyClass, InvalidInput, NumericalDivergence
from .msprt import np_decisions, run_msprt_batch


def max_workers() -> int:
    env = os.environ.get("SEQRATIO_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _parallel_map(fn, items):
    items = list(items)
    n = min(max_workers(), len(items)) or 1
    if n == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def balanced_error(predicted, labels, K: int | None = None) -> float:
    """1 - mean per-class recall.

    ``predicted`` may be a list of ``Decision`` objects or an index array.
    """
    if len(predicted) and isinstance(predicted[0], Decision):
        pred = np.array([d.predicted for d in predicted])
    else:
        pred = np.asarray(predicted)
    y = np.asarray(labels)
    if pred.shape != y.shape:
        raise InvalidInput("one prediction per label required")
    K = int(y.max()) + 1 if K is None else K
    counts = np.bincount(y, minlength=K)
    if np.any(counts == 0):
        raise EmptyClass("every class must appear in the labels")
    hits = np.bincount(y[pred == y], minlength=K)
    return float(1.0 - np.mean(hits / counts))


def balanced_error_sem(predicted, labels, K: int) -> float:
    """Standard error of the balanced error from per-class binomial variances."""
    pred = np.asarray(predicted)
    y = np.asarray(labels)
    counts = np.bincount(y, minlength=K)
    if np.any(counts == 0):
        raise EmptyClass("every class must appear in the labels")
    err = 1.0 - np.bincount(y[pred == y], minlength=K) / counts
    return float(np.sqrt(np.sum(err * (1 - err) / counts)) / K)


def mean_hitting_time(decisions) -> tuple[float, float]:
    if len(decisions) and isinstance(decisions[0], Decision):
        tau = np.array([d.hitting_time for d in decisions], dtype=np.float64)
    else:
        tau = np.asarray(decisions, dtype=np.float64)
    if tau.size == 0:
        raise InvalidInput("no decisions")
    sem = float(tau.std(ddof=1) / np.sqrt(tau.size)) if tau.size > 1 else 0.0
    return float(tau.mean()), sem


@dataclass(frozen=True)
class SatPoint:
    threshold: float
    mean_hitting_time: float
    balanced_error: float
    sem_mht: float
    sem_err: float


@dataclass(frozen=True)
class SatCurve:
    points: tuple[SatPoint, ...]

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: (p.mean_hitting_time, p.threshold)))
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def error_at(self, hitting_time: float) -> float:
        """Linear interpolation of the error at a given mean hitting time."""
        x = np.array([p.mean_hitting_time for p in self.points])
        y = np.array([p.balanced_error for p in self.points])
        return float(np.interp(hitting_time, x, y))

    def monotonicity_violations(self) -> int:
        """Adjacent pairs where the error rises as the mean hitting time grows."""
        y = [p.balanced_error for p in self.points]
        return sum(1 for a, b in zip(y, y[1:]) if b > a)


def sweep_thresholds(llr_values: np.ndarray, n_thresholds: int) -> np.ndarray:
    """Linearly spaced thresholds between the smallest nonzero and largest |lambda|."""
    if n_thresholds < 2:
        raise InvalidInput("need at least two thresholds")
    mag = np.abs(np.asarray(llr_values))
    pos = mag[mag > 0]
    if pos.size == 0 or pos.min() == pos.max():
        raise DegenerateInput("LLR magnitudes are constant; nothing to sweep")
    return np.linspace(pos.min(), pos.max(), n_thresholds)


def sat_point(llr_values: np.ndarray, labels: np.ndarray, threshold: float) -> SatPoint:
    K = llr_values.shape[-1]
    pred, tau, _ = run_msprt_batch(llr_values, threshold)
    mht, sem_mht = mean_hitting_time(tau)
    return SatPoint(
        float(threshold),
        mht,
        balanced_error(pred, labels, K),
        sem_mht,
        balanced_error_sem(pred, labels, K),
    )


def sat_curve(llr_values, labels, n_thresholds: int = 50, thresholds=None) -> SatCurve:
    """Sweep scalar MSPRT thresholds and collect (mean hitting time, error) points."""
    v = np.asarray(llr_values, dtype=np.float64)
    y = np.asarray(labels)
    th = sweep_thresholds(v, n_thresholds) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    pts = _parallel_map(lambda a: sat_point(v, y, a), th)
    return SatCurve(tuple(pts))


def np_error_by_time(llr_values, labels) -> np.ndarray:
    """Balanced error of the fixed-time NP test at every 1-based t; shape (T,)."""
    v = np.asarray(llr_values)
    y = np.asarray(labels)
    K = v.shape[-1]
    dec = np_decisions(v)  # (M, T)
    return np.array([balanced_error(dec[:, t], y, K) for t in range(v.shape[1])])


@dataclass
class ConsistencyCell:
    M: int
    seed: int
    mse: float
    per_entry: np.ndarray | None = None
    diverged: bool = False
    note: str = ""


@dataclass
class ConsistencyReport:
    cells: list[ConsistencyCell] = field(default_factory=list)

    def median_mse(self, M: int) -> float:
        vals = [c.mse for c in self.cells if c.M == M and not c.diverged]
        return float(np.median(vals)) if vals else float("nan")

    def rows(self):
        return [(c.M, c.seed, c.mse, c.diverged) for c in self.cells]


def llr_mse(est: np.ndarray, true: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over examples and off-diagonal entries, plus the (t, k, l) breakdown."""
    err = (np.asarray(est) - np.asarray(true)) ** 2
    per = err.mean(axis=0)
    K = per.shape[-1]
    off = ~np.eye(K, dtype=bool)
    return float(per[:, off].mean()), per


def consistency_probe(cfg, spec, sample_sizes, seeds, T: int = 10, n_test: int = 2000, test_seed: int = 10_000_019, oracle: bool = False) -> ConsistencyReport:
    """Train one model per (sample size, seed) and measure held-out LLR error.

    With ``oracle=True`` the true window posteriors are fed through the
    tandem formula instead of a trained model (an exactness check of the
    harness itself).
    """
    from .model import predict_llr, train
    from .oracle import frame_log_densities, sample_sequences, true_llr_batch
    from .tandem import scores_from_log_posteriors

    sizes = list(sample_sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise InvalidInput("sample sizes must be increasing")
    test = sample_sequences(spec, n_test, T, test_seed)
    true = true_llr_batch(spec, test.features)

    def oracle_llr():
        # exact window posteriors of the i.i.d. source under uniform priors
        ld = frame_log_densities(spec, test.features)  # (M, T, K)
        W = min(cfg.order + 1, T)
        cs = np.concatenate([np.zeros((ld.shape[0], 1, spec.K)), np.cumsum(ld, axis=1)], axis=1)
        logp = np.zeros((ld.shape[0], T, W, spec.K))
        for w in range(1, W + 1):
            t = np.arange(w - 1, T)
            win = cs[:, t + 1] - cs[:, t + 1 - w]
            logp[:, t, w - 1] = win - np.logaddexp.reduce(win, axis=-1, keepdims=True)
        s = scores_from_log_posteriors(logp, cfg.tandem)
        return s[..., :, None] - s[..., None, :]

    def run(cell):
        M, seed = cell
        if oracle:
            mse, per = llr_mse(oracle_llr(), true)
            return ConsistencyCell(M, seed, mse, per)
        data = sample_sequences(spec, M, T, seed)
        try:
            res = train(replace(cfg, seed=seed), data)
        except NumericalDivergence as exc:
            return ConsistencyCell(M, seed, float("nan"), None, True, str(exc))
        est = predict_llr(res.params, test.features, cfg.tandem)
        mse, per = llr_mse(est, true)
        return ConsistencyCell(M, seed, mse, per)

    cells = _parallel_map(run, [(M, s) for M in sizes for s in seeds])
    return ConsistencyReport(cells)


@dataclass(frozen=True)
class OptimalityRow:
    threshold: float
    msprt_mht: float
    msprt_error: float
    msprt_error_sem: float
    matched_np_time: int | None  # None when no fixed time reaches the MSPRT error


def optimality_comparison(spec, thresholds, trials: int, T: int = 50, seed: int = 0, slack_sem: float = 3.0):
    """MSPRT vs the fixed-time NP test on true LLRs.

    For each threshold the matched NP time is the smallest t whose NP error
    is at most the MSPRT error plus ``slack_sem`` binomial standard errors.
    Returns (rows, np_error_by_time).
    """
    from .oracle import sample_sequences, true_llr_batch

    batch = sample_sequences(spec, trials, T, seed)
    llr = true_llr_batch(spec, batch.features)
    np_err = np_error_by_time(llr, batch.labels)
    rows = []
    for a in thresholds:
        pt = sat_point(llr, batch.labels, float(a))
        ok = np.flatnonzero(np_err <= pt.balanced_error + slack_sem * pt.sem_err)
        matched = int(ok[0]) + 1 if ok.size else None
        rows.append(OptimalityRow(float(a), pt.mean_hitting_time, pt.balanced_error, pt.sem_err, matched))
    return rows, np_err
