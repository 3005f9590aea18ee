"""Shared domain types and exact LLR-matrix algebra.

Class indices are 0-based everywhere inside the package. The CLI converts
to 1-based labels when reading or writing files.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POSTERIOR_FLOOR = 1e-12


class SeqRatioError(Exception):
    """Base class for all package errors."""


class InvalidInput(SeqRatioError, ValueError):
    pass


class EmptyClass(SeqRatioError, ValueError):
    pass


class PreconditionFailed(SeqRatioError, ValueError):
    pass


class NumericalDivergence(SeqRatioError, ArithmeticError):
    """Raised when a loss or parameter becomes non-finite.

    ``trace`` carries whatever loss history was recorded before the failure
    and ``last_params`` the last finite parameters, when known.
    """

    def __init__(self, message: str, trace=None, last_params=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
        self.last_params = last_params


class DegenerateInput(SeqRatioError, ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SequenceBatch:
    """M labelled sequences of T frames with d features each."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 3:
            raise InvalidInput(f"features must be M x T x d, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise InvalidInput("labels must have one entry per sequence")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise InvalidInput("labels must be integers")
        y = y.astype(np.int64)
        if self.num_classes < 2:
            raise InvalidInput("need at least two classes")
        if x.shape[1] < 1 or x.shape[2] < 1:
            raise InvalidInput("T and d must be >= 1")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InvalidInput("label outside [0, K)")
        y.setflags(write=False)
        object.__setattr__(self, "features", _readonly(x))
        object.__setattr__(self, "labels", y)

    @property
    def M(self) -> int:
        return self.features.shape[0]

    @property
    def T(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    @property
    def K(self) -> int:
        return self.num_classes

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.K)]

    def subset(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx)
        return SequenceBatch(self.features[idx], self.labels[idx], self.K)


@dataclass(frozen=True)
class LlrMatrixSeries:
    """Per-frame K x K log-likelihood-ratio matrices, shape (T, K, K)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[1] != v.shape[2]:
            raise InvalidInput(f"expected T x K x K, got {v.shape}")
        object.__setattr__(self, "values", _readonly(v))

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "LlrMatrixSeries":
        """Build lambda_kl = L_k - L_l from per-class log-scores of shape (T, K)."""
        s = np.asarray(scores, dtype=np.float64)
        return cls(s[:, :, None] - s[:, None, :])

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    def likelihood_ratio(self) -> np.ndarray:
        return np.exp(self.values)

    def is_antisymmetric(self) -> bool:
        v = self.values
        return bool(np.all(v == -np.swapaxes(v, 1, 2)) and np.all(np.diagonal(v, axis1=1, axis2=2) == 0))

    def additivity_error(self) -> float:
        """max over t,k,l,m of |lambda_kl + lambda_lm - lambda_km|."""
        v = self.values
        lhs = v[:, :, :, None] + v[:, None, :, :]
        return float(np.max(np.abs(lhs - v[:, :, None, :])))


@dataclass(frozen=True)
class PosteriorSeries:
    """Window posteriors p(y | X^(t-w+1, t)).

    ``values[t, w-1]`` is the length-K posterior for the window of length w
    ending at frame t (both 0-based in storage: t runs 0..T-1). Entries for
    windows that would start before the first frame are NaN.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise InvalidInput("posterior series must be T x W x K")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def max_window(self) -> int:
        return self.values.shape[1]

    @property
    def K(self) -> int:
        return self.values.shape[2]

    def window(self, t: int, length: int) -> np.ndarray:
        """Posterior for the window of ``length`` frames ending at 0-based frame t."""
        if length < 1 or length > self.max_window or length > t + 1:
            raise InvalidInput(f"no window of length {length} ending at frame {t}")
        p = self.values[t, length - 1]
        if np.any(np.isnan(p)):
            raise InvalidInput(f"window of length {length} ending at frame {t} is missing")
        return p

    def log_window(self, t: int, length: int) -> np.ndarray:
        return np.log(np.maximum(self.window(t, length), POSTERIOR_FLOOR))


@dataclass(frozen=True)
class ThresholdMatrix:
    a: np.ndarray
    scalar_mode: bool = False

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidInput("threshold matrix must be square")
        np.fill_diagonal(a, 0.0)
        off = a[~np.eye(a.shape[0], dtype=bool)]
        if not np.all(np.isfinite(off)):
            raise InvalidInput("thresholds must be finite")
        if self.scalar_mode and off.size and np.any(off != off[0]):
            raise InvalidInput("scalar_mode requires identical off-diagonal thresholds")
        object.__setattr__(self, "a", _readonly(a))

    @classmethod
    def scalar(cls, value: float, K: int) -> "ThresholdMatrix":
        return cls(np.full((K, K), float(value)), scalar_mode=True)

    @property
    def K(self) -> int:
        return self.a.shape[0]

    def ratio_view(self) -> np.ndarray:
        return np.exp(self.a)


@dataclass(frozen=True)
class CostMatrix:
    C: np.ndarray

    def __post_init__(self):
        c = _readonly(self.C)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise InvalidInput("cost matrix must be square")
        object.__setattr__(self, "C", c)

    @classmethod
    def uniform(cls, K: int, value: float = 1.0) -> "CostMatrix":
        return cls(value * (1.0 - np.eye(K)))

    @classmethod
    def row_constant(cls, per_class) -> "CostMatrix":
        c = np.asarray(per_class, dtype=np.float64)
        K = c.size
        return cls(c[:, None] * (1.0 - np.eye(K)))

    @property
    def K(self) -> int:
        return self.C.shape[0]

    def is_row_constant(self) -> bool:
        K = self.K
        off = ~np.eye(K, dtype=bool)
        rows = [self.C[k, off[k]] for k in range(K)]
        return all(np.all(r == r[0]) for r in rows if r.size)

    def row_values(self) -> np.ndarray:
        if not self.is_row_constant():
            raise InvalidInput("cost matrix is not row-constant")
        K = self.K
        return np.array([self.C[k, (k + 1) % K] for k in range(K)])


@dataclass(frozen=True)
class ClassPriorStats:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.float64)
        if c.ndim != 1 or c.size < 2:
            raise InvalidInput("need counts for at least two classes")
        if np.any(c < 0):
            raise InvalidInput("class counts must be nonnegative")
        object.__setattr__(self, "counts", _readonly(c))

    @classmethod
    def from_batch(cls, batch: SequenceBatch) -> "ClassPriorStats":
        return cls(batch.class_counts())

    @property
    def ratio(self) -> np.ndarray:
        """nu_kl = M_k / M_l."""
        c = self.counts
        if np.any(c == 0):
            raise EmptyClass("prior ratio undefined with an empty class")
        return c[:, None] / c[None, :]

    @property
    def log_ratio(self) -> np.ndarray:
        lc = np.log(self.counts)
        return lc[:, None] - lc[None, :]


@dataclass(frozen=True)
class Decision:
    predicted: int
    hitting_time: int
    forced: bool = False

    def __post_init__(self):
        if self.hitting_time < 1:
            raise InvalidInput("hitting time is 1-based and must be >= 1")
        if self.predicted < 0:
            raise InvalidInput("predicted class must be a 0-based index")


@dataclass(frozen=True)
class ScoreVector:
    s: np.ndarray = field()

    def __post_init__(self):
        s = _readonly(self.s)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise InvalidInput("score vector must be a finite 1-D array")
        object.__setattr__(self, "s", s)

    def in_support(self, k: int) -> bool:
        others = np.delete(self.s, k)
        return bool(np.all(self.s[k] > others))

    def is_arbitrary_guess(self) -> bool:
        return bool(np.all(self.s == self.s[0]))


def antisymmetrize(raw) -> LlrMatrixSeries:
    """Project a raw (T, K, K) tensor onto antisymmetric matrices."""
    r = np.asarray(raw, dtype=np.float64)
    if r.ndim == 2:
        r = r[None]
    if r.ndim != 3 or r.shape[1] != r.shape[2]:
        raise InvalidInput(f"expected T x K x K, got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise InvalidInput("non-finite entries in LLR tensor")
    out = (r - np.swapaxes(r, 1, 2)) / 2.0
    idx = np.arange(r.shape[1])
    out[:, idx, idx] = 0.0
    return LlrMatrixSeries(out)


def min_rival_margin(llr: LlrMatrixSeries, t: int, k: int, thresholds: ThresholdMatrix) -> float:
    """min over l != k of (lambda_kl(t) - a_lk); t is 1-based."""
    K = llr.K
    if K < 2:
        raise InvalidInput("need at least two classes")
    if not 1 <= t <= llr.T:
        raise InvalidInput(f"t={t} outside 1..{llr.T}")
    row = llr.values[t - 1, k, :] - thresholds.a[:, k]
    return float(np.min(np.delete(row, k)))


def rival_margins(llr_values: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Vectorised min-rival margins for every (..., t, k).

    ``llr_values`` has shape (..., T, K, K); returns (..., T, K).
    """
    K = llr_values.shape[-1]
    diff = llr_values - a.T
    diff = np.where(np.eye(K, dtype=bool), np.inf, diff)
    return diff.min(axis=-1)


def validate_cost_matrix(C: CostMatrix) -> list[str]:
    """Return the list of violated cost-matrix invariants (empty when valid)."""
    c = C.C
    problems = []
    if np.any(c < 0):
        problems.append("negative entry")
    if np.any(np.diagonal(c) != 0):
        problems.append("nonzero diagonal")
    if np.any(c.sum(axis=1) == 0):
        problems.append("zero row sum")
    return problems
