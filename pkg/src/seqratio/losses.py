"""Density-ratio-matrix losses with analytic gradients.

Every loss takes an LLR tensor of shape (M, T, K, K) and 0-based labels of
shape (M,) and returns a ``LossOutput`` whose gradient has the same shape as
the LLR tensor, treating every entry as a free variable. Use
``llr_grad_to_scores`` to chain onto per-class log-scores.

Classes missing from a batch are skipped in per-class averages; the outer
1/K then becomes 1/(number of present classes).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .core import (
    POSTERIOR_FLOOR,
    ClassPriorStats,
    CostMatrix,
    EmptyClass,
    InvalidInput,
    PreconditionFailed,
    ScoreVector,
    SequenceBatch,
    validate_cost_matrix,
)


@dataclass(frozen=True)
class LossOutput:
    value: float
    gradient: np.ndarray


def _labels(batch) -> np.ndarray:
    if isinstance(batch, SequenceBatch):
        return batch.labels
    return np.asarray(batch, dtype=np.int64)


def _prep(llr, batch):
    lam = np.asarray(llr, dtype=np.float64)
    if lam.ndim == 3:
        lam = lam[None]
    if lam.ndim != 4 or lam.shape[2] != lam.shape[3]:
        raise InvalidInput(f"expected M x T x K x K LLR tensor, got {lam.shape}")
    y = _labels(batch)
    if y.shape != (lam.shape[0],):
        raise InvalidInput("one label per sequence required")
    K = lam.shape[2]
    if y.size and (y.min() < 0 or y.max() >= K):
        raise InvalidInput("label outside [0, K)")
    return lam, y


def _softplus(x):
    return np.logaddexp(0.0, x)


def _logsumexp_rows(r):
    """Stable log-sum-exp over the last axis; -inf entries are ignored."""
    m = np.max(r, axis=-1, keepdims=True)
    e = np.exp(r - m)
    s = e.sum(axis=-1, keepdims=True)
    return (m + np.log(s))[..., 0], e / s


def _true_rows(lam, y):
    """lambda_{y_i, l} for every (i, t): shape (M, T, K)."""
    return lam[np.arange(lam.shape[0]), :, y, :]


def _scatter_rows(grad_rows, y, shape):
    g = np.zeros(shape)
    g[np.arange(shape[0]), :, y, :] = grad_rows
    return g


def _class_balanced_weights(y, K):
    """Per-example weight 1/(|present| M_k) used by the class-balanced losses."""
    counts = np.bincount(y, minlength=K)
    present = counts > 0
    if not np.any(present):
        raise EmptyClass("empty batch")
    return 1.0 / (present.sum() * counts[y])


def _log_sum_exp_loss(lam, y, log_weights, example_weights):
    """sum_i w_i sum_t log(1 + sum_{l != y_i} W_{y_i l} exp(-lambda_{y_i l}))."""
    M, T, K, _ = lam.shape
    rows = -_true_rows(lam, y) + log_weights[y][:, None, :]
    rows[np.arange(M), :, y] = 0.0
    val, soft = _logsumexp_rows(rows)
    value = float(np.sum(example_weights[:, None] * val))
    grad_rows = -example_weights[:, None, None] * soft
    grad_rows[np.arange(M), :, y] = 0.0
    return LossOutput(value, _scatter_rows(grad_rows, y, lam.shape))


def _log_weights(W):
    with np.errstate(divide="ignore"):
        return np.log(W)


def lsel(llr, batch) -> LossOutput:
    """Class-balanced log-sum-exp loss."""
    lam, y = _prep(llr, batch)
    K, T = lam.shape[2], lam.shape[1]
    if y.size == 0:
        raise EmptyClass("empty batch")
    w = _class_balanced_weights(y, K) / T
    return _log_sum_exp_loss(lam, y, np.zeros((K, K)), w)


def mod_lsel(llr, batch, priors: ClassPriorStats | None = None) -> LossOutput:
    """LSEL with logit-adjusting prior ratios nu_kl^{-1} = M_l / M_k."""
    lam, y = _prep(llr, batch)
    M, T, K, _ = lam.shape
    if priors is None:
        priors = ClassPriorStats(np.bincount(y, minlength=K))
    counts = priors.counts
    if np.any(counts == 0):
        raise EmptyClass("class with zero count in prior statistics")
    log_inv_nu = np.log(counts)[None, :] - np.log(counts)[:, None]
    w = np.full(M, 1.0 / (M * T))
    return _log_sum_exp_loss(lam, y, log_inv_nu, w)


def clsel(llr, batch, C: CostMatrix) -> LossOutput:
    """Cost-sensitive LSEL with a row-constant cost matrix C_kl = C_k."""
    lam, y = _prep(llr, batch)
    M, T, K, _ = lam.shape
    if C.K != K:
        raise InvalidInput("cost matrix size does not match K")
    if not C.is_row_constant():
        raise InvalidInput("CLSEL needs a row-constant cost matrix")
    ck = C.row_values()
    w = ck[y] / (M * T)
    return _log_sum_exp_loss(lam, y, np.zeros((K, K)), w)


def _check_cost(C: CostMatrix, K: int):
    if C.K != K:
        raise InvalidInput("cost matrix size does not match K")
    problems = validate_cost_matrix(C)
    if problems:
        raise InvalidInput("invalid cost matrix: " + ", ".join(problems))


def lscel(llr, batch, C: CostMatrix) -> LossOutput:
    """log(1 + sum_l C_{y l} exp(-lambda_{y l})), averaged over examples and frames."""
    lam, y = _prep(llr, batch)
    M, T, K, _ = lam.shape
    _check_cost(C, K)
    w = np.full(M, 1.0 / (M * T))
    return _log_sum_exp_loss(lam, y, _log_weights(C.C), w)


class LogisticMode(str, Enum):
    PLAIN = "plain"
    PRIOR = "prior"
    COST_OUTER = "cost_outer"
    COST_INNER = "cost_inner"


def logistic_family(llr, batch, mode="plain", C: CostMatrix | None = None, priors: ClassPriorStats | None = None) -> LossOutput:
    """Sum-log-exp losses: plain logistic, modified logistic, C-logistic, logistic-C."""
    lam, y = _prep(llr, batch)
    M, T, K, _ = lam.shape
    mode = LogisticMode(mode)
    rows = _true_rows(lam, y)  # (M, T, K)
    off = np.ones((M, 1, K))
    off[np.arange(M), 0, y] = 0.0

    if mode is LogisticMode.PLAIN:
        ex_w = _class_balanced_weights(y, K) / (T * (K - 1))
        pair_w = np.ones((K, K))
        shift = np.zeros((K, K))
    elif mode is LogisticMode.PRIOR:
        if priors is None:
            priors = ClassPriorStats(np.bincount(y, minlength=K))
        if np.any(priors.counts == 0):
            raise EmptyClass("class with zero count in prior statistics")
        ex_w = np.full(M, 1.0 / (M * T * (K - 1)))
        pair_w = np.ones((K, K))
        shift = np.log(priors.counts)[None, :] - np.log(priors.counts)[:, None]
    elif mode is LogisticMode.COST_OUTER:
        if C is None:
            raise InvalidInput("cost_outer mode needs a cost matrix")
        _check_cost(C, K)
        ex_w = np.full(M, 1.0 / (M * T * (K - 1)))
        pair_w = C.C
        shift = np.zeros((K, K))
    else:
        if C is None:
            raise InvalidInput("cost_inner mode needs a cost matrix")
        _check_cost(C, K)
        ex_w = np.full(M, 1.0 / (M * T * (K - 1)))
        pair_w = np.ones((K, K))
        shift = _log_weights(C.C)

    z = shift[y][:, None, :] - rows  # log(W) - lambda
    # zero-cost pairs inside the log contribute log(1 + 0) = 0
    zero = np.isneginf(z)
    z_safe = np.where(zero, 0.0, z)
    terms = np.where(zero, 0.0, _softplus(z_safe))
    pw = pair_w[y][:, None, :] * off
    value = float(np.sum(ex_w[:, None, None] * pw * terms))
    dz = np.where(zero, 0.0, expit(z_safe))
    grad_rows = -ex_w[:, None, None] * pw * dz
    return LossOutput(value, _scatter_rows(grad_rows, y, lam.shape))


def logistic(llr, batch) -> LossOutput:
    return logistic_family(llr, batch, "plain")


class DreKind(str, Enum):
    LSIF = "LSIF"
    LSIFWC = "LSIFwC"
    DSKL = "DSKL"
    BARR = "BARR"
    LLLR = "LLLR"


def binary_dre_suite(llr, batch, kind="LSIF", gamma: float | None = None) -> LossOutput:
    """Pairwise extensions of binary DRE losses to the LLR matrix.

    LSIF and DSKL are unbounded below. Pairs (k, l) where either class is
    absent from the batch are skipped.
    """
    lam, y = _prep(llr, batch)
    M, T, K, _ = lam.shape
    kind = DreKind(kind)
    if kind in (DreKind.LSIFWC, DreKind.BARR):
        if gamma is None or gamma < 0:
            raise InvalidInput(f"{kind.value} needs a constraint weight gamma >= 0")
    counts = np.bincount(y, minlength=K).astype(np.float64)
    present = counts > 0
    onehot = np.zeros((M, K))
    onehot[np.arange(M), y] = 1.0
    pair_ok = present[:, None] & present[None, :] & ~np.eye(K, dtype=bool)
    safe = np.where(counts > 0, counts, 1.0)
    # in_l[i, l] = 1/M_l if y_i == l ; in_k likewise
    inv = onehot / safe
    in_num = inv[:, None, :, None]  # example belongs to numerator class k
    in_den = inv[:, None, None, :]  # example belongs to denominator class l
    mask = pair_ok[None, None]

    if kind is DreKind.LLLR:
        denom = np.where(pair_ok, counts[:, None] + counts[None, :], 1.0)
        is_k = onehot[:, None, :, None]
        is_l = onehot[:, None, None, :]
        sig = expit(lam)
        terms = (is_l * sig + is_k * (1.0 - sig)) / denom
        value = float(np.sum(np.where(mask, terms, 0.0)))
        dsig = sig * (1.0 - sig)
        grad = np.where(mask, (is_l - is_k) * dsig / denom, 0.0)
        return LossOutput(value, grad)

    if kind is DreKind.DSKL:
        value = float(np.sum(np.where(mask, (in_den - in_num) * lam, 0.0)))
        grad = np.where(mask, np.broadcast_to(in_den - in_num, lam.shape), 0.0)
        return LossOutput(value, grad)

    with np.errstate(over="ignore"):
        Lam = np.exp(lam)
    if kind in (DreKind.LSIF, DreKind.LSIFWC):
        with np.errstate(over="ignore", invalid="ignore"):
            core = in_den * Lam**2 - in_num * Lam
            gcore = 2.0 * in_den * Lam**2 - in_num * Lam
    else:  # BARR
        core = -in_num * lam
        gcore = np.broadcast_to(-in_num, lam.shape)
    with np.errstate(invalid="ignore"):
        value = float(np.sum(np.where(mask, core, 0.0)))
        grad = np.where(mask, gcore, 0.0)
    if kind in (DreKind.LSIFWC, DreKind.BARR):
        with np.errstate(invalid="ignore"):
            norm = np.sum(in_den * Lam, axis=0) - 1.0  # (T, K, K)
        pair_mask = np.broadcast_to(pair_ok, norm.shape)
        value += float(gamma * np.sum(np.abs(norm[pair_mask])))
        sgn = np.where(pair_mask, np.sign(norm), 0.0)
        with np.errstate(invalid="ignore"):
            grad = grad + gamma * sgn[None] * in_den * Lam
    return LossOutput(value, grad)


def multiplet(posteriors, batch, order: int) -> LossOutput:
    """Cross-entropy over every window length 1..N+1 at its valid end-times.

    ``posteriors`` has shape (M, T, W, K) with ``[..., t, w-1, :]`` the
    posterior of the length-w window ending at 0-based frame t. The returned
    gradient is w.r.t. the softmax logits that produced each posterior.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim == 3:
        p = p[None]
    y = _labels(batch)
    M, T, W, K = p.shape
    N = order
    if y.shape != (M,):
        raise InvalidInput("one label per sequence required")
    weight = multiplet_mask(T, W, N) / M
    py = p[np.arange(M), :, :, y]  # (M, T, W)
    used = np.broadcast_to(weight > 0, py.shape)
    if np.any(np.isnan(py[used])):
        raise InvalidInput("missing window posteriors required by the multiplet loss")
    logp = np.log(np.maximum(np.where(used, py, 1.0), POSTERIOR_FLOOR))
    value = float(-np.sum(weight * logp))
    onehot = np.zeros((M, 1, 1, K))
    onehot[np.arange(M), 0, 0, y] = 1.0
    grad = weight[None, :, :, None] * (np.where(used[..., None], p, 0.0) - onehot)
    return LossOutput(value, grad)


def multiplet_mask(T: int, W: int, order: int) -> np.ndarray:
    """(T, W) indicator of the (end-time, window-length) pairs in the multiplet sum."""
    N = order
    if W < min(N + 1, T):
        raise InvalidInput(f"multiplet with order {N} needs windows up to {N + 1}")
    m = np.zeros((T, W))
    for k in range(1, N + 2):
        lo, hi = k, T - (N + 1 - k)  # 1-based inclusive end-times
        if lo <= hi:
            m[lo - 1 : hi, k - 1] = 1.0
    return m


def nga_lsel(scores, labels, C: CostMatrix) -> LossOutput:
    """Non-guess-averse LSEL on raw score vectors, averaged over examples.

    Per example: sum_{k != y} C_{y k} log(1 + sum_{l != k} exp(s_l - s_k)).
    """
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, K = s.shape
    if y.shape != (n,):
        raise InvalidInput("one label per score vector required")
    _check_cost(C, K)
    total = 0.0
    grad = np.zeros_like(s)
    for i in range(n):
        for k in range(K):
            if k == y[i] or C.C[y[i], k] == 0:
                continue
            r = s[i] - s[i, k]
            r[k] = 0.0
            val, soft = _logsumexp_rows(r)
            c = C.C[y[i], k]
            total += c * float(val)
            g = c * soft
            g[k] = 0.0
            grad[i] += g
            grad[i, k] -= g.sum()
    return LossOutput(total / n, grad / n)


def llr_grad_to_scores(grad_llr: np.ndarray) -> np.ndarray:
    """Chain dLoss/dlambda_kl onto per-class scores where lambda_kl = L_k - L_l."""
    g = np.asarray(grad_llr)
    return g.sum(axis=-1) - g.sum(axis=-2)


def gradient_scales(llr_row, y: int) -> tuple[float, float]:
    """Ratio of the largest to smallest rival gradient magnitude for logistic and LSEL.

    ``llr_row`` is lambda_{y, .}. Returns (R_logistic, R_LSEL).
    """
    row = np.asarray(llr_row, dtype=np.float64)
    K = row.size
    rivals = np.delete(np.arange(K), y)
    a = -row[rivals]
    # log|b_k| = a_k - log(1 + e^{a_k}); log|c_k| = a_k - log(sum_l e^{-lambda_yl})
    log_b = a - np.logaddexp(0.0, a)
    log_c = a - np.logaddexp.reduce(-row)
    r_log = float(np.exp(log_b.max() - log_b.min()))
    r_lsel = float(np.exp(log_c.max() - log_c.min()))
    return r_log, r_lsel


def effective_number_costs(counts, beta: float) -> CostMatrix:
    """Row-constant costs C_k = (1 - beta) / (1 - beta^{M_k})."""
    c = np.asarray(counts, dtype=np.float64)
    if not 0.0 <= beta <= 1.0:
        raise InvalidInput("beta must lie in [0, 1]")
    if np.any(c < 1):
        raise InvalidInput("class counts must be >= 1")
    if beta == 1.0:
        ck = 1.0 / c
    else:
        # -expm1(M log beta) keeps precision for beta close to 1
        ck = (1.0 - beta) / -np.expm1(c * np.log(beta)) if beta > 0 else np.ones_like(c)
    return CostMatrix.row_constant(ck)


GUESS_AVERSE_KINDS = ("clsel", "lscel", "c_logistic", "logistic_c", "lsel", "logistic")


def sample_loss(kind: str, s, k: int, C: CostMatrix) -> float:
    """Per-sample loss l(s, k; C) with scores s and lambda_kl = s_k - s_l."""
    s = np.asarray(s.s if isinstance(s, ScoreVector) else s, dtype=np.float64)
    K = s.size
    v = s[k] - s  # lambda_{k l}
    others = np.arange(K) != k
    c = C.C[k]
    if kind == "clsel":
        if not C.is_row_constant():
            raise InvalidInput("CLSEL needs a row-constant cost matrix")
        return float(C.row_values()[k] * np.logaddexp.reduce(np.append(-v[others], 0.0)))
    if kind == "lsel":
        return float(np.logaddexp.reduce(np.append(-v[others], 0.0)))
    if kind == "lscel":
        w = others & (c > 0)
        return float(np.logaddexp.reduce(np.append(np.log(c[w]) - v[w], 0.0)))
    if kind == "c_logistic":
        return float(np.sum(c[others] * _softplus(-v[others])) / (K - 1))
    if kind == "logistic":
        return float(np.sum(_softplus(-v[others])) / (K - 1))
    if kind == "logistic_c":
        w = others & (c > 0)
        return float(np.sum(_softplus(np.log(c[w]) - v[w])) / (K - 1))
    if kind == "nga_lsel":
        return nga_lsel(s[None], [k], C).value
    raise InvalidInput(f"unknown loss kind {kind!r}")


def is_guess_averse_sample(kind: str, s, k: int, C: CostMatrix) -> bool:
    """True iff l(s, k; C) < l(guess, k; C) for a score vector s supporting class k."""
    sv = s if isinstance(s, ScoreVector) else ScoreVector(np.asarray(s, dtype=np.float64))
    if not sv.in_support(k):
        raise PreconditionFailed(f"score vector is not in the support set of class {k}")
    guess = np.zeros_like(sv.s)
    return sample_loss(kind, sv.s, k, C) < sample_loss(kind, guess, k, C)


LLR_LOSSES = ("LSEL", "modLSEL", "logistic", "modlogistic", "LSIF", "LSIFwC", "DSKL", "BARR", "LLLR")


def llr_loss(kind: str, llr, batch, gamma: float = 1.0, C: CostMatrix | None = None, priors: ClassPriorStats | None = None) -> LossOutput:
    """Dispatch by name; used by the training loop and the loss comparison."""
    if kind == "LSEL":
        return lsel(llr, batch)
    if kind == "modLSEL":
        return mod_lsel(llr, batch, priors)
    if kind == "CLSEL":
        return clsel(llr, batch, C)
    if kind == "LSCEL":
        return lscel(llr, batch, C)
    if kind == "logistic":
        return logistic_family(llr, batch, "plain")
    if kind == "modlogistic":
        return logistic_family(llr, batch, "prior", priors=priors)
    if kind in ("LSIF", "LSIFwC", "DSKL", "BARR", "LLLR"):
        return binary_dre_suite(llr, batch, kind, gamma)
    raise InvalidInput(f"unknown LLR loss {kind!r}")
