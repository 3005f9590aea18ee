import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqratio.core import ClassPriorStats, CostMatrix, EmptyClass, InvalidInput, PreconditionFailed, ScoreVector
from seqratio.losses import (
    binary_dre_suite,
    clsel,
    effective_number_costs,
    gradient_scales,
    is_guess_averse_sample,
    llr_grad_to_scores,
    logistic,
    logistic_family,
    lscel,
    lsel,
    mod_lsel,
    multiplet,
    multiplet_mask,
    nga_lsel,
    sample_loss,
)

from conftest import random_antisymmetric, random_labels

mpmath.mp.dps = 50


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        step = h * max(1.0, abs(old))
        flat[i] = old + step
        fp = f(x)
        flat[i] = old - step
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def cost_for(rng, K, row_constant=False):
    if row_constant:
        return CostMatrix.row_constant(rng.uniform(0.2, 3.0, size=K))
    C = rng.uniform(0.2, 3.0, size=(K, K))
    np.fill_diagonal(C, 0.0)
    return CostMatrix(C)


def loss_fns(rng, K, y):
    counts = np.bincount(y, minlength=K)
    pri = ClassPriorStats(counts)
    Crow = cost_for(rng, K, True)
    C = cost_for(rng, K)
    return {
        "LSEL": lambda v: lsel(v, y),
        "modLSEL": lambda v: mod_lsel(v, y, pri),
        "CLSEL": lambda v: clsel(v, y, Crow),
        "LSCEL": lambda v: lscel(v, y, C),
        "logistic": lambda v: logistic(v, y),
        "modlogistic": lambda v: logistic_family(v, y, "prior", priors=pri),
        "C-logistic": lambda v: logistic_family(v, y, "cost_outer", C=C),
        "logistic-C": lambda v: logistic_family(v, y, "cost_inner", C=C),
        "LSIF": lambda v: binary_dre_suite(v, y, "LSIF"),
        "DSKL": lambda v: binary_dre_suite(v, y, "DSKL"),
        "LLLR": lambda v: binary_dre_suite(v, y, "LLLR"),
        "LSIFwC": lambda v: binary_dre_suite(v, y, "LSIFwC", 0.7),
        "BARR": lambda v: binary_dre_suite(v, y, "BARR", 0.7),
    }


# ---- anchors -------------------------------------------------------------


@pytest.mark.parametrize("K", [2, 3, 5])
def test_zero_llr_anchors(K, rng):
    M, T = 12, 3
    y = random_labels(rng, M, K)
    z = np.zeros((M, T, K, K))
    assert lsel(z, y).value == pytest.approx(np.log(K), abs=1e-12)
    assert logistic(z, y).value == pytest.approx(np.log(2), abs=1e-12)
    assert lscel(z, y, CostMatrix.uniform(K)).value == pytest.approx(np.log(K), abs=1e-12)
    assert binary_dre_suite(z, y, "LLLR").value == pytest.approx(0.5 * K * (K - 1) * T, abs=1e-12)
    for kind in ("LSIF", "DSKL"):
        # LSIF at lambda = 0 sums (1 - 1) per pair; DSKL sums (0 - 0)
        assert binary_dre_suite(z, y, kind).value == pytest.approx(0.0, abs=1e-12)
    for kind in ("LSIFwC", "BARR"):
        assert binary_dre_suite(z, y, kind, 1.0).value == pytest.approx(0.0, abs=1e-12)


def test_mod_lsel_balanced_and_arithmetic():
    y = np.array([0, 1, 2])
    z = np.zeros((3, 2, 3, 3))
    assert mod_lsel(z, y).value == pytest.approx(np.log(3), abs=1e-12)
    # K=2, nu_12 = 3: one class-1 example, counts (3, 1)
    v = mod_lsel(np.zeros((1, 1, 2, 2)), np.array([0]), ClassPriorStats([3, 1])).value
    assert v == pytest.approx(np.log(1 + 1 / 3), abs=1e-12)


def test_lsel_limit():
    K, M, T = 3, 3, 2
    y = np.arange(3)
    s = np.zeros((M, T, K))
    s[np.arange(M), :, y] = 50.0
    v = s[..., :, None] - s[..., None, :]
    assert lsel(v, y).value < 1e-20


def test_lllr_limit():
    y = np.arange(3)
    s = np.zeros((3, 1, 3))
    s[np.arange(3), :, y] = 800.0
    v = s[..., :, None] - s[..., None, :]
    assert binary_dre_suite(v, y, "LLLR").value < 1e-12


def test_empty_class_and_bad_inputs(rng):
    z = np.zeros((2, 1, 3, 3))
    with pytest.raises(EmptyClass):
        mod_lsel(z, np.array([0, 1]))
    with pytest.raises(InvalidInput):
        clsel(z, np.array([0, 1]), CostMatrix(np.array([[0, 1, 2], [1, 0, 1], [1, 1, 0.0]])))
    with pytest.raises(InvalidInput):
        logistic_family(z, np.array([0, 1]), "cost_outer")
    with pytest.raises(InvalidInput):
        binary_dre_suite(z, np.array([0, 1]), "BARR")
    bad = np.ones((3, 3))
    with pytest.raises(InvalidInput):
        lscel(z, np.array([0, 1]), CostMatrix(bad))


def test_lsel_skips_absent_classes():
    # with class 2 absent the outer average runs over two classes
    z = np.zeros((2, 1, 3, 3))
    assert lsel(z, np.array([0, 1])).value == pytest.approx(np.log(3))


# ---- extended-precision oracles ------------------------------------------


def mp_lsel(v, y, K, T):
    counts = np.bincount(y, minlength=K)
    present = np.count_nonzero(counts)
    total = mpmath.mpf(0)
    for i in range(len(y)):
        k = y[i]
        for t in range(T):
            inner = 1 + mpmath.fsum(mpmath.exp(-mpmath.mpf(float(v[i, t, k, l]))) for l in range(K) if l != k)
            total += mpmath.log(inner) / counts[k]
    return total / (present * T)


def mp_weighted(v, y, K, T, W, outer):
    """(1/MT) sum outer_y log(1 + sum_l W_yl e^{-lambda_yl})."""
    total = mpmath.mpf(0)
    for i in range(len(y)):
        k = y[i]
        for t in range(T):
            inner = 1 + mpmath.fsum(
                mpmath.mpf(float(W[k, l])) * mpmath.exp(-mpmath.mpf(float(v[i, t, k, l]))) for l in range(K) if l != k
            )
            total += mpmath.mpf(float(outer[k])) * mpmath.log(inner)
    return total / (len(y) * T)


def mp_logistic(v, y, K, T, W, inner_w, cls_bal):
    counts = np.bincount(y, minlength=K)
    total = mpmath.mpf(0)
    for i in range(len(y)):
        k = y[i]
        ex = mpmath.mpf(1) / (np.count_nonzero(counts) * counts[k]) if cls_bal else mpmath.mpf(1) / len(y)
        for t in range(T):
            for l in range(K):
                if l == k:
                    continue
                z = mpmath.log(mpmath.mpf(float(inner_w[k, l]))) - mpmath.mpf(float(v[i, t, k, l]))
                total += ex * mpmath.mpf(float(W[k, l])) * mpmath.log(1 + mpmath.exp(z))
    return total / (T * (K - 1))


def test_lsel_high_precision(rng):
    K, T, M = 4, 3, 8
    y = random_labels(rng, M, K)
    v = random_antisymmetric(rng, (M, T), K, scale=4.0)
    assert lsel(v, y).value == pytest.approx(float(mp_lsel(v, y, K, T)), rel=1e-13)


def test_weighted_family_high_precision(rng):
    K, T, M = 3, 2, 9
    y = random_labels(rng, M, K)
    v = random_antisymmetric(rng, (M, T), K, scale=3.0)
    counts = np.bincount(y, minlength=K)
    inv_nu = counts[None, :] / counts[:, None]
    ones = np.ones((K, K))
    assert mod_lsel(v, y).value == pytest.approx(float(mp_weighted(v, y, K, T, inv_nu, np.ones(K))), rel=1e-13)
    ck = rng.uniform(0.5, 2.0, size=K)
    assert clsel(v, y, CostMatrix.row_constant(ck)).value == pytest.approx(float(mp_weighted(v, y, K, T, ones, ck)), rel=1e-13)
    C = cost_for(rng, K)
    assert lscel(v, y, C).value == pytest.approx(float(mp_weighted(v, y, K, T, C.C, np.ones(K))), rel=1e-13)
    assert logistic(v, y).value == pytest.approx(float(mp_logistic(v, y, K, T, ones, ones, True)), rel=1e-13)
    assert logistic_family(v, y, "cost_outer", C=C).value == pytest.approx(
        float(mp_logistic(v, y, K, T, C.C, ones, False)), rel=1e-13
    )
    assert logistic_family(v, y, "cost_inner", C=C).value == pytest.approx(
        float(mp_logistic(v, y, K, T, ones, C.C, False)), rel=1e-13
    )
    assert logistic_family(v, y, "prior").value == pytest.approx(
        float(mp_logistic(v, y, K, T, ones, inv_nu, False)), rel=1e-13
    )


def dre_direct(v, y, kind, gamma=0.0):
    M, T, K, _ = v.shape
    counts = np.bincount(y, minlength=K)
    total = 0.0
    for k in range(K):
        for l in range(K):
            if k == l:
                continue
            Ik, Il = np.flatnonzero(y == k), np.flatnonzero(y == l)
            for t in range(T):
                lk, ll = v[Ik, t, k, l], v[Il, t, k, l]
                if kind == "LSIF":
                    total += np.mean(np.exp(ll) ** 2) - np.mean(np.exp(lk))
                elif kind == "LSIFwC":
                    total += np.mean(np.exp(ll) ** 2) - np.mean(np.exp(lk)) + gamma * abs(np.mean(np.exp(ll)) - 1)
                elif kind == "DSKL":
                    total += np.mean(ll) - np.mean(lk)
                elif kind == "BARR":
                    total += -np.mean(lk) + gamma * abs(np.mean(np.exp(ll)) - 1)
                elif kind == "LLLR":
                    sig = lambda a: 1 / (1 + np.exp(-a))
                    total += (np.sum(1 - sig(lk)) + np.sum(sig(ll))) / (counts[k] + counts[l])
    return total


@pytest.mark.parametrize("kind", ["LSIF", "LSIFwC", "DSKL", "BARR", "LLLR"])
def test_dre_suite_direct(kind, rng):
    K, T, M = 3, 2, 12
    y = random_labels(rng, M, K)
    v = random_antisymmetric(rng, (M, T), K, scale=0.8)
    got = binary_dre_suite(v, y, kind, 0.7).value
    assert got == pytest.approx(dre_direct(v, y, kind, 0.7), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("kind", ["LSIF", "DSKL"])
def test_unbounded_below(kind):
    y = np.array([0, 1])
    vals = []
    for r in (1.0, 5.0, 20.0):
        s = np.zeros((2, 1, 2))
        s[0, 0, 0] = r
        s[1, 0, 0] = -r  # class-1 example pushes lambda_01 down
        vals.append(binary_dre_suite(s[..., :, None] - s[..., None, :], y, kind).value)
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < -1e3 if kind == "LSIF" else vals[2] < -30


# ---- gradients -----------------------------------------------------------


@pytest.mark.parametrize("K,T,M", [(2, 1, 4), (3, 3, 12), (5, 1, 12), (3, 1, 4)])
def test_loss_gradients(K, T, M, rng):
    y = random_labels(rng, M, K)
    for name, fn in loss_fns(rng, K, y).items():
        v = random_antisymmetric(rng, (M, T), K, scale=0.7)
        # independent entries: perturb the raw tensor directly
        v = v + rng.normal(scale=0.1, size=v.shape)
        g = fn(v).gradient
        fd = central_diff(lambda x: fn(x).value, v.copy())
        assert rel_err(g, fd) < 1e-5, name


def test_score_chain_rule(rng):
    K, T, M = 3, 2, 6
    y = random_labels(rng, M, K)
    s = rng.normal(size=(M, T, K))
    f = lambda sc: lsel(sc[..., :, None] - sc[..., None, :], y).value
    g = llr_grad_to_scores(lsel(s[..., :, None] - s[..., None, :], y).gradient)
    assert rel_err(g, central_diff(f, s.copy())) < 1e-6


def test_multiplet_values_and_gradient(rng):
    M, T, N, K = 3, 5, 1, 3
    y = np.array([0, 1, 2])
    W = N + 1
    mask = multiplet_mask(T, W, N)
    # window-length 1 runs over t=1..T-1, length 2 over t=2..T
    assert mask[:, 0].tolist() == [1, 1, 1, 1, 0]
    assert mask[:, 1].tolist() == [0, 1, 1, 1, 1]
    uni = np.full((M, T, W, K), 1 / K)
    assert multiplet(uni, y, N).value == pytest.approx(np.log(K) * mask.sum())
    logits = rng.normal(size=(M, T, W, K))

    def value(lg):
        p = np.exp(lg - lg.max(-1, keepdims=True))
        return multiplet(p / p.sum(-1, keepdims=True), y, N).value

    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    g = multiplet(p, y, N).gradient
    assert rel_err(g, central_diff(value, logits.copy())) < 1e-6


def test_multiplet_order_zero_is_frame_cross_entropy(rng):
    M, T, K = 4, 3, 3
    y = np.array([0, 1, 2, 0])
    p = rng.dirichlet(np.ones(K), size=(M, T, 1))
    direct = -np.mean(np.sum(np.log(p[np.arange(M), :, 0, y]), axis=1))
    assert multiplet(p, y, 0).value == pytest.approx(direct)


def test_multiplet_missing_window():
    p = np.full((1, 3, 2, 2), np.nan)
    p[:, :, 0] = 0.5
    with pytest.raises(InvalidInput):
        multiplet(p, np.array([0]), 1)


# ---- reductions ----------------------------------------------------------


def test_lscel_reduces_to_mod_lsel(rng):
    K, T, M = 4, 2, 15
    y = random_labels(rng, M, K)
    v = random_antisymmetric(rng, (M, T), K)
    pri = ClassPriorStats(np.bincount(y, minlength=K))
    C = CostMatrix(np.where(np.eye(K, dtype=bool), 0.0, 1.0 / pri.ratio))
    assert lscel(v, y, C).value == pytest.approx(mod_lsel(v, y, pri).value, abs=1e-12)


def test_cost_outer_reduces_to_logistic(rng):
    K, T, M = 4, 2, 15
    y = random_labels(rng, M, K)
    v = random_antisymmetric(rng, (M, T), K)
    counts = np.bincount(y, minlength=K)
    C = CostMatrix.row_constant(M / (K * counts))
    assert logistic_family(v, y, "cost_outer", C=C).value == pytest.approx(logistic(v, y).value, abs=1e-12)


def test_clsel_reduces_to_lsel_with_class_balanced_costs(rng):
    # exact constant for the class-balanced LSEL normalisation is M/(K M_k)
    K, T, M = 4, 2, 15
    y = random_labels(rng, M, K)
    v = random_antisymmetric(rng, (M, T), K)
    counts = np.bincount(y, minlength=K)
    C = CostMatrix.row_constant(M / (K * counts))
    assert clsel(v, y, C).value == pytest.approx(lsel(v, y).value, abs=1e-12)


# ---- NGA-LSEL, gradient scales, effective number -------------------------


def test_nga_counterexample():
    C = CostMatrix.uniform(3)
    s = np.array([3.0, 2.0, -100.0])
    val = nga_lsel(s, [0], C).value
    guess = nga_lsel(np.zeros(3), [0], C).value
    assert guess == pytest.approx(2 * np.log(3), rel=1e-15)
    assert val > guess
    e = mpmath.e
    oracle = mpmath.log(1 + e**1 + e**-102) + mpmath.log(1 + e**103 + e**102)
    assert val == pytest.approx(float(oracle), rel=1e-9)
    assert not is_guess_averse_sample("nga_lsel", s, 0, C)


def test_nga_equal_scores_and_gradient(rng):
    C = CostMatrix.uniform(4)
    assert nga_lsel(np.full(4, 1.7), [2], C).value == pytest.approx(3 * np.log(4))
    Cr = cost_for(rng, 4)
    s = rng.normal(size=(3, 4))
    y = np.array([0, 3, 1])
    g = nga_lsel(s, y, Cr).gradient
    assert rel_err(g, central_diff(lambda x: nga_lsel(x, y, Cr).value, s.copy())) < 1e-6


def test_gradient_scales_examples():
    r_log, r_lsel = gradient_scales(np.array([0.0, 1.5, 1.5, 1.5]), 0)
    assert r_log == pytest.approx(1.0) and r_lsel == pytest.approx(1.0)
    row = np.array([0.0, 1.0, -1.0, 0.3])  # a = -lambda spans [-1, 1]
    r_log, r_lsel = gradient_scales(row, 0)
    assert r_lsel == pytest.approx(np.e**2)
    assert r_log == pytest.approx(np.e**2 * (1 + np.e**-1) / (1 + np.e))
    assert r_log < r_lsel


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 8), st.integers(0, 2**32 - 1))
def test_gradient_scales_property(K, seed):
    r = np.random.default_rng(seed)
    row = r.normal(scale=5.0, size=K)
    row[0] = 0.0
    r_log, r_lsel = gradient_scales(row, 0)
    assert r_log <= r_lsel * (1 + 1e-12)


def test_effective_number():
    assert np.allclose(effective_number_costs([3, 50], 0.0).row_values(), 1.0)
    assert effective_number_costs([100, 4], 1.0).row_values() == pytest.approx([0.01, 0.25])
    near = effective_number_costs([100, 4], 1 - 1e-12).row_values()[0]
    assert near == pytest.approx(0.01, rel=1e-6)
    v = effective_number_costs([100, 4], 0.99).row_values()[0]
    exact = mpmath.mpf("0.01") / (1 - mpmath.mpf("0.99") ** 100)
    assert v == pytest.approx(float(exact), rel=1e-12)
    with pytest.raises(InvalidInput):
        effective_number_costs([10, 3], 1.5)


# ---- guess-aversion ------------------------------------------------------


def random_support_vector(r, K, k):
    s = r.normal(scale=3.0, size=K)
    s[k] = s.max() + r.uniform(1e-3, 3.0)
    return s


@pytest.mark.parametrize("kind", ["clsel", "lscel", "c_logistic", "logistic_c"])
def test_guess_averse_random(kind, rng):
    for _ in range(1000):
        K = int(rng.integers(2, 7))
        k = int(rng.integers(K))
        C = cost_for(rng, K, row_constant=(kind == "clsel"))
        assert is_guess_averse_sample(kind, random_support_vector(rng, K, k), k, C)


def test_guess_aversion_precondition():
    with pytest.raises(PreconditionFailed):
        is_guess_averse_sample("clsel", ScoreVector(np.array([0.0, 1.0])), 0, CostMatrix.uniform(2))


def test_sample_loss_matches_batch_losses(rng):
    K = 4
    s = rng.normal(size=K)
    C = cost_for(rng, K)
    v = (s[:, None] - s[None, :])[None, None]
    for k in range(K):
        y = np.array([k])
        assert sample_loss("lscel", s, k, C) == pytest.approx(lscel(v, y, C).value)
        assert sample_loss("c_logistic", s, k, C) == pytest.approx(logistic_family(v, y, "cost_outer", C=C).value)
        assert sample_loss("logistic_c", s, k, C) == pytest.approx(logistic_family(v, y, "cost_inner", C=C).value)
