import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from towerdecay.rates import (RateError, Weight, block_lengths, choose_s, classify_asymptotics,
                              closed_form_log_R, compute_rates, gamma_sequence, metric_recursion,
                              partial_sums, u_bound)
from towerdecay.tails import TailModel

D = 5.0

# Frozen values from an independent 40-digit mpmath implementation of the
# k_j search and the level recursion (linear scale, direct loops).
EXP_HALF_KS = [3, 5, 5, 5, 5, 5]
EXP_HALF_R_AT_3 = [0.125, 0.703125, 0.73486328125, 0.7398223876953125]
POLY3_KS = [278, 1242, 2348, 4754, 10410]
POLY3_R_AT_10 = [0.0045249174854010337, 0.022654623770981741, 0.022637891859100259]


def test_frozen_geometric_recursion():
    t = metric_recursion(TailModel.exponential(0.5), 17, j_max=6, horizon=20)
    assert t.ks.tolist() == EXP_HALF_KS
    for j, ref in enumerate(EXP_HALF_R_AT_3):
        assert t.R(j, 3) == pytest.approx(ref, rel=1e-12)


def test_frozen_polynomial_recursion():
    assert choose_s(TailModel.polynomial(3)) == 224
    t = metric_recursion(TailModel.polynomial(3), 224, j_max=5, horizon=20)
    assert t.ks.tolist() == POLY3_KS
    for j, ref in enumerate(POLY3_R_AT_10):
        assert t.R(j, 10) == pytest.approx(ref, rel=1e-10)


def _closed_form_linear(tail, ks, level, p):
    q = lambda a, b: int(sum(ks[a:b]))
    total = D ** level * tail.tail(q(0, level) + p)
    for i in range(1, level + 1):
        total += D ** (level + 1 - i) * tail.tail(q(i, level) + p)
    return total


@pytest.mark.parametrize("tail", [TailModel.exponential(0.5), TailModel.polynomial(3),
                                  TailModel.stretched(0.5)], ids=lambda t: t.label())
def test_recursion_matches_closed_form(tail):
    s = choose_s(tail)
    t = metric_recursion(tail, s, j_max=6, horizon=200)
    for level in range(7):
        for p in (0, 1, 17, 199):
            ref = _closed_form_linear(tail, t.ks, level, p)
            assert t.R(level, p) == pytest.approx(ref, rel=1e-10)
            assert math.exp(closed_form_log_R(tail, t.ks, level, np.array([p]))[0]) == \
                pytest.approx(ref, rel=1e-10)
    # beyond the stored range the closed form takes over
    assert math.exp(t.log_R_at(3, 5000)[0]) == pytest.approx(
        _closed_form_linear(tail, t.ks, 3, 5000), rel=1e-10)


@pytest.mark.parametrize("tail", [TailModel.exponential(0.5), TailModel.polynomial(2.5),
                                  TailModel.stretched(0.4)], ids=lambda t: t.label())
def test_block_lengths_are_minimal(tail):
    s = choose_s(tail)
    t = metric_recursion(tail, s, k0=2, j_max=6, horizon=10)
    target = tail.tail(s) / D
    for j, k in enumerate(t.ks, start=1):
        assert math.exp(t.log_R_at(j - 1, s + k)[0]) <= target * (1 + 1e-12)
        if k - 1 >= 2:
            assert math.exp(t.log_R_at(j - 1, s + k - 1)[0]) > target


def test_geometric_blocks_are_bounded_by_p():
    # rho^p < 1/(D(D+1)) with rho = 0.5 first holds at p = 5
    ks = block_lengths(TailModel.exponential(0.5), 17, j_max=30)
    assert np.all(ks[1:] <= 5)


def test_zero_tail_degenerate():
    t = metric_recursion(TailModel.zero(), 0, k0=3, j_max=4, horizon=10)
    assert t.ks.tolist() == [3, 3, 3, 3]
    assert np.all(t.R(np.arange(5)[:, None], np.arange(11)) == 0)


def test_polynomial_block_ratio():
    ks = block_lengths(TailModel.polynomial(3), 224, j_max=21, k_cap=10**12)
    ratio = ks[10:21] / ks[9:20]
    assert np.all(np.abs(ratio / math.sqrt(5) - 1) < 0.1)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(2.5, 4.0), c1=st.floats(0.1, 1.0), grow=st.floats(1.0, 5.0),
       s=st.integers(0, 50))
def test_monotone_coupling(a, c1, grow, s):
    small = TailModel.polynomial(a, c1)
    big = TailModel.polynomial(a, c1 * grow)
    ts = metric_recursion(small, s, j_max=3, horizon=50)
    tb = metric_recursion(big, s, j_max=3, horizon=50)
    assert np.all(tb.log_R >= ts.log_R - 1e-12)
    # k_j uses the threshold R0(s)/D of its own tail; scaling both sides
    # leaves the search unchanged, so the block lengths coincide here
    assert np.all(tb.ks >= ts.ks)


def test_monotone_coupling_fixed_threshold():
    small = TailModel.polynomial(3.0)
    big = TailModel.polynomial(2.5)
    s = 300
    ks_small = block_lengths(small, s, j_max=5)
    ks_big = block_lengths(big, s, j_max=5)
    assert np.all(big.tail(np.arange(1000)) >= small.tail(np.arange(1000)))
    assert np.all(ks_big >= ks_small)


# weights, gamma and u_n -----------------------------------------------------

def test_gamma_examples():
    ks = np.ones(6, dtype=np.int64)
    assert np.allclose(np.exp(gamma_sequence(ks, Weight("exponential", 0.5))), 0.5)
    assert np.allclose(np.exp(gamma_sequence(ks, Weight("constant", 0.0))), 1.0)
    ks = np.full(6, 4, dtype=np.int64)          # 0.6^4 < 1/5
    assert np.allclose(np.exp(gamma_sequence(ks, Weight("exponential", 0.6))), 0.2)


def test_gamma_rejects_decreasing_weight():
    with pytest.raises(RateError):
        gamma_sequence(np.ones(4, dtype=np.int64), Weight("exponential", 2.0))


def test_u_bound_examples():
    ks = np.full(50, 3, dtype=np.int64)
    lg = np.full(49, -math.log(5))
    for n in range(6):
        assert u_bound(n, ks, lg)[2] == 0.0
    for n in range(6, 140):
        ell, r, logu = u_bound(n, ks, lg)
        assert (ell, r) == (n // 3, n % 3)
        assert math.exp(logu) == pytest.approx(5.0 ** -(n // 3 - 1), rel=1e-12)
    with pytest.raises(RateError):
        u_bound(10**6, ks, lg)


@pytest.mark.parametrize("omega,nu", [("exp", "exp"), ("poly", "poly"), ("stretched", "stretched")])
def test_u_sequence_invariants(omega, nu):
    tails = {"exp": (TailModel.exponential(0.5), TailModel.exponential(0.5)),
             "poly": (TailModel.polynomial(3), TailModel.polynomial(4)),
             "stretched": (TailModel.stretched(0.5), TailModel.stretched(0.7))}
    w, v = tails[omega][0], tails[nu][1]
    rep = compute_rates(w, v, 10**4)
    n = np.arange(0, 10**4)
    _, _, logu = rep.evaluate(n)
    assert np.all(logu <= 0) and np.all(np.isfinite(logu))
    assert np.all(np.diff(logu) <= 0)
    q = partial_sums(rep.ks)
    for ell in range(2, len(rep.ks)):
        if q[ell] < 10**4:
            assert logu[q[ell]] == pytest.approx(rep.log_gammas[1:ell].sum(), abs=1e-12)


def test_classification_examples():
    rep = compute_rates(TailModel.exponential(0.5), TailModel.exponential(0.5), 1000)
    cls = rep.classification
    assert cls["class"] == "exponential"
    p = cls["block"]
    assert cls["kappa"] == pytest.approx(max(0.2, 0.75 ** p))
    cls = classify_asymptotics(TailModel.polynomial(3), TailModel.polynomial(4))
    assert cls["class"] == "polynomial" and cls["exponent"] == pytest.approx(2.0)
    assert cls["theorem_statement_exponent"] == pytest.approx(4.0)
    cls = classify_asymptotics(TailModel.stretched(0.5), TailModel.stretched(0.7))
    assert cls["class"] == "stretched" and cls["exponent"] == pytest.approx(0.45)
    assert cls["gamma_limit"] == "1/D"
    assert classify_asymptotics(TailModel.exponential(0.5),
                                TailModel.polynomial(3))["class"] == "mixed/numerical"


def test_weight_log_concave_and_increasing():
    for w in (Weight("exponential", 0.75), Weight("polynomial", 2.0),
              Weight("stretched", 0.7, (2 / (0.7 * 0.3)) ** (1 / 0.7))):
        lv = w.log(np.arange(0, 5000))
        assert np.all(np.diff(lv) >= -1e-12)
        assert np.all(np.diff(lv, 2) <= 1e-9)
