import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from towerdecay.tails import TailError, TailModel, parse_tail
from towerdecay.rates import choose_s, tail_sum


def test_geometric_tail_closed_form():
    assert tail_sum(TailModel.exponential(0.5), 3) == pytest.approx(0.125, rel=1e-14)


def test_zero_tail():
    t = TailModel.zero()
    assert tail_sum(t, 0) == 0.0
    assert tail_sum(t, 50) == 0.0
    assert choose_s(t) == 0


def test_polynomial_tail_brute_force():
    k = np.arange(11, 10**7 + 1, dtype=float)
    brute = math.fsum(k ** -3.0)
    # integral bracket for the remainder beyond 10^7
    lo = 0.5 * (10**7 + 1) ** -2.0
    hi = 0.5 * (10**7) ** -2.0
    got = tail_sum(TailModel.polynomial(3), 10)
    assert brute + lo <= got * (1 + 1e-9)
    assert got <= (brute + hi) * (1 + 1e-9)


@pytest.mark.parametrize("alpha", [1.5, 2.0, 3.0, 4.5])
@pytest.mark.parametrize("p", [0, 1, 7, 100, 12345])
def test_polynomial_tail_against_mpmath(alpha, p):
    ref = float(mpmath.zeta(alpha, p + 1))
    assert tail_sum(TailModel.polynomial(alpha), p) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.7])
@pytest.mark.parametrize("p", [0, 5, 60, 400])
def test_stretched_tail_against_direct_sum(alpha, p):
    n = np.arange(p + 1, p + 2_000_000, dtype=float)
    ref = math.fsum(np.exp(-(n ** alpha)))
    assert tail_sum(TailModel.stretched(alpha), p) == pytest.approx(ref, rel=1e-10)


def test_stretched_tail_far_out_is_finite_in_log_space():
    logs = TailModel.stretched(0.5).log_tail(np.array([10**6, 10**9]))
    assert np.all(np.isfinite(logs))
    assert logs[1] < logs[0] < -900


def test_choose_s_geometric():
    assert choose_s(TailModel.exponential(0.5)) == 17


def test_choose_s_explicit_list():
    assert choose_s(TailModel.explicit([1e-3, 1e-6, 0, 0, 0], beyond="zero")) == 1


def test_explicit_list_too_short():
    t = TailModel.explicit([0.1, 0.01])
    with pytest.raises(TailError):
        t.terms(np.array([5]))


@pytest.mark.parametrize("text,kind,param", [
    ("exp:0.5", "exponential", 0.5),
    ("poly:3.0", "polynomial", 3.0),
    ("stretched:0.5", "stretched", 0.5),
])
def test_parse_tail(text, kind, param):
    t = parse_tail(text)
    assert (t.kind, t.param, t.scale) == (kind, param, 1.0)


def test_parse_tail_scale_and_explicit(tmp_path):
    assert parse_tail("poly:2,scale=3").scale == 3.0
    (tmp_path / "w.csv").write_text("n,value\n1,0.5\n2,0.25\n")
    t = parse_tail("explicit:@w.csv", base_dir=tmp_path)
    assert t.values == (0.5, 0.25)
    assert t.total() == pytest.approx(0.75)


@pytest.mark.parametrize("text", ["exp:1.5", "poly:1", "stretched:1.2", "bogus:1", "exp"])
def test_parse_tail_rejects(text):
    with pytest.raises(TailError):
        parse_tail(text)


@settings(max_examples=60, deadline=None)
@given(rho=st.floats(0.05, 0.95), p=st.integers(0, 500))
def test_tail_recursion_property(rho, p):
    # R0(p) = w_{p+1} + R0(p+1)
    t = TailModel.exponential(rho)
    lhs = t.log_tail(p)
    rhs = np.logaddexp(t.log_terms(p + 1), t.log_tail(p + 1))
    assert lhs == pytest.approx(float(rhs), rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(1.2, 6.0), p=st.integers(0, 10**6))
def test_polynomial_tail_is_decreasing(a, p):
    t = TailModel.polynomial(a)
    assert t.log_tail(p + 1) < t.log_tail(p)
