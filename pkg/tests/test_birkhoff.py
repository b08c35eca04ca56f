import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from towerdecay.birkhoff import (ConeDomainError, GenericCone, PositiveCone, PreconditionError,
                                 cone_mu, contraction_certificate, hilbert_metric,
                                 norm_bound_check, positive_hilbert, positive_matrix_diameter,
                                 sup_norm, theta_plus_preamble)

POS = PositiveCone()
BISECT = GenericCone(lambda f: bool(np.all(f >= 0)))

positive_vec = lambda n: arrays(float, n, elements=st.floats(1e-3, 1e3))


def test_mu_examples():
    assert cone_mu([1, 2], [2, 1], POS) == 2.0
    assert cone_mu([3, 5], [3, 5], POS) == 1.0
    # zero coordinate of g where f > 0: sup over the remaining ratios
    assert cone_mu([1, 1, 4], [0, 2, 4], POS) == 2.0


def test_mu_outside_cone():
    with pytest.raises(ConeDomainError):
        cone_mu([-1, 1], [1, 1], POS)
    with pytest.raises(ConeDomainError):
        cone_mu([0, 0], [1, 1], POS)


def test_bisection_matches_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(50):
        f, g = rng.uniform(0.1, 10, size=(2, 4))
        assert BISECT.mu(f, g) == pytest.approx(POS.mu(f, g), rel=1e-9)


def test_hilbert_examples():
    assert hilbert_metric([1, 1], [3, 3], POS) == 0.0
    assert hilbert_metric([1, 2], [2, 1], POS) == pytest.approx(math.log(4))
    f, g = np.array([1.0, 2.0, 5.0]), np.array([2.0, 1.0, 3.0])
    assert hilbert_metric(7 * f, g, POS) == pytest.approx(hilbert_metric(f, g, POS), abs=1e-14)
    assert hilbert_metric([1, 0], [1, 1], POS) == math.inf


def test_theta_preamble_disagrees():
    f, g = [1, 2], [2, 1]
    assert theta_plus_preamble(f, g) == 4.0
    assert math.exp(hilbert_metric(f, g, POS)) == pytest.approx(4.0)
    f, g = [1, 2], [1, 2]
    assert theta_plus_preamble(f, g) == 4.0
    assert hilbert_metric(f, g, POS) == 0.0


@settings(max_examples=200, deadline=None)
@given(f=positive_vec(4), g=positive_vec(4), h=positive_vec(4), lam=st.floats(1e-3, 1e3))
def test_hilbert_metric_properties(f, g, h, lam):
    d = lambda a, b: hilbert_metric(a, b, POS)
    assert d(f, g) >= 0
    assert d(f, g) == pytest.approx(d(g, f), abs=1e-9)
    assert d(lam * f, g) == pytest.approx(d(f, g), abs=1e-9)
    assert d(f, h) <= d(f, g) + d(g, h) + 1e-9
    assert float(positive_hilbert(f, g)[0]) == pytest.approx(d(f, g), abs=1e-9)


def _diameter_brute(A):
    n, m = A.shape
    return max(math.log(A[i, k] * A[j, l] / (A[j, k] * A[i, l]))
               for i, j in itertools.product(range(n), repeat=2)
               for k, l in itertools.product(range(m), repeat=2))


@settings(max_examples=100, deadline=None)
@given(A=arrays(float, (3, 3), elements=st.floats(0.01, 100)))
def test_diameter_oracles_agree(A):
    gamma = positive_matrix_diameter(A)
    assert gamma == pytest.approx(_diameter_brute(A), abs=1e-9)
    cols = max(hilbert_metric(A[:, k], A[:, l], POS) for k in range(3) for l in range(3))
    assert gamma == pytest.approx(cols, abs=1e-9)


def test_contraction_examples():
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    assert positive_matrix_diameter(A) == pytest.approx(2 * math.log(2))
    rng = np.random.default_rng(1)
    samples = rng.uniform(0.01, 1, size=(40, 2))
    cert = contraction_certificate(A, POS, POS, samples, gamma_oracle=positive_matrix_diameter(A))
    assert cert.ok and cert.max_ratio <= math.tanh(math.log(2) / 2) + 1e-12
    ident = contraction_certificate(np.eye(2), POS, POS, samples)
    assert ident.max_ratio <= 1 + 1e-12
    rank1 = np.outer([1.0, 2.0], [3.0, 1.0])
    assert positive_matrix_diameter(rank1) == pytest.approx(0.0, abs=1e-12)
    cert = contraction_certificate(rank1, POS, POS, samples)
    assert cert.gamma_estimate == pytest.approx(0.0, abs=1e-12)
    assert cert.max_ratio == pytest.approx(0.0, abs=1e-12)


def test_contraction_mapping_failure():
    cert = contraction_certificate(-np.eye(2), POS, POS, [[1.0, 2.0], [2.0, 1.0]])
    assert cert.mapping_failures == 2 and not cert.ok
    assert '"ok": false' in cert.to_json()


def test_contraction_never_expands():
    rng = np.random.default_rng(2)
    for _ in range(20):
        A = rng.uniform(0, 1, size=(3, 3)) * (rng.random((3, 3)) < 0.7) + np.eye(3)
        cert = contraction_certificate(A, POS, POS, rng.uniform(0.01, 1, size=(15, 3)))
        assert cert.max_ratio <= 1 + 1e-9


def test_norm_bound_examples():
    assert norm_bound_check([1.0, 2.0], [1.0, 2.0], sup_norm, POS)
    f, g = np.array([1.0, 2.0]), np.array([2.0, 1.0])
    assert sup_norm(f - g) == 1.0
    assert math.expm1(hilbert_metric(f, g, POS)) * 2 == pytest.approx(6.0)
    assert norm_bound_check(f, g, sup_norm, POS)
    with pytest.raises(PreconditionError):
        norm_bound_check([1.0, 2.0], [1.0, 1.0], sup_norm, POS)


def test_norm_bound_random_pairs():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        f, g = rng.uniform(0.01, 1, size=(2, 4))
        g *= f.sum() / g.sum()
        assert norm_bound_check(f, g, sup_norm, POS)
