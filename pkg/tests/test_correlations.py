import numpy as np
import pytest

from towerdecay.correlations import (NoCleanDecay, fit_decay, lag_grid, monte_carlo_correlations,
                                     operator_correlations, sample_tower_chain, tower_chain)
from towerdecay.tails import TailModel
from towerdecay.tower import TowerSpec, VariationSequence, validate_tower
from towerdecay.transfer import build_operator, invariant_density


@pytest.fixture(scope="module")
def two_state():
    spec = TowerSpec.build([0.6, 0.4], [1, 1], [[1, 2], [1]])
    spec = validate_tower(spec, VariationSequence(TailModel.zero())).spec
    op = build_operator(spec, depth=2)
    return op.with_density(invariant_density(op).h)


def test_fit_exponential_synthetic():
    n = np.arange(1, 30)
    fit = fit_decay(n, 5.0 ** -n, "exponential")
    assert fit.value == pytest.approx(np.log(5), abs=1e-6)
    assert fit.r2 == pytest.approx(1.0)


def test_fit_polynomial_synthetic():
    n = np.unique(np.geomspace(1, 1000, 40).astype(int))
    fit = fit_decay(n, n ** -2.0, "polynomial")
    assert fit.value == pytest.approx(2.0, abs=1e-3)


def test_fit_noisy_polynomial():
    n = np.unique(np.geomspace(1, 1000, 40).astype(int))
    noise = np.random.default_rng(0).uniform(-1, 1, n.size)
    fit = fit_decay(n, n ** -2.0 * (1 + 0.1 * noise), "polynomial")
    assert abs(fit.value - 2.0) <= 0.1
    assert fit.r2 >= 0.99
    assert fit.band[0] <= fit.value <= fit.band[1]


def test_fit_stretched_synthetic():
    n = np.unique(np.geomspace(10, 10**4, 40).astype(int))
    fit = fit_decay(n, np.exp(-(n ** 0.5)), "stretched")
    assert fit.value == pytest.approx(0.5, abs=1e-9)


def test_no_clean_decay():
    n = np.arange(1, 20)
    with pytest.raises(NoCleanDecay):
        fit_decay(n, np.where(n % 2, 1.0, 1e-6), "polynomial")
    with pytest.raises(NoCleanDecay):
        fit_decay(n[:5], n[:5] ** -2.0, "polynomial")


def test_lag_grid():
    g = lag_grid(1000)
    assert g[:11].tolist() == list(range(11))
    assert g[-1] == 1000 and np.all(np.diff(g) > 0)
    assert lag_grid(5).tolist() == [0, 1, 2, 3, 4, 5]


def _eigen_oracle(op, phi, psi, lags):
    """Cor(n) from a dense eigendecomposition of L0."""
    w, V = np.linalg.eig(op.L0.toarray())
    coef = np.linalg.solve(V, phi * op.h)
    mean = (op.mu @ phi) * (op.mu @ psi)
    row = (psi * op.nu) @ V
    return np.array([(row * w ** n) @ coef for n in lags]).real - mean


def test_operator_matches_eigen_oracle(two_state):
    op = two_state
    phi = (op.base_atoms() == 0).astype(float)
    psi = np.random.default_rng(0).normal(size=op.size)
    lags = np.arange(0, 40)
    series = operator_correlations(op, phi, psi, 39, lags)
    assert np.max(np.abs(series.cor - _eigen_oracle(op, phi, psi, lags))) < 1e-8
    # single non-trivial eigenvalue: Cor(n) = c * lambda2^n
    lam2 = sorted(np.abs(np.linalg.eigvals(op.L0.toarray())))[-2]
    ratio = series.cor[2:20] / series.cor[1:19]
    assert np.allclose(np.abs(ratio), lam2, atol=1e-8)


def test_constants_are_uncorrelated(two_state):
    op = two_state
    one = np.ones(op.size)
    series = operator_correlations(op, one, one, 100)
    assert np.max(np.abs(series.cor)) < 1e-14
    states = sample_tower_chain(op, chains=10, length=200, burn_in=10, seed=0)
    mc = monte_carlo_correlations(states, one, one, 50, truncate=False)
    assert np.all(mc.cor == 0)


def test_tower_chain_is_stochastic(two_state):
    P = tower_chain(two_state)
    assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)
    mu = two_state.mu
    assert np.allclose(mu @ P.toarray(), mu)


def test_operator_and_monte_carlo_agree(two_state):
    op = two_state
    phi = (op.base_atoms() == 0).astype(float)
    psi = phi.copy()
    lags = np.arange(0, 8)
    exact = operator_correlations(op, phi, psi, 7, lags)
    states = sample_tower_chain(op, chains=200, length=2000, burn_in=200, seed=1)
    mc = monte_carlo_correlations(states, phi, psi, 7, lags, seed=1, truncate=False)
    assert np.all(np.abs(mc.cor - exact.cor) <= 4 * mc.stderr + 1e-4)


def test_monte_carlo_truncation_warns():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(20, 500))
    with pytest.warns(RuntimeWarning, match="noise floor"):
        series = monte_carlo_correlations((A, A), None, None, 100, seed=0)
    assert series.truncated and 0 in series.n


def test_series_csv(tmp_path, two_state):
    op = two_state
    phi = np.arange(op.size, dtype=float)
    operator_correlations(op, phi, phi, 20).to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "n,cor,stderr" and lines[1].startswith("0,")
