"""Correlation sequences and decay fits."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .transfer import OperatorModel


class NoCleanDecay(ValueError):
    pass


@dataclass
class CorrelationSeries:
    n: np.ndarray
    cor: np.ndarray
    stderr: np.ndarray
    method: str
    seed: int | None = None
    meta: dict = field(default_factory=dict)
    truncated: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["n", "cor", "stderr"])
            for n, c, s in zip(self.n, self.cor, self.stderr):
                wr.writerow([int(n), repr(float(c)), repr(float(s))])


def lag_grid(n_max, points=40):
    """All lags up to 10, then a geometric grid up to ``n_max``."""
    head = np.arange(0, min(n_max, 10) + 1)
    if n_max <= 10:
        return head
    tail = np.geomspace(10, n_max, points).round().astype(np.int64)
    return np.unique(np.concatenate([head, tail]))


def correlation_series(model, phi, psi, n_max, lags=None, **kw):
    """Dispatch to the operator or Monte Carlo estimator."""
    if isinstance(model, OperatorModel):
        return operator_correlations(model, phi, psi, n_max, lags)
    return monte_carlo_correlations(model, phi, psi, n_max, lags, **kw)


def operator_correlations(op: OperatorModel, phi, psi, n_max, lags=None):
    """``Cor(n) = int psi L^n(phi) dmu - int phi dmu int psi dmu`` by sparse powers."""
    if op.h is None:
        raise ValueError("operator needs its invariant density")
    lags = lag_grid(n_max) if lags is None else np.asarray(lags)
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    mu = op.mu
    mean = float(mu @ phi) * float(mu @ psi)
    g = phi * op.h
    out = np.empty(len(lags))
    want = {int(n): i for i, n in enumerate(lags)}
    for n in range(int(lags.max()) + 1):
        if n in want:
            out[want[n]] = float(op.nu @ (psi * g)) - mean
        g = op.L0 @ g
    return CorrelationSeries(lags, out, np.zeros(len(lags)), "operator-power",
                             meta={"depth": op.depth})


def tower_chain(op: OperatorModel):
    """Transition matrix ``P[x, x'] = nu(x') / (JF(x) nu(x))`` of the cylinder chain."""
    coo = op.L0.tocoo()
    # L0[x', y] = 1/JF(y) for y mapping over x'; the chain moves y -> x'
    vals = coo.data * op.nu[coo.row] / op.nu[coo.col]
    return sp.csr_matrix((vals, (coo.col, coo.row)), shape=op.L0.shape)


def sample_tower_chain(op: OperatorModel, chains=200, length=10_000, burn_in=10_000, seed=0):
    """Parallel stationary runs of the cylinder chain; returns states ``(chains, length)``."""
    P = tower_chain(op)
    rng = np.random.default_rng(seed)
    cdf_rows = []
    for i in range(op.size):
        lo, hi = P.indptr[i], P.indptr[i + 1]
        cdf_rows.append((P.indices[lo:hi], np.cumsum(P.data[lo:hi])))
    mu = op.mu / op.mu.sum()
    x = rng.choice(op.size, size=chains, p=mu)
    states = np.empty((chains, length), dtype=np.int64)

    def step(x):
        u = rng.random(len(x))
        nxt = np.empty_like(x)
        for c, s in enumerate(x):
            idx, cdf = cdf_rows[s]
            nxt[c] = idx[min(np.searchsorted(cdf, u[c] * cdf[-1]), len(idx) - 1)]
        return nxt

    for _ in range(burn_in):
        x = step(x)
    for t in range(length):
        states[:, t] = x
        x = step(x)
    return states


def monte_carlo_correlations(samples, phi, psi, n_max, lags=None, seed=None, noise_factor=2.0,
                             truncate=True):
    """Covariance at lag n from parallel orbits.

    ``samples`` is a pair ``(A, B)`` of arrays ``(chains, T)`` holding
    ``phi`` and ``psi`` along the orbits, or an integer state array that is
    mapped through the vectors ``phi`` and ``psi``.  The standard error is
    the spread of per-chain estimates; lags whose estimate is within
    ``noise_factor`` standard errors of zero are dropped with a warning.
    """
    if isinstance(samples, tuple):
        A, B = samples
    else:
        A = np.asarray(phi)[samples]
        B = np.asarray(psi)[samples]
    lags = lag_grid(n_max) if lags is None else np.asarray(lags)
    T = A.shape[1]
    lags = lags[lags < T]
    ma, mb = A.mean(), B.mean()
    Ac, Bc = A - ma, B - mb
    cor = np.empty(len(lags))
    se = np.empty(len(lags))
    for i, n in enumerate(lags):
        n = int(n)
        per_chain = np.mean(Ac[:, n:] * Bc[:, :T - n], axis=1)
        cor[i] = per_chain.mean()
        se[i] = per_chain.std(ddof=1) / math.sqrt(len(per_chain)) if len(per_chain) > 1 else 0.0
    dropped = []
    if truncate:
        keep = np.abs(cor) > noise_factor * se
        keep[lags == 0] = True
        dropped = [int(n) for n in lags[~keep]]
        if dropped:
            warnings.warn(f"{len(dropped)} lags below the Monte Carlo noise floor were dropped",
                          RuntimeWarning, stacklevel=2)
        lags, cor, se = lags[keep], cor[keep], se[keep]
    return CorrelationSeries(lags, cor, se, "monte-carlo", seed,
                             meta={"chains": int(A.shape[0]), "length": int(T)},
                             truncated=dropped)


# ---------------------------------------------------------------------------

@dataclass
class DecayFit:
    cls: str
    value: float          # rate (exponential), exponent (polynomial) or slope (stretched)
    r2: float
    band: tuple
    points: int


def _regress(X, Y):
    A = np.vstack([X, np.ones_like(X)]).T
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    pred = A @ coef
    ss = float(np.sum((Y - Y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((Y - pred) ** 2)) / ss if ss > 0 else 1.0
    return coef, pred, r2


def fit_decay(n, cor=None, cls="polynomial", min_points=8, bootstrap=200, seed=0,
              monotone_tol=0.25):
    """Fit a decay class to ``|Cor(n)|``.

    exponential: rate ``-slope`` of log|Cor| against n; polynomial: exponent
    ``-slope`` against log n; stretched: slope of log(-log|Cor|) against log n.
    The band is the 2.5-97.5% range over residual bootstrap replicates.
    """
    if isinstance(n, CorrelationSeries):
        n, cor = n.n, n.cor
    n = np.asarray(n, dtype=float)
    y = np.abs(np.asarray(cor, dtype=float))
    ok = (n > 0) & (y > 0) & np.isfinite(y)
    if cls == "stretched":
        ok &= y < 1
    n, y = n[ok], y[ok]
    if len(n) < min_points:
        raise NoCleanDecay(f"only {len(n)} usable lags (need {min_points})")
    logy = np.log(y)
    rises = np.diff(logy)
    if np.any(rises > monotone_tol * max(1.0, float(np.ptp(logy)))):
        raise NoCleanDecay("series is not monotone within tolerance")
    if cls == "exponential":
        X, Y = n, logy
    elif cls == "polynomial":
        X, Y = np.log(n), logy
    elif cls == "stretched":
        X, Y = np.log(n), np.log(-logy)
    else:
        raise ValueError(f"unknown decay class {cls!r}")
    coef, pred, r2 = _regress(X, Y)
    sign = 1.0 if cls == "stretched" else -1.0
    value = sign * coef[0]
    resid = Y - pred
    rng = np.random.default_rng(seed)
    reps = []
    for _ in range(bootstrap):
        Yb = pred + rng.choice(resid, size=len(resid), replace=True)
        cb, _, _ = _regress(X, Yb)
        reps.append(sign * cb[0])
    band = (float(np.percentile(reps, 2.5)), float(np.percentile(reps, 97.5))) if reps else (value, value)
    return DecayFit(cls, float(value), float(r2), band, int(len(n)))
