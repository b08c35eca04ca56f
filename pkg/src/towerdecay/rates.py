"""Recursive decay-rate bounds: metric tables R_j, block lengths k_j, the
contraction coefficients gamma_j and the resulting bound u_n.

Everything is carried in log space.  ``R_0(p)`` comes from a
:class:`~towerdecay.tails.TailModel`; the levels are

    k_j    = min{k >= k0 : R_{j-1}(s + k) <= R_0(s) / D}
    R_j(p) = D * (R_0(p) + R_{j-1}(p + k_j))

and ``u_n = prod_{j=2}^{l(n)} gamma_j`` with ``q(l(n)) <= n < q(l(n)+1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .tails import TailModel

D_DEFAULT = 5.0
S_THRESHOLD = 1e-5
K_CAP = 10**7


class RateError(ValueError):
    pass


class HorizonError(RateError):
    """A block length k_j could not be found below the search cap."""


# ---------------------------------------------------------------------------
# R_0 and the choice of s

def tail_sum(tail: TailModel, p):
    """``R_0(p) = sum_{k > p} w_k`` (linear scale; may underflow to 0)."""
    return tail.tail(p)


def choose_s(tail: TailModel, threshold=S_THRESHOLD, cap=10**15):
    """Smallest ``s >= 0`` with ``R_0(s) <= threshold``; 0 for a vanishing tail."""
    if tail.is_zero:
        return 0
    log_thr = math.log(threshold)
    if tail.log_tail(0) <= log_thr:
        return 0
    hi = 1
    while tail.log_tail(hi) > log_thr:
        hi *= 2
        if hi > cap:
            raise RateError("tail does not reach the s threshold below the cap")
    lo = hi // 2  # log_tail(lo) > thr
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tail.log_tail(mid) <= log_thr:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# closed form and block lengths

def closed_form_log_R(tail, ks, level, p, D=D_DEFAULT):
    """log R_level(p) from the expanded sum

        R_l(n) = D^l R_0(k_1+..+k_l+n) + sum_{i=1}^{l} D^{l+1-i} R_0(k_{i+1}+..+k_l+n)
    """
    ks = np.asarray(ks[:level], dtype=np.int64)
    p = np.atleast_1d(np.asarray(p, dtype=np.int64))
    logD = math.log(D)
    if level == 0:
        return tail.log_tail(p)
    # suffix[i] = k_{i+1} + ... + k_l for i = 0..l (suffix[l] = 0)
    suffix = np.concatenate([np.cumsum(ks[::-1])[::-1], [0]])
    coef = np.empty(level + 1)
    coef[0] = level * logD
    coef[1:] = (level + 1 - np.arange(1, level + 1)) * logD
    args = p[None, :] + suffix[:, None]
    vals = tail.log_tail(args.ravel()).reshape(args.shape) + coef[:, None]
    with np.errstate(divide="ignore"):
        return logsumexp(vals, axis=0)


def _level_ok(tail, ks, level, s, k, log_target, D):
    return closed_form_log_R(tail, ks, level, s + k, D)[0] <= log_target


def next_block_length(tail, ks, s, k0=1, D=D_DEFAULT, k_cap=K_CAP, guess=None):
    """Minimal ``k >= k0`` with ``R_level(s + k) <= R_0(s)/D`` (level = len(ks)).

    Uses that ``R_level`` is non-increasing in its argument, so the admissible
    set is an up-set and a bracketing search is exact.
    """
    level = len(ks)
    log_target = tail.log_tail(s) - math.log(D)
    if _level_ok(tail, ks, level, s, k0, log_target, D):
        return k0
    lo = k0  # known to fail
    hi = max(k0 + 1, int(guess) if guess else k0 + 1)
    while not _level_ok(tail, ks, level, s, hi, log_target, D):
        lo = hi
        hi = 2 * hi
        if hi > k_cap:
            if _level_ok(tail, ks, level, s, k_cap, log_target, D):
                hi = k_cap
                break
            raise HorizonError(
                f"k_{level + 1} exceeds cap {k_cap} (tail too heavy for horizon); "
                f"R_{level}(s+cap) = {math.exp(closed_form_log_R(tail, ks, level, s + k_cap, D)[0]):.3e}, "
                f"target {math.exp(log_target):.3e}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _level_ok(tail, ks, level, s, mid, log_target, D):
            hi = mid
        else:
            lo = mid
    return hi


def block_lengths(tail, s, k0=1, D=D_DEFAULT, j_max=None, until_q=None, k_cap=K_CAP):
    """Sequence ``k_1, k_2, ...`` up to ``j_max`` levels or until ``q(j) > until_q``."""
    if j_max is None and until_q is None:
        raise RateError("give j_max or until_q")
    ks = []
    q = 0
    while True:
        if j_max is not None and len(ks) >= j_max:
            break
        if until_q is not None and q > until_q:
            break
        k = next_block_length(tail, ks, s, k0, D, k_cap, guess=ks[-1] if ks else None)
        ks.append(k)
        q += k
    return np.asarray(ks, dtype=np.int64)


# ---------------------------------------------------------------------------
# recursion tables

@dataclass(frozen=True)
class MetricTables:
    tail: TailModel
    s: int
    k0: int
    D: float
    ks: np.ndarray          # ks[j-1] = k_j
    log_R: np.ndarray       # log_R[j, p] for p = 0..horizon

    @property
    def horizon(self):
        return self.log_R.shape[1] - 1

    def R(self, level, p):
        with np.errstate(under="ignore"):
            return np.exp(self.log_R[level, p])

    def log_R_at(self, level, p):
        """Table value where stored, closed form beyond the stored range."""
        p = np.atleast_1d(np.asarray(p, dtype=np.int64))
        out = np.empty(p.shape)
        inside = p <= self.horizon
        out[inside] = self.log_R[level, p[inside]]
        if np.any(~inside):
            out[~inside] = closed_form_log_R(self.tail, self.ks, level, p[~inside], self.D)
        return out


def metric_recursion(tail, s, k0=1, D=D_DEFAULT, j_max=12, horizon=10_000, k_cap=K_CAP):
    """Tables ``log R_j(p)`` for ``j <= j_max`` and ``p <= horizon`` plus the ``k_j``.

    The tables are produced by the level-to-level recursion on integer
    arrays, each level computed over exactly the range the next one needs.
    """
    ks = block_lengths(tail, s, k0, D, j_max=j_max, k_cap=k_cap)
    logD = math.log(D)
    width0 = horizon + 1 + int(ks.sum())
    base = tail.log_tail(np.arange(width0, dtype=np.int64))
    prev = base
    rows = [base[:horizon + 1]]
    for j in range(1, j_max + 1):
        kj = int(ks[j - 1])
        width = len(prev) - kj
        cur = logD + np.logaddexp(base[:width], prev[kj:kj + width])
        rows.append(cur[:horizon + 1])
        prev = cur
    return MetricTables(tail, s, k0, D, ks, np.vstack(rows))


def d_level(tables: MetricTables, level, sep):
    """``d_j(x, y) = R_j(s(x, y))``.  ``sep`` may be ``None`` (identical
    futures, distance 0) or ``-1`` (different atoms at time 0, full mass R_j(0))."""
    if sep is None:
        return 0.0
    sep = max(int(sep), 0)
    return float(np.exp(tables.log_R_at(level, sep)[0]))


# ---------------------------------------------------------------------------
# weights v_n

@dataclass(frozen=True)
class Weight:
    """Non-decreasing weight sequence ``v_n`` with ``log v`` concave."""

    kind: str
    param: float
    knot: float = 0.0

    def log(self, n):
        n = np.asarray(n, dtype=float)
        if self.kind == "constant":
            return np.zeros(n.shape)
        if self.kind == "exponential":
            # v_n = alpha'^{-n}
            return -n * math.log(self.param)
        if self.kind == "polynomial":
            return self.param * np.log1p(n)
        if self.kind == "stretched":
            beta, n0 = self.param, self.knot
            g = lambda x: x ** beta - 2.0 * np.log(x)
            slope = beta * n0 ** (beta - 1) - 2.0 / n0
            x = np.maximum(n, n0)
            return np.where(n >= n0, g(x), g(n0) + slope * (n - n0))
        raise RateError(f"unknown weight kind {self.kind!r}")

    def __call__(self, n):
        return np.exp(self.log(n))

    def describe(self):
        return {"constant": "v_n = 1",
                "exponential": f"v_n = {self.param:g}^(-n)",
                "polynomial": f"v_n = (n+1)^{self.param:g}",
                "stretched": f"v_n = n^-2 exp(n^{self.param:g}) for n >= {self.knot:g}, log-linear below"}[self.kind]


def default_weight(nu_tail: TailModel, eps=0.05):
    """Weight sequence matched to the floor-mass tail ``nu(Delta_n)``."""
    kind = nu_tail.kind
    if kind == "exponential":
        return Weight("exponential", (1.0 + nu_tail.param) / 2.0)
    if kind == "polynomial":
        gamma = nu_tail.param - 1.0 - eps
        if gamma <= 0:
            raise RateError("polynomial floor tail needs beta > 1 + eps")
        return Weight("polynomial", gamma)
    if kind == "stretched":
        beta = nu_tail.param
        # log(n^-2 e^{n^beta}) is concave and increasing once n^beta >= 2/(beta(1-beta))
        knot = (2.0 / (beta * (1.0 - beta))) ** (1.0 / beta)
        return Weight("stretched", beta, knot)
    if kind in ("zero", "explicit"):
        return Weight("constant", 0.0)
    raise RateError(f"no default weight for {kind}")


# ---------------------------------------------------------------------------
# gamma_j and u_n

def partial_sums(ks):
    """``q[j] = k_1 + ... + k_j`` with ``q[0] = 0``."""
    return np.concatenate([[0], np.cumsum(np.asarray(ks, dtype=np.int64))])


def gamma_sequence(ks, weight, D=D_DEFAULT):
    """``log gamma_j`` for ``j = 1 .. len(ks) - 1`` (index 0 holds j = 1).

    gamma_j = max(1/D, v_{q(j)} / v_{q(j+1)})
    """
    q = partial_sums(ks)
    j = np.arange(1, len(ks))
    log_ratio = weight.log(q[j]) - weight.log(q[j + 1])
    if np.any(log_ratio > 1e-12):
        raise RateError("weight sequence is not non-decreasing on the needed range")
    return np.maximum(-math.log(D), np.minimum(log_ratio, 0.0))


def u_bound(n, ks, log_gammas):
    """``(l(n), r, log u_n)`` for an integer or array ``n``."""
    scalar = np.ndim(n) == 0
    n = np.atleast_1d(np.asarray(n, dtype=np.int64))
    q = partial_sums(ks)
    ell = np.searchsorted(q, n, side="right") - 1
    if np.any(ell + 1 > len(ks)) or np.any(ell + 1 > len(log_gammas) + 1):
        raise RateError("n beyond computed range; increase j_max")
    r = n - q[ell]
    # cumulative log gamma_j for j = 2..l
    cum = np.concatenate([[0.0, 0.0], np.cumsum(log_gammas[1:])])
    logu = cum[np.minimum(ell, len(cum) - 1)]
    logu = np.where(ell >= 2, logu, 0.0)
    if scalar:
        return int(ell[0]), int(r[0]), float(logu[0])
    return ell, r, logu


@dataclass
class RateReport:
    omega: TailModel
    nu: TailModel
    s: int
    k0: int
    D: float
    eps: float
    weight: Weight
    ks: np.ndarray
    log_gammas: np.ndarray
    classification: dict = field(default_factory=dict)

    @property
    def q(self):
        return partial_sums(self.ks)

    @property
    def gammas(self):
        return np.exp(self.log_gammas)

    def evaluate(self, n):
        return u_bound(n, self.ks, self.log_gammas)

    def summary(self):
        out = {"omega": self.omega.label(), "nu": self.nu.label(), "s": int(self.s),
               "k0": int(self.k0), "D": float(self.D), "eps": float(self.eps),
               "weight": self.weight.describe(), "levels": int(len(self.ks)),
               "k_first": [int(k) for k in self.ks[:8]]}
        out.update(self.classification)
        return out


def compute_rates(omega, nu, n_max, eps=0.05, D=D_DEFAULT, k0=1, k_cap=K_CAP, weight=None):
    """Full pipeline: s, block lengths covering ``n_max``, gamma_j, classification."""
    s = choose_s(omega)
    ks = block_lengths(omega, s, k0, D, until_q=int(n_max), k_cap=k_cap)
    if len(ks) < 2:
        ks = block_lengths(omega, s, k0, D, j_max=2, k_cap=k_cap)
    weight = weight or default_weight(nu, eps)
    log_gammas = gamma_sequence(ks, weight, D)
    report = RateReport(omega, nu, s, k0, D, eps, weight, ks, log_gammas)
    report.classification = classify_asymptotics(omega, nu, eps, report)
    return report


# ---------------------------------------------------------------------------
# asymptotic classes

def classify_asymptotics(omega, nu, eps=0.05, report=None):
    kinds = (omega.kind, nu.kind)
    out = {"eps": eps}
    if kinds == ("exponential", "exponential"):
        out["class"] = "exponential"
        if report is not None:
            p = int(report.ks[-1])
            alpha_p = (1.0 + nu.param) / 2.0
            kappa = max(1.0 / report.D, alpha_p ** p)
            out.update(block=p, kappa=kappa, rate_per_step=kappa ** (1.0 / p),
                       exponent=-math.log(kappa) / p)
        out["predicted"] = "u_n = kappa^(n/p)"
    elif kinds == ("polynomial", "polynomial"):
        a, b = omega.param, nu.param
        out.update({"class": "polynomial", "exponent": min(a - 1, b - 1 - eps),
                    "theorem_statement_exponent": min(a, b - eps) + 1,
                    "introduction_exponent": min(a, b - eps) - 1,
                    "note": "decay exponent from the explicit block analysis; the theorem "
                            "bullet reads min(alpha, beta-eps)+1 and disagrees"})
    elif kinds == ("stretched", "stretched"):
        a, b = omega.param, nu.param
        out.update({"class": "stretched", "exponent": min(a, b) - eps,
                    "gamma_limit": "1/D" if b > a else "weight ratio",
                    "ell_growth": a})
    else:
        out["class"] = "mixed/numerical"
    if report is not None:
        out["fitted"] = fit_rate(report, out["class"])
    return out


def fit_rate(report, cls, n_lo=None, n_hi=None, points=200):
    """Regression of the computed bound on its class-specific scale."""
    q = report.q
    if n_hi is None:
        n_hi = int(q[-2]) if len(q) > 2 else 10
    n_lo = n_lo or max(1, n_hi // 1000)
    if n_hi <= n_lo:
        return None
    n = np.unique(np.geomspace(n_lo, n_hi, points).astype(np.int64))
    _, _, logu = report.evaluate(n)
    mask = logu < 0
    if mask.sum() < 3:
        return None
    n, logu = n[mask], logu[mask]
    if cls == "exponential":
        x, y = n.astype(float), logu
    elif cls == "stretched":
        x, y = np.log(n), np.log(-logu)
    else:
        x, y = np.log(n), logu
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    r2 = 1 - resid.var() / y.var() if y.var() > 0 else 1.0
    return {"slope": float(slope), "r2": float(r2), "n_range": [int(n[0]), int(n[-1])]}
