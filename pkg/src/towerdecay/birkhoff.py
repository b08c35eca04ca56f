"""Birkhoff cones and the Hilbert projective pseudo-metric."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

REL_TOL = 1e-10


class ConeDomainError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class GenericCone:
    """A convex cone given by a membership predicate.

    Subclasses may override :meth:`mu` with a closed form.
    """

    def __init__(self, predicate, beta_max=1e12, name="cone"):
        self.predicate = predicate
        self.beta_max = beta_max
        self.name = name

    def contains(self, f):
        return bool(self.predicate(np.asarray(f, dtype=float)))

    def mu(self, f, g):
        """``inf {beta > 0 : beta f - g in C}`` by bisection on beta."""
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        if self.contains(-g):
            return 0.0
        hi = 1.0
        while not self.contains(hi * f - g):
            hi *= 2.0
            if hi > self.beta_max:
                return math.inf
        lo = 0.0
        while hi - lo > REL_TOL * hi:
            mid = 0.5 * (lo + hi)
            if self.contains(mid * f - g):
                hi = mid
            else:
                lo = mid
        return hi


class PositiveCone(GenericCone):
    """Non-negative vectors of a fixed dimension (closed positive cone)."""

    def __init__(self, tol=0.0):
        super().__init__(lambda f: bool(np.all(f >= -tol)), name="positive")
        self.tol = tol

    def mu(self, f, g):
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        pos = f > 0
        if np.any(~pos & (g > 0)):
            return math.inf
        if not np.any(pos):
            return 0.0
        return max(0.0, float(np.max(g[pos] / f[pos])))


def cone_mu(f, g, cone: GenericCone):
    f = np.asarray(f, dtype=float)
    if not cone.contains(f) or not np.any(f):
        raise ConeDomainError("first argument must be a non-zero element of the cone")
    return cone.mu(f, g)


def hilbert_metric(f, g, cone: GenericCone):
    """``log(mu(f, g) mu(g, f))``; ``inf`` when either factor is infinite."""
    a = cone_mu(f, g, cone)
    b = cone_mu(g, f, cone)
    if not (math.isfinite(a) and math.isfinite(b)) or a == 0 or b == 0:
        return math.inf
    return max(0.0, math.log(a) + math.log(b))


def theta_plus_preamble(f, g):
    """``(sup f / inf f) (sup g / inf g)``, the alternative positive-cone formula
    kept only for comparison with :func:`hilbert_metric`."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.min() <= 0 or g.min() <= 0:
        return math.inf
    return float(f.max() / f.min() * g.max() / g.min())


def positive_matrix_diameter(A):
    """Projective diameter of ``A`` applied to the positive cone.

    ``max_{i,j,k,l} log(A_ik A_jl / (A_jk A_il))``; infinite when some entry
    vanishes.
    """
    A = np.asarray(A, dtype=float)
    if np.any(A <= 0):
        if np.linalg.matrix_rank(A) == 1 and np.all(A >= 0):
            return 0.0
        return math.inf
    L = np.log(A)
    # max over row pairs of (max over columns of the difference) minus its min
    diff = L[:, None, :] - L[None, :, :]
    return float(np.max(diff.max(axis=2) - diff.min(axis=2)))


def positive_hilbert(f, g):
    """Vectorized Hilbert metric on the positive cone; rows are vectors."""
    f = np.atleast_2d(np.asarray(f, dtype=float))
    g = np.atleast_2d(np.asarray(g, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.log(g) - np.log(f)
    return r.max(axis=1) - r.min(axis=1)


@dataclass
class ContractionCertificate:
    gamma_estimate: float
    tanh_bound: float
    max_ratio: float
    samples: int
    pairs: int
    mapping_failures: int = 0
    gamma_oracle: float | None = None
    notes: list = field(default_factory=list)

    @property
    def ok(self):
        if self.mapping_failures:
            return False
        gamma = self.gamma_oracle if self.gamma_oracle is not None else self.gamma_estimate
        bound = 1.0 if not math.isfinite(gamma) else math.tanh(gamma / 4)
        return self.max_ratio <= bound + 1e-9

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None if math.isnan(v) else "inf"
        d["ok"] = self.ok
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def contraction_certificate(P, cone_in: GenericCone, cone_out: GenericCone, samples,
                            gamma_oracle=None):
    """Empirical contraction of ``P`` between two cones.

    ``P`` is a matrix or a callable; ``samples`` is an array of cone
    elements (one per row).  Gamma is estimated from below as the largest
    pairwise distance between images.
    """
    apply = P if callable(P) else (lambda f, M=np.asarray(P, dtype=float): M @ f)
    samples = [np.asarray(s, dtype=float) for s in samples]
    images = [apply(s) for s in samples]
    failures = sum(not cone_out.contains(im) for im in images)
    cert = ContractionCertificate(0.0, 0.0, 0.0, len(samples), 0, failures,
                                  gamma_oracle)
    if failures:
        cert.notes.append(f"{failures} images outside the target cone")
        return cert
    gamma = 0.0
    worst = 0.0
    pairs = 0
    for a, b in itertools.combinations(range(len(samples)), 2):
        d_out = hilbert_metric(images[a], images[b], cone_out)
        gamma = max(gamma, d_out)
        d_in = hilbert_metric(samples[a], samples[b], cone_in)
        pairs += 1
        if d_in == 0 or not math.isfinite(d_in):
            if d_out > 1e-12 and d_in == 0:
                worst = math.inf
            continue
        worst = max(worst, d_out / d_in)
    cert.gamma_estimate = gamma
    cert.tanh_bound = math.tanh(gamma / 4) if math.isfinite(gamma) else 1.0
    cert.max_ratio = worst
    cert.pairs = pairs
    return cert


def norm_bound_check(f, g, norm, cone: GenericCone, rho=None, rtol=1e-12):
    """``||f - g|| <= (e^delta - 1) min(||f||, ||g||)`` for ``rho(f) = rho(g)``."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    rho = rho or np.sum
    rf, rg = float(rho(f)), float(rho(g))
    if abs(rf - rg) > rtol * max(abs(rf), abs(rg), 1e-300) or rf == 0:
        raise PreconditionError("norm bound needs rho(f) = rho(g) != 0")
    lhs = norm(f - g)
    delta = hilbert_metric(f, g, cone)
    if not math.isfinite(delta):
        return True
    rhs = math.expm1(delta) * min(norm(f), norm(g))
    return bool(lhs <= rhs + 1e-12 * max(1.0, rhs))


def sup_norm(f):
    return float(np.max(np.abs(f))) if np.size(f) else 0.0
