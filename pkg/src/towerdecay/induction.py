"""Inducing an interval map with an indifferent fixed point onto [1/2, 1].

The map has an indifferent fixed point at 0 on its left branch and a right
branch whose derivative has only a logarithmic modulus of continuity at
x = 1/2.  Returns to the base are counted with a density constraint: the
return time of ``x`` is the first ``n >= 1`` with ``f^n x >= 1/2`` and at
least ``eps0 * n`` of the times ``0..n-1`` spent in the base.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .tails import TailModel
from .tower import BaseAtom, TowerSpec

LEFT_FORMS = ("lsv", "literal")


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class MapParams:
    gamma: float = 0.4
    alpha: float = 2.0
    eps0: float = 0.01
    left: str = "lsv"

    def __post_init__(self):
        if not 0 < self.gamma < 0.5:
            raise DomainError("gamma must lie in (0, 1/2)")
        if not self.alpha > 1:
            raise DomainError("alpha must exceed 1")
        if self.eps0 < 0:
            raise DomainError("eps0 must be non-negative")
        if self.left not in LEFT_FORMS:
            raise DomainError(f"left branch must be one of {LEFT_FORMS}")


def _left(x, p: MapParams):
    g = p.gamma
    if p.left == "lsv":
        return x + 2.0 ** g * x ** (1 + g)
    return 2.0 ** (1 + g) * (x + x ** (1 + g)) / (2.0 ** g + 1)


def _left_deriv(x, p: MapParams):
    g = p.gamma
    if p.left == "lsv":
        return 1.0 + 2.0 ** g * (1 + g) * x ** g
    return 2.0 ** (1 + g) * (1 + (1 + g) * x ** g) / (2.0 ** g + 1)


def _right(u, p: MapParams):
    """Right branch as a function of ``u = x - 1/2`` in (0, 1/2]."""
    c = math.log(2.0) ** p.alpha / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        val = 1.5 * u + u * c / (-np.log(u)) ** p.alpha
    return np.where(u > 0, val, 0.0)


def _right_deriv(u, p: MapParams):
    c = math.log(2.0) ** p.alpha / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        L = -np.log(u)
        val = 1.5 + c * (L ** -p.alpha + p.alpha * L ** (-p.alpha - 1))
    return np.where(u > 0, val, 1.5)


def map_eval(x, params: MapParams):
    """``f(x)`` on [0, 1]; the left branch owns [0, 1/2) and the right (1/2, 1].

    The point 1/2 itself is sent to 0 (limit of the right branch).
    """
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)) or np.any(~np.isfinite(x)):
        raise DomainError("map is defined on [0, 1]")
    return _apply(x, params)


def _apply(x, p):
    left = x < 0.5
    out = np.empty_like(x)
    out[left] = _left(x[left], p)
    out[~left] = _right(x[~left] - 0.5, p)
    return np.clip(out, 0.0, 1.0)


def map_deriv(x, params: MapParams):
    x = np.asarray(x, dtype=float)
    left = x < 0.5
    out = np.empty_like(x)
    out[left] = _left_deriv(x[left], params)
    out[~left] = _right_deriv(x[~left] - 0.5, params)
    return out


# ---------------------------------------------------------------------------
# return times

@dataclass
class Returns:
    R: np.ndarray            # -1 where censored
    log_jac: np.ndarray      # log |(f^R)'|
    image: np.ndarray        # f^R x
    evaluations: int


def return_times(x, params: MapParams, max_return=100_000, budget=None):
    """Induced return times for base points ``x`` (vectorized).

    Points still travelling after ``max_return`` steps, or when the total
    number of map evaluations would exceed ``budget``, are censored.  Points
    landing exactly on the fixed point 0 never return and are censored at once.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    R = np.full(n, -1, dtype=np.int64)
    logj = np.zeros(n)
    img = np.full(n, np.nan)
    idx = np.arange(n)
    cur = x.copy()
    lj = np.zeros(n)
    count = (cur >= 0.5).astype(np.int64)
    evals = 0
    for k in range(1, max_return + 1):
        if idx.size == 0:
            break
        if budget is not None and evals + idx.size > budget:
            break
        evals += idx.size
        lj += np.log(map_deriv(cur, params))
        cur = _apply(cur, params)
        inb = cur >= 0.5
        done = inb & (count >= params.eps0 * k)
        stuck = cur == 0.0
        count += inb
        if np.any(done):
            R[idx[done]] = k
            logj[idx[done]] = lj[done]
            img[idx[done]] = cur[done]
        keep = ~(done | stuck)
        idx, cur, lj, count = idx[keep], cur[keep], lj[keep], count[keep]
    return Returns(R, logj, img, evals)


# ---------------------------------------------------------------------------
# induced tower

@dataclass
class Cell:
    a: float
    b: float
    R: int
    image: tuple = ()        # (F(a), F(b))


@dataclass
class EmpiricalTail:
    returns: np.ndarray          # distinct return times
    masses: np.ndarray           # normalized Lebesgue mass of {R = n}
    censored_mass: float
    oscillation: np.ndarray      # estimated w_n, n = 1..len
    nu_fit: dict = field(default_factory=dict)
    omega_fit: dict = field(default_factory=dict)

    def floor_masses(self, n_max=None):
        """``nu(Delta_n) / nu(Delta_0)`` i.e. the mass of ``{R > n}`` for n = 0..n_max."""
        n_max = int(self.returns.max()) if n_max is None else n_max
        n = np.arange(n_max + 1)
        order = np.argsort(self.returns)
        r, m = self.returns[order], self.masses[order]
        tail = np.concatenate([np.cumsum(m[::-1])[::-1], [0.0]])
        pos = np.searchsorted(r, n, side="right")
        return tail[pos]

    def nu_tail(self):
        return TailModel.polynomial(self.nu_fit["exponent"], scale=self.nu_fit.get("scale", 1.0))

    def omega_tail(self):
        return TailModel.polynomial(max(self.omega_fit["exponent"], 1.0 + 1e-6),
                                    scale=self.omega_fit.get("scale", 1.0))


@dataclass
class InducedTower:
    params: MapParams
    cells: list
    censored: list               # (a, b) intervals
    tail: EmpiricalTail
    evaluations: int

    def spec(self, max_atoms=None):
        """Tower with one atom per distinct return time (a lumped Markov model)."""
        return lumped_spec(self.cells, max_atoms)


def induce_tower(params: MapParams, grid=4096, max_level=12, max_return=100_000,
                 budget=10**7, osc_samples=1 << 16, osc_depth=8, seed=0,
                 fit_range=(10, None)):
    """Partition the base into cells of constant return time and measure tails."""
    edges = 0.5 + 0.5 * np.arange(grid + 1) / grid
    cache = {}
    evals = 0

    def eval_points(pts):
        nonlocal evals
        new = np.array(sorted({float(p) for p in pts if float(p) not in cache}))
        if new.size:
            left = None if budget is None else max(budget - evals, 0)
            res = return_times(new, params, max_return, left)
            evals += res.evaluations
            for p, r, im in zip(new, res.R, res.image):
                cache[p] = (int(r), float(im))

    eval_points(edges)
    work = [(edges[i], edges[i + 1], 0) for i in range(grid)]
    cells, censored = [], []
    while work:
        split = []
        for a, b, lev in work:
            ra, rb = cache[a][0], cache[b][0]
            if ra == rb and ra > 0:
                cells.append(Cell(a, b, ra, (cache[a][1], cache[b][1])))
            elif lev < max_level:
                split.append((a, b, lev))
            else:
                censored.append((a, b))
        mids = [(a + b) / 2 for a, b, _ in split]
        eval_points(mids)
        work = []
        for (a, b, lev), m in zip(split, mids):
            work.append((a, m, lev + 1))
            work.append((m, b, lev + 1))
    cells.sort(key=lambda c: c.a)
    censored.sort()
    total = 0.5
    cmass = sum(b - a for a, b in censored) / total
    Rs = np.array([c.R for c in cells])
    mass = np.array([c.b - c.a for c in cells]) / total
    uniq, inv = np.unique(Rs, return_inverse=True)
    hist = np.bincount(inv, weights=mass)
    hist = hist / hist.sum()
    osc = estimate_oscillation(params, osc_samples, osc_depth, seed, max_return)
    tail = EmpiricalTail(uniq, hist, cmass, osc)
    lo, hi = fit_range
    tail.nu_fit = fit_floor_tail(tail, lo, hi)
    tail.omega_fit = fit_power(np.arange(1, len(osc) + 1), osc)
    return InducedTower(params, cells, censored, tail, evals)


def fit_power(n, y):
    """Least-squares slope of ``log y`` against ``log n``; exponent is ``-slope``."""
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = y > 0
    if ok.sum() < 2:
        return {"exponent": float("nan"), "r2": float("nan"), "stderr": float("nan"), "points": int(ok.sum())}
    X, Y = np.log(n[ok]), np.log(y[ok])
    A = np.vstack([X, np.ones_like(X)]).T
    coef, res, *_ = np.linalg.lstsq(A, Y, rcond=None)
    pred = A @ coef
    ss = float(np.sum((Y - Y.mean()) ** 2))
    r2 = 1 - float(np.sum((Y - pred) ** 2)) / ss if ss > 0 else 1.0
    dof = max(len(X) - 2, 1)
    sigma2 = float(np.sum((Y - pred) ** 2)) / dof
    se = math.sqrt(sigma2 / float(np.sum((X - X.mean()) ** 2))) if len(X) > 2 else 0.0
    return {"exponent": float(-coef[0]), "scale": float(math.exp(coef[1])), "r2": r2,
            "stderr": se, "band": [float(-coef[0] - 2 * se), float(-coef[0] + 2 * se)],
            "points": int(ok.sum())}


def fit_floor_tail(tail: EmpiricalTail, n_lo=10, n_hi=None):
    """Fit ``nu(Delta_n) ~ n^-beta`` on a geometric grid of floors.

    The upper end defaults to the largest floor whose mass still exceeds
    ten times the censored mass.
    """
    fm = tail.floor_masses()
    if n_hi is None:
        floor = max(10 * tail.censored_mass, 1e-300)
        above = np.flatnonzero(fm > floor)
        n_hi = int(above.max()) if above.size else len(fm) - 1
    n_hi = min(n_hi, len(fm) - 1)
    if n_hi <= n_lo:
        return {"exponent": float("nan"), "n_range": [n_lo, n_hi]}
    grid = np.unique(np.geomspace(n_lo, n_hi, 40).astype(np.int64))
    fit = fit_power(grid, fm[grid])
    fit["n_range"] = [int(n_lo), int(n_hi)]
    return fit


def estimate_oscillation(params: MapParams, samples=1 << 16, depth=8, seed=0, max_return=100_000):
    """Sampled oscillation of ``log JF`` over n-cylinders, n = 1..depth.

    Cylinders are labelled by the sequence of return times along the
    induced orbit.  Sample points are uniform on the base; the estimate is
    the largest spread of ``log JF`` within any sampled cylinder.
    """
    rng = np.random.default_rng(seed)
    x = 0.5 + 0.5 * rng.random(samples)
    first = return_times(x, params, max_return)
    ok = first.R > 0
    x, lj0 = x[ok], first.log_jac[ok]
    labels = [first.R[ok]]
    cur = first.image[ok]
    for _ in range(depth - 1):
        res = return_times(cur, params, max_return)
        good = res.R > 0
        labels = [lab[good] for lab in labels]
        x, lj0, cur = x[good], lj0[good], res.image[good]
        labels.append(res.R[good])
    out = []
    for n in range(1, depth + 1):
        key = np.stack(labels[:n], axis=1)
        _, grp = np.unique(key, axis=0, return_inverse=True)
        grp = grp.ravel()
        hi = np.full(grp.max() + 1, -np.inf)
        lo = np.full(grp.max() + 1, np.inf)
        np.maximum.at(hi, grp, lj0)
        np.minimum.at(lo, grp, lj0)
        out.append(float(np.max(hi - lo)))
    return np.array(out)


def lumped_spec(cells, max_atoms=None):
    """Atoms are the sets ``{R = r}``; an atom's image lists every atom met by
    the images of its cells."""
    Rs = np.array([c.R for c in cells])
    uniq = np.unique(Rs)
    if max_atoms is not None and len(uniq) > max_atoms:
        uniq = uniq[:max_atoms]
    keep = np.isin(Rs, uniq)
    cells = [c for c, k in zip(cells, keep) if k]
    Rs = Rs[keep]
    starts = np.array([c.a for c in cells])
    ends = np.array([c.b for c in cells])
    atom_of = {int(r): n + 1 for n, r in enumerate(uniq)}
    atoms = []
    for r in uniq:
        members = [c for c in cells if c.R == r]
        mass = sum(c.b - c.a for c in members)
        hit = set()
        for c in members:
            lo, hi = sorted(c.image)
            i0 = max(int(np.searchsorted(ends, lo, side="right")), 0)
            i1 = int(np.searchsorted(starts, hi, side="left"))
            hit.update(atom_of[int(R)] for R in Rs[i0:max(i1, i0 + 1)])
        atoms.append(BaseAtom(atom_of[int(r)], mass, int(r), tuple(sorted(hit))))
    return TowerSpec(tuple(atoms))


# ---------------------------------------------------------------------------
# Monte Carlo orbits of the map

def sample_orbits(params: MapParams, chains=1000, length=10_000, burn_in=10_000, seed=0,
                  observables=(lambda x: x,)):
    """Parallel orbits of ``f`` from uniform random starts.

    Returns one array per observable of shape ``(chains, length)``.
    """
    rng = np.random.default_rng(seed)
    x = rng.random(chains)
    for _ in range(burn_in):
        x = _apply(x, params)
    out = [np.empty((chains, length)) for _ in observables]
    for t in range(length):
        for arr, obs in zip(out, observables):
            arr[:, t] = obs(x)
        x = _apply(x, params)
    return out


def write_tail_csv(tail: EmpiricalTail, path_mass, path_osc):
    with open(path_mass, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n", "mass"])
        for n, m in zip(tail.returns, tail.masses):
            wr.writerow([int(n), repr(float(m))])
    with open(path_osc, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n", "oscillation"])
        for n, w in enumerate(tail.oscillation, start=1):
            wr.writerow([n, repr(float(w))])
