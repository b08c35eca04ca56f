"""Transfer operator of a finite tower on the basis of depth-m cylinders.

A depth-m cylinder is an admissible word ``(a_0, ..., a_{m-1})`` of tower
atoms.  The Jacobian is a function of the depth-m cylinder of its argument,
so the operator

    L0 f(x) = sum_{F y = x} f(y) / JF(y)

maps functions of depth-m cylinders to functions of depth-(m-1) cylinders
and is exact on the truncated symbolic model.  The reference measure is the
conformal measure of that operator (the product measure built from the atom
masses when the Jacobian is unperturbed).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .tails import TailModel
from .tower import NEVER, TowerSpec, spectral_decomposition

H_FLOOR = 1e-14


class OperatorError(ValueError):
    pass


class DensityConvergenceError(OperatorError):
    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class JacobianModel:
    """Jacobian of F with respect to the reference measure.

    On climbing floors JF = 1.  On a returning floor of atom j it equals
    ``nu(f0(Delta_0j)) / m_j`` times ``exp(theta)``, where ``theta`` is a sum of
    deterministic log-offsets attached to the prefixes of the cylinder word.
    The offset on prefixes of length k+1 is bounded by
    ``amplitude * (w*_k - w*_{k+1}) / 2`` with ``w*`` the running minimum of the
    variation sequence, so the oscillation of log JF over n-cylinders stays
    below ``w_n`` whenever ``amplitude <= 1``.
    """

    variation: TailModel | None = None
    seed: int = 0
    amplitude: float = 1.0

    @property
    def perturbed(self):
        return self.variation is not None and not self.variation.is_zero and self.amplitude != 0

    def envelope(self, depth):
        """Running minimum ``w*_k`` for k = 1..depth (index 0 holds k = 1)."""
        w = self.variation.terms(np.arange(1, depth + 1))
        return np.minimum.accumulate(w)

    def offsets(self, words, depth):
        """Log-offset ``theta(word)`` for each word (tuple of tower-atom indices)."""
        if not self.perturbed:
            return np.zeros(len(words))
        env = np.concatenate([self.envelope(depth), [0.0]])
        bound = self.amplitude * np.maximum(env[:-1] - env[1:], 0.0) / 2.0
        cache = {}
        out = np.zeros(len(words))
        for n, w in enumerate(words):
            total = 0.0
            for k in range(1, len(w)):
                key = w[:k + 1]
                if key not in cache:
                    rng = np.random.default_rng([self.seed, *key])
                    cache[key] = rng.uniform(-1.0, 1.0)
                total += cache[key] * bound[k - 1]
            out[n] = total
        return out


@dataclass(frozen=True)
class OperatorModel:
    spec: TowerSpec
    depth: int
    words: tuple                 # tuples of tower-atom indices
    L0: sp.csr_matrix            # L0[x, y] = 1/JF(y) when F maps cylinder y over x
    log_jac: np.ndarray          # log JF on each basis cylinder
    nu: np.ndarray               # conformal measure of each basis cylinder
    jacobian: JacobianModel
    period: int = 1
    h: np.ndarray | None = None

    @property
    def size(self):
        return len(self.words)

    @property
    def mu(self):
        if self.h is None:
            raise OperatorError("invariant density not computed")
        return self.h * self.nu

    def with_density(self, h):
        return replace(self, h=np.asarray(h, dtype=float))

    def label(self, n):
        ids = self.spec.ids
        return "-".join(f"{ids[self.spec.tower_atoms[a][0]]}.{self.spec.tower_atoms[a][1]}"
                        for a in self.words[n])

    def first_atoms(self):
        return np.array([w[0] for w in self.words])

    def floors(self):
        return np.array([self.spec.tower_atoms[w[0]][1] for w in self.words])

    def base_atoms(self):
        return np.array([self.spec.tower_atoms[w[0]][0] for w in self.words])

    def apply(self, f):
        return self.L0 @ f

    def integrate(self, f, measure=None):
        m = self.nu if measure is None else measure
        return float(m @ f)

    def prefix_groups(self, k):
        """Map each basis word to the index of its k-prefix cylinder."""
        keys = {}
        idx = np.empty(self.size, dtype=np.int64)
        for n, w in enumerate(self.words):
            idx[n] = keys.setdefault(w[:k], len(keys))
        return idx, list(keys)

    def image_keys(self):
        """Key of the image-partition element containing each cylinder.

        On floor 0 two atoms share an element when they have the same
        predecessors (their pre-images are paired); on upper floors the
        element is the atom itself.
        """
        keys = []
        for w in self.words:
            k, l = self.spec.tower_atoms[w[0]]
            keys.append(("B", self.spec.predecessor_key(k)) if l == 0 else ("A", w[0]))
        return keys

    def separation(self, a, b):
        """Separation time of two distinct basis cylinders."""
        wa, wb = self.words[a], self.words[b]
        for i, (x, y) in enumerate(zip(wa, wb)):
            if x != y:
                return NEVER if i == 0 else i - 1
        return len(wa) - 1


def enumerate_words(spec: TowerSpec, depth):
    words = [(n,) for n in range(len(spec.tower_atoms))]
    succ = [[spec.tower_index[s] for s in spec.successors(ta)] for ta in spec.tower_atoms]
    for _ in range(depth - 1):
        words = [w + (s,) for w in words for s in succ[w[-1]]]
    return words


def _product_measure(spec: TowerSpec, words):
    masses = spec.masses
    img_mass = np.array([masses[list(img)].sum() for img in spec.image_index])
    nu = np.empty(len(words))
    for n, w in enumerate(words):
        k, _ = spec.tower_atoms[w[0]]
        val = masses[k]
        prev = k
        for a in w[1:]:
            p, l = spec.tower_atoms[a]
            if l == 0:
                val *= masses[p] / img_mass[prev]
                prev = p
            # climbing keeps the mass
        nu[n] = val
    return nu


def build_operator(spec: TowerSpec, jacobian: JacobianModel | None = None, depth=6,
                   normalize=True):
    """Assemble L0 on depth-``depth`` cylinders.

    ``spec`` should be normalized (see :func:`~towerdecay.tower.validate_tower`).
    """
    jacobian = jacobian or JacobianModel()
    if depth < 1:
        raise OperatorError("cylinder depth must be >= 1")
    if spec.max_depth is not None and depth > spec.max_depth:
        raise OperatorError(f"depth {depth} exceeds truncation.max_depth {spec.max_depth}")
    if jacobian.perturbed and depth < 2:
        raise OperatorError("perturbed Jacobian needs depth >= 2 to resolve images")
    words = enumerate_words(spec, depth)
    index = {w: n for n, w in enumerate(words)}
    N = len(words)
    masses = spec.masses
    img_mass = np.array([masses[list(img)].sum() for img in spec.image_index])
    R = spec.return_times
    returning = np.array([spec.tower_atoms[w[0]][1] == R[spec.tower_atoms[w[0]][0]] - 1
                          for w in words])
    base_log = np.zeros(N)
    for n, w in enumerate(words):
        if returning[n]:
            k = spec.tower_atoms[w[0]][0]
            base_log[n] = math.log(img_mass[k] / masses[k])
    theta = jacobian.offsets(words, depth) * returning
    log_jac = base_log + theta

    preds = [[] for _ in spec.tower_atoms]
    for ta, a in spec.tower_index.items():
        for s in spec.successors(ta):
            preds[spec.tower_index[s]].append(a)
    rows, cols = [], []
    for n, w in enumerate(words):
        for b in preds[w[0]]:
            y = index.get((b,) + w[:-1])
            if y is not None:
                rows.append(n)
                cols.append(y)
    rows = np.array(rows, dtype=np.int64)
    cols = np.array(cols, dtype=np.int64)

    if jacobian.perturbed:
        nu, scale = _conformal_measure(N, rows, cols, log_jac, returning)
        log_jac = log_jac + np.where(returning, math.log(scale), 0.0)
    else:
        nu = _product_measure(spec, words)
    vals = np.exp(-log_jac[cols])
    L0 = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
    report = spectral_decomposition(spec)
    period = max((c.period for c in report.components), default=1)
    if normalize:
        nu = nu / nu.sum()
    return OperatorModel(spec, depth, tuple(words), L0, log_jac, nu, jacobian, period)


def _conformal_measure(N, rows, cols, log_jac, returning):
    """Left Perron vector of L0 after rescaling the returning Jacobians.

    With L0 = C + T / c (C climbing entries, T returning entries) a left
    fixed vector satisfies ``nu T (I - C)^{-1} = c nu``; C is nilpotent.
    """
    vals = np.exp(-log_jac[cols])
    ret = returning[cols]
    C = sp.csr_matrix((vals[~ret], (rows[~ret], cols[~ret])), shape=(N, N))
    T = sp.csr_matrix((vals[ret], (rows[ret], cols[ret])), shape=(N, N))
    inv = sp.identity(N, format="csc") - C.tocsc()
    # row-vector problem: M = T (I - C)^{-1}; transpose for a right eigenproblem
    Mt = sp.linalg.spsolve(inv.T.tocsc(), T.T.tocsc().toarray()) if N else np.zeros((0, 0))
    w, v = scipy.linalg.eig(Mt)
    k = int(np.argmax(w.real))
    c = float(w[k].real)
    nu = np.abs(v[:, k].real)
    return nu, c


# ---------------------------------------------------------------------------

@dataclass
class DensityResult:
    h: np.ndarray
    iterations: int
    residual: float
    period: int
    method: str
    notes: list = field(default_factory=list)


def invariant_density(op: OperatorModel, tol=1e-12, max_iter=200_000, method="window"):
    """Invariant density by Cesaro means of ``L0^i 1``.

    ``method="window"`` averages over the windows ``[n, 2n)`` with ``n`` a
    multiple of the period, doubling ``n`` until successive means differ by
    less than ``tol`` (relative to the sup of the mean once it exceeds 1);
    ``method="cesaro"`` uses the plain running mean from
    ``i = 0``; ``method="plain"`` iterates without averaging.
    """
    g = np.ones(op.size)
    L = op.L0
    period = op.period
    notes = [f"period {period}"] if period > 1 else []
    if method == "plain":
        for it in range(1, max_iter + 1):
            nxt = L @ g
            res = float(np.max(np.abs(nxt - g)))
            g = nxt
            if res < tol:
                return _finish(op, g, it, res, period, method, notes)
        raise DensityConvergenceError("plain iterates did not converge", res, max_iter)
    if method == "cesaro":
        total = g.copy()
        prev = g.copy()
        for it in range(1, max_iter + 1):
            g = L @ g
            total += g
            mean = total / (it + 1)
            res = float(np.max(np.abs(mean - prev)))
            prev = mean
            if res < tol:
                return _finish(op, mean, it, res, period, method, notes)
        raise DensityConvergenceError("Cesaro means did not converge", res, max_iter)
    if method != "window":
        raise OperatorError(f"unknown method {method!r}")
    n = period
    it = 0
    # advance to g_n
    for _ in range(n):
        g = L @ g
        it += 1
    prev = None
    res = math.inf
    while it <= max_iter:
        acc = np.zeros_like(g)
        for _ in range(n):
            acc += g
            g = L @ g
            it += 1
        mean = acc / n
        if prev is not None:
            res = float(np.max(np.abs(mean - prev))) / max(1.0, float(np.max(np.abs(mean))))
            if res < tol:
                return _finish(op, mean, it, res, period, method, notes)
        prev = mean
        # next window starts at 2n; g is currently g_{2n}
        n *= 2
    raise DensityConvergenceError("windowed Cesaro means did not converge", res, it)


def _finish(op, h, it, res, period, method, notes):
    h = h / float(op.nu @ h)
    low = h < H_FLOOR
    if np.any(low):
        notes.append(f"{int(low.sum())} cylinders below positivity floor (transient)")
        h = np.where(low, 0.0, h)
    return DensityResult(h, it, res, period, method, notes)


def eigen_density(op: OperatorModel):
    """Dense eigenvector of L0 for the eigenvalue closest to 1, with nu(h) = 1."""
    w, v = scipy.linalg.eig(op.L0.toarray())
    k = int(np.argmin(np.abs(w - 1.0)))
    h = v[:, k].real
    h = h / float(op.nu @ h)
    return h


def normalized_apply(op: OperatorModel, f, power=1):
    """``L f = L0(f h) / h`` (``power`` times)."""
    if op.h is None:
        raise OperatorError("invariant density not computed")
    h = op.h
    if np.any(h < H_FLOOR):
        raise OperatorError("density below positivity floor; restrict to the recurrent part")
    g = np.asarray(f, dtype=float)
    for _ in range(power):
        g = (op.L0 @ (g * h)) / h
    return g


def normalized_matrix(op: OperatorModel):
    """Sparse matrix of the normalized operator ``L``."""
    h = op.h
    return sp.diags(1.0 / h) @ op.L0 @ sp.diags(h)


# ---------------------------------------------------------------------------
# distortion and Gibbs checks

@dataclass
class DistortionReport:
    max_ratio: float          # sup |JF^n(x')/JF^n(y') - 1| / d0(x, y)
    constant: float           # C = exp(sum w)
    pairs: int

    @property
    def ok(self):
        return self.max_ratio <= self.constant * (1 + 1e-12)

    @property
    def violation(self):
        return max(0.0, self.max_ratio - self.constant)


def _log_jac_of_word(op, word, cache):
    """log JF on the depth-m cylinder of a point whose itinerary starts with ``word``."""
    key = word[:op.depth]
    if key not in cache:
        cache[key] = op.log_jac[_word_index(op)[key]]
    return cache[key]


def _word_index(op):
    idx = getattr(op, "_idx", None)
    if idx is None:
        idx = {w: n for n, w in enumerate(op.words)}
        object.__setattr__(op, "_idx", idx)
    return idx


def _branches(op, start, n):
    """All admissible words ``b`` of length n with ``b[-1] -> start``."""
    spec = op.spec
    preds = {}
    for ta, a in spec.tower_index.items():
        for s in spec.successors(ta):
            preds.setdefault(spec.tower_index[s], []).append(a)
    out = [()]
    heads = [start]
    for _ in range(n):
        new_out, new_heads = [], []
        for b, hd in zip(out, heads):
            for p in preds.get(hd, []):
                new_out.append((p,) + b)
                new_heads.append(p)
        out, heads = new_out, new_heads
    return out


def distortion_check(op: OperatorModel, variation: TailModel, max_n=4):
    """Exhaustive check of the bounded distortion inequality on paired pre-images.

    Points ``x, y`` range over depth-(m-1) cylinders on floor 0 within a
    common image element; pre-image chains have length ``1..max_n``.
    """
    m1 = op.depth - 1
    if m1 < 1:
        raise OperatorError("distortion check needs depth >= 2")
    spec = op.spec
    short = sorted({w[:m1] for w in op.words if spec.tower_atoms[w[0]][1] == 0})
    groups = {}
    for w in short:
        groups.setdefault(spec.predecessor_key(spec.tower_atoms[w[0]][0]), []).append(w)
    C = math.exp(variation.total())
    cache = {}
    worst = 0.0
    pairs = 0
    for members in groups.values():
        for i, x in enumerate(members):
            for y in members[i + 1:]:
                sep = _sep_words(x, y)
                if sep is None:
                    continue
                d0 = float(variation.tail(max(sep, 0)))
                for n in range(1, max_n + 1):
                    for b in _branches(op, x[0], n):
                        lx = sum(_log_jac_of_word(op, (b + x)[i:], cache) for i in range(n))
                        ly = sum(_log_jac_of_word(op, (b + y)[i:], cache) for i in range(n))
                        diff = abs(math.expm1(lx - ly))
                        pairs += 1
                        if diff == 0:
                            continue
                        ratio = math.inf if d0 == 0 else diff / d0
                        worst = max(worst, ratio)
    return DistortionReport(worst, C, pairs)


def _sep_words(x, y):
    for i, (a, b) in enumerate(zip(x, y)):
        if a != b:
            return NEVER if i == 0 else i - 1
    return None


def oscillation_by_depth(op: OperatorModel):
    """Measured ``w_n``: max oscillation of log JF over n-cylinders, n = 1..m."""
    out = []
    for k in range(1, op.depth + 1):
        idx, _ = op.prefix_groups(k)
        hi = np.full(idx.max() + 1, -np.inf)
        lo = np.full(idx.max() + 1, np.inf)
        np.maximum.at(hi, idx, op.log_jac)
        np.minimum.at(lo, idx, op.log_jac)
        out.append(float(np.max(hi - lo)))
    return np.array(out)


@dataclass
class GibbsReport:
    constant_nu: float
    constant_mu: float | None
    predicted: float
    eta: float

    @property
    def finite(self):
        vals = [self.constant_nu] + ([self.constant_mu] if self.constant_mu is not None else [])
        return all(math.isfinite(v) for v in vals)


def model_eta(op: OperatorModel):
    """Large-image constant measured with the model's reference measure."""
    spec = op.spec
    base = np.zeros(len(spec.atoms))
    for n, w in enumerate(op.words):
        k, l = spec.tower_atoms[w[0]]
        if l == 0:
            base[k] += op.nu[n]
    return float(min(base[list(img)].sum() for img in spec.image_index))


def gibbs_check(op: OperatorModel, variation: TailModel | None = None, max_k=None):
    """Empirical Gibbs constants for the reference measure and for ``h nu``.

    For every k < m and every point class whose k-th iterate lies on the
    base, compares ``1/JF^k(x)`` with the measure of its k-cylinder.
    """
    m = op.depth
    max_k = min(max_k or m - 1, m - 1)
    spec = op.spec
    idx = _word_index(op)
    cache = {}
    ext = enumerate_words(spec, m + max_k)
    nu_prefix = [None]
    mu_prefix = [None]
    for k in range(1, max_k + 1):
        gi, keys = op.prefix_groups(k)
        nu_prefix.append((dict(zip(keys, np.bincount(gi, weights=op.nu))), ))
        if op.h is not None:
            mu_prefix.append(dict(zip(keys, np.bincount(gi, weights=op.h * op.nu))))
    c_nu, c_mu = 1.0, 1.0
    for w in ext:
        for k in range(1, max_k + 1):
            if spec.tower_atoms[w[k]][1] != 0:
                continue
            logjk = sum(_log_jac_of_word(op, w[i:], cache) for i in range(k))
            cyl = nu_prefix[k][0][w[:k]]
            r = math.exp(-logjk) / cyl
            c_nu = max(c_nu, r, 1 / r)
            if op.h is not None:
                hx = op.h[idx[w[:m]]]
                hfk = op.h[idx[w[k:k + m]]]
                r_mu = (math.exp(-logjk) * hx / hfk) / mu_prefix[k][w[:k]]
                c_mu = max(c_mu, r_mu, 1 / r_mu)
    total = variation.total() if variation is not None else 0.0
    eta = model_eta(op)
    return GibbsReport(float(c_nu), float(c_mu) if op.h is not None else None,
                       float(math.exp(total) / eta), float(eta))


# ---------------------------------------------------------------------------
# exports

def write_density_csv(op: OperatorModel, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["cylinder", "mass", "h"])
        h = op.h if op.h is not None else np.full(op.size, np.nan)
        for n in range(op.size):
            wr.writerow([op.label(n), repr(float(op.nu[n])), repr(float(h[n]))])


def write_matrix_triplets(op: OperatorModel, path):
    coo = op.L0.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        for k in order:
            fh.write(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}\n")
