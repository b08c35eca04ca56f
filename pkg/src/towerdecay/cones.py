"""The cone family C_j(a, b, c) on functions of tower cylinders.

Functions are vectors over the basis of an :class:`~towerdecay.transfer.OperatorModel`
(one value per depth-m cylinder).  Integrals use ``mu = h nu``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .rates import D_DEFAULT, S_THRESHOLD, MetricTables, Weight, choose_s, metric_recursion
from .tails import TailModel
from .transfer import OperatorModel, model_eta

MARGIN_TOL = 1e-9
P_INF_THRESHOLD = 1e-5


class ConeConfigError(ValueError):
    pass


@dataclass
class ConeConfig:
    op: OperatorModel
    omega: TailModel
    D: float
    s: int
    t: int
    k0: int
    v: Weight
    eta: float
    q_labels: np.ndarray       # Q element of each basis cylinder
    q_names: list              # prefix word or "P_inf"
    p_inf: np.ndarray          # bool mask
    tables: MetricTables
    pairs: tuple = field(repr=False, default=())   # (i, j, sep) arrays inside common B

    @property
    def mu(self):
        return self.op.mu

    @property
    def ks(self):
        return self.tables.ks

    def q(self, j):
        return int(np.sum(self.tables.ks[:j]))

    def v_floor(self):
        return self.v(self.op.floors())

    def d(self, level, sep):
        """``d_j`` for separation times (``NEVER`` reads as 0)."""
        sep = np.maximum(np.asarray(sep), 0)
        return np.exp(self.tables.log_R_at(level, sep))

    def summary(self):
        return {"D": self.D, "s": self.s, "t": self.t, "k0": self.k0, "eta": self.eta,
                "R0(s)": float(self.omega.tail(self.s)), "ks": [int(k) for k in self.ks],
                "v": self.v.describe(), "Q_size": len(self.q_names),
                "P_inf_empty": not bool(self.p_inf.any())}


@dataclass(frozen=True)
class ConeSpec:
    level: int
    a: float
    b: float
    c: float
    cfg: ConeConfig

    def __post_init__(self):
        if self.a < 0 or self.b <= 0 or self.c <= 0:
            raise ConeConfigError("cone parameters need a >= 0, b > 0, c > 0")


@dataclass
class Membership:
    inside: bool
    mean: float
    margins: dict            # condition id -> worst margin on the normalized function

    def failing(self):
        return [k for k, m in self.margins.items() if m < -MARGIN_TOL]


# ---------------------------------------------------------------------------
# configuration

def p_inf_mask(op: OperatorModel, t):
    """Cylinders on floors >= t or over base atoms with index >= t."""
    return (op.floors() >= t) | (op.base_atoms() >= t)


def choose_t(op: OperatorModel, v: Weight, eta, threshold=P_INF_THRESHOLD):
    mu_v = op.mu * v(op.floors())
    t_max = int(max(len(op.spec.atoms), op.spec.return_times.max()))
    for t in range(t_max + 1):
        if mu_v[p_inf_mask(op, t)].sum() / eta <= threshold:
            return t
    return t_max


def q_partition(op: OperatorModel, s, p_inf):
    labels = np.empty(op.size, dtype=np.int64)
    names, index = [], {}
    for n, w in enumerate(op.words):
        if p_inf[n]:
            continue
        key = w[:s + 1]
        if key not in index:
            index[key] = len(names)
            names.append(key)
        labels[n] = index[key]
    if p_inf.any():
        labels[p_inf] = len(names)
        names.append("P_inf")
    return labels, names


def mixing_ratios(op: OperatorModel, labels, weights, k_max):
    """Yield ``k, r, r_v`` with ``r[P, Q] = mu(F^-k P & Q) / (mu(P) mu(Q))``."""
    nq = int(labels.max()) + 1
    ind = np.zeros((op.size, nq))
    ind[np.arange(op.size), labels] = 1.0
    mu = op.mu
    muP = ind.T @ mu
    muvQ = ind.T @ (mu * weights)
    G = ind * op.h[:, None]
    Gv = ind * (op.h * weights)[:, None]
    nuI = ind * op.nu[:, None]
    for k in range(1, k_max + 1):
        G = op.L0 @ G
        Gv = op.L0 @ Gv
        r = (nuI.T @ G) / np.outer(muP, muP)
        rv = (nuI.T @ Gv) / np.outer(muP, muvQ)
        yield k, r, rv


def find_k0(op: OperatorModel, labels, weights, k_cap=10_000, window=20):
    """Smallest k0 with all mixing ratios in [7/8, 9/8] for ``window`` consecutive k."""
    start = None
    for k, r, rv in mixing_ratios(op, labels, weights, k_cap + window):
        ok = (r.min() >= 7 / 8 and r.max() <= 9 / 8 and rv.min() >= 7 / 8 and rv.max() <= 9 / 8)
        if ok:
            start = k if start is None else start
            if k - start + 1 >= window:
                return start
        else:
            start = None
            if k > k_cap:
                break
    raise ConeConfigError(f"mixing bounds not reached by k_cap={k_cap}")


def same_b_pairs(op: OperatorModel):
    keys = op.image_keys()
    groups = {}
    for n, key in enumerate(keys):
        groups.setdefault(key, []).append(n)
    ii, jj, ss = [], [], []
    for members in groups.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                ii.append(members[a])
                jj.append(members[b])
                ss.append(op.separation(members[a], members[b]))
    return np.array(ii, dtype=np.int64), np.array(jj, dtype=np.int64), np.array(ss, dtype=np.int64)


def build_cone_config(op: OperatorModel, omega: TailModel, v: Weight | None = None,
                      D=D_DEFAULT, j_max=4, k_cap=10_000, window=20, s=None, t=None):
    """Assemble ``ConeConfig`` for an operator whose density is known."""
    if op.h is None:
        raise ConeConfigError("operator needs its invariant density")
    v = v or Weight("exponential", 0.75)
    s = choose_s(omega, S_THRESHOLD) if s is None else int(s)
    if omega.tail(s) > S_THRESHOLD * (1 + 1e-12):
        raise ConeConfigError(f"R0(s) = {omega.tail(s):.3g} exceeds {S_THRESHOLD}")
    if s + 1 > op.depth:
        raise ConeConfigError(f"operator depth {op.depth} cannot resolve {s + 1}-letter cylinders")
    eta = model_eta(op)
    t = choose_t(op, v, eta) if t is None else int(t)
    p_inf = p_inf_mask(op, t)
    labels, names = q_partition(op, s, p_inf)
    weights = v(op.floors())
    k0 = find_k0(op, labels, weights, k_cap, window)
    tables = metric_recursion(omega, s, k0, D, j_max=j_max, horizon=max(op.depth, 16))
    return ConeConfig(op, omega, D, s, t, k0, v, eta, labels, names, p_inf, tables,
                      same_b_pairs(op))


# ---------------------------------------------------------------------------
# membership

def conditional_means(f, cfg: ConeConfig):
    mu = cfg.mu
    num = np.bincount(cfg.q_labels, weights=f * mu, minlength=len(cfg.q_names))
    den = np.bincount(cfg.q_labels, weights=mu, minlength=len(cfg.q_names))
    return num / den


def paper_cone_membership(f, spec: ConeSpec) -> Membership:
    cfg = spec.cfg
    f = np.asarray(f, dtype=float)
    if not np.any(f):
        return Membership(True, 0.0, {1: math.inf, 2: math.inf, 3: math.inf, 4: math.inf})
    E = float(cfg.mu @ f)
    if E <= 0:
        return Membership(False, E, {1: -math.inf, 2: -math.inf, 3: -math.inf, 4: -math.inf})
    g = f / E
    cm = conditional_means(g, cfg)
    m1 = float(min(np.min(cm - spec.a), np.min(6 * spec.b - cm)))
    ii, jj, ss = cfg.pairs
    if len(ii):
        m2 = float(np.min(12 * spec.b * cfg.d(spec.level, ss) - np.abs(g[ii] - g[jj])))
    else:
        m2 = math.inf
    floors = cfg.op.floors()
    q = cfg.q(spec.level)
    m3 = m4 = math.inf
    inf_idx = np.flatnonzero(cfg.p_inf)
    if len(inf_idx):
        low = inf_idx[floors[inf_idx] <= q]
        high = inf_idx[floors[inf_idx] > q]
        if len(low):
            m3 = float(np.min(90 * spec.c * cfg.v(floors[low]) - np.abs(g[low])))
        if len(high):
            m4 = float(np.min(90 * spec.c * cfg.v(q) - np.abs(g[high])))
    margins = {1: m1, 2: m2, 3: m3, 4: m4}
    inside = all(m >= -MARGIN_TOL for m in margins.values())
    return Membership(inside, E, margins)


def adapted_norm(f, level, cfg: ConeConfig):
    f = np.asarray(f, dtype=float)
    mu = cfg.mu
    first = max(90 * float(cfg.v(cfg.q(level))), 12 * cfg.D * float(cfg.omega.tail(cfg.s)) + 6)
    term1 = first * abs(float(mu @ f))
    num = np.bincount(cfg.q_labels, weights=f * mu, minlength=len(cfg.q_names))
    den = np.bincount(cfg.q_labels, weights=mu, minlength=len(cfg.q_names))
    term2 = float(np.max(np.abs(num) / den)) if len(den) else 0.0
    term3 = float(np.max(np.abs(f))) if f.size else 0.0
    return max(term1, term2, term3)


def lipschitz_constant(f, cfg: ConeConfig, level=0):
    """Local Lipschitz constant of ``f`` for ``d_level`` on pairs in a common B."""
    ii, jj, ss = cfg.pairs
    if not len(ii):
        return 0.0
    diff = np.abs(f[ii] - f[jj])
    d = cfg.d(level, ss)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(diff > 0, diff / d, 0.0)
    return float(np.max(ratio))


@dataclass
class Lift:
    shift: float           # -min(f, 0), makes f non-negative
    R: float               # total constant added
    branches: dict
    active: str


def lift_to_cone(f, cfg: ConeConfig) -> Lift:
    """Constant ``R`` with ``f + R`` in ``C_0(0, 1, 1)``.

    ``f`` is first shifted to be non-negative; the three sufficient bounds
    for conditions 1, 2 and 3-4 are then combined by taking their maximum.
    """
    f = np.asarray(f, dtype=float)
    v0 = float(cfg.v(cfg.q(0)))
    if 90 * v0 <= 1:
        raise ConeConfigError("90 v_{q(0)} must exceed 1")
    shift = max(0.0, -float(f.min()))
    g = f + shift
    E = float(cfg.mu @ g)
    cm = conditional_means(g, cfg)
    L = lipschitz_constant(g, cfg, 0)
    if not math.isfinite(L):
        raise ConeConfigError("function is not Lipschitz for d_0 at this resolution")
    branches = {"condition1": float(np.max((cm - 6 * E) / 5)),
                "lipschitz": L / 12,
                "sup": float(g.max()) / (90 * v0 - 1)}
    active = max(branches, key=branches.get)
    R = max(0.0, branches[active])
    return Lift(shift, shift + R, branches, active)


# ---------------------------------------------------------------------------
# sampling and the cone step

def random_cone_members(cfg: ConeConfig, level=0, count=100, seed=0, b=1.0,
                        max_tries=20):
    """Random members of ``C_level(0, b, 1)``.

    Each sample is a per-B level plus prefix offsets bounded by the
    increments of ``R_level`` so that condition 2 holds by construction; all
    conditions are re-checked and failing samples are shrunk.
    """
    rng = np.random.default_rng(seed)
    op = cfg.op
    spec = ConeSpec(level, 0.0, b, 1.0, cfg)
    keys = op.image_keys()
    kid = {k: n for n, k in enumerate(dict.fromkeys(keys))}
    bidx = np.array([kid[k] for k in keys])
    m = op.depth
    Rj = np.exp(cfg.tables.log_R_at(level, np.arange(m)))
    incr = np.maximum(Rj[:-1] - Rj[1:], 0.0)            # k = 1 .. m-1
    groups = [op.prefix_groups(k + 1)[0] for k in range(1, m)]
    out = []
    for _ in range(count):
        base = rng.uniform(0.3, 1.7, size=len(kid))[bidx]
        lam = rng.uniform(0.0, 1.0)
        for _ in range(max_tries):
            f = base.copy()
            scale = 6 * b * lam * float(cfg.mu @ base) * 0.5
            for k, gi in enumerate(groups):
                f += scale * incr[k] * rng.uniform(-1, 1, size=gi.max() + 1)[gi]
            if paper_cone_membership(f, spec).inside:
                out.append(f)
                break
            lam *= 0.5
        else:
            out.append(np.ones(op.size))
    return np.array(out)


def normalized_power(cfg: ConeConfig, f, k):
    h = cfg.op.h
    g = np.asarray(f, dtype=float) * h
    for _ in range(k):
        g = cfg.op.L0 @ g
    return g / h


@dataclass
class StepReport:
    level: int
    k: int
    target: tuple
    samples: int
    failures: int
    worst: dict

    @property
    def ok(self):
        return self.failures == 0


def cone_step_check(cfg: ConeConfig, level=0, count=100, seed=0, tol=MARGIN_TOL):
    """Map random members of ``C_j(0,1,1)`` by ``L^{k_{j+1}}`` and test membership
    in ``C_{j+1}(4/5, 1/5, max(1/5, v_{q(j)}/v_{q(j+1)}))``."""
    k = int(cfg.ks[level])
    c = max(0.2, float(cfg.v(cfg.q(level)) / cfg.v(cfg.q(level + 1))))
    target = ConeSpec(level + 1, 0.8, 0.2, c, cfg)
    members = random_cone_members(cfg, level, count, seed)
    worst = {1: math.inf, 2: math.inf, 3: math.inf, 4: math.inf}
    failures = 0
    for f in members:
        res = paper_cone_membership(normalized_power(cfg, f, k), target)
        for key, val in res.margins.items():
            worst[key] = min(worst[key], val)
        if any(val < -tol for val in res.margins.values()):
            failures += 1
    return StepReport(level, k, (0.8, 0.2, c), len(members), failures, worst)


# ---------------------------------------------------------------------------
# exports

def write_diagnostics_csv(rows, path):
    """``rows``: iterable of ``(level, condition, margin)``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["level", "condition", "margin"])
        for level, cond, margin in rows:
            wr.writerow([level, cond, repr(float(margin))])


def certificate_json(cert):
    return json.dumps(cert.to_dict(), indent=2, sort_keys=True)
