"""Finite symbolic towers: specification, validation, dynamics, separation
times and the spectral decomposition of the partition graph."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .tails import TailError, TailModel, tail_from_variation

NEVER = -1            # states in different atoms at time 0
INFINITE = math.inf   # identical symbolic futures through the available depth


class TowerError(ValueError):
    pass


class MarkovViolation(TowerError):
    def __init__(self, atom_id, reason):
        super().__init__(f"Markov violation: atom {atom_id} {reason}")
        self.atom_id = atom_id


class InsufficientDepth(TowerError):
    pass


@dataclass(frozen=True)
class BaseAtom:
    id: int
    mass: float
    return_time: int
    image: tuple


@dataclass(frozen=True)
class TowerSpec:
    atoms: tuple
    normalized: bool = False
    max_depth: int | None = None

    def __post_init__(self):
        if not self.atoms:
            raise TowerError("tower needs at least one atom")
        ids = [a.id for a in self.atoms]
        if len(set(ids)) != len(ids):
            raise TowerError("duplicate atom ids")
        for a in self.atoms:
            if not a.mass > 0:
                raise TowerError(f"atom {a.id} has non-positive mass")
            if int(a.return_time) < 1:
                raise TowerError(f"atom {a.id} has return time < 1")

    @classmethod
    def build(cls, masses, return_times, images, ids=None, normalized=False):
        """Convenience constructor; ``images`` use the same ids as ``ids``
        (default 1..J)."""
        ids = list(ids) if ids is not None else list(range(1, len(masses) + 1))
        atoms = tuple(BaseAtom(i, float(m), int(r), tuple(img))
                      for i, m, r, img in zip(ids, masses, return_times, images))
        return cls(atoms, normalized)

    # index helpers ------------------------------------------------------
    @cached_property
    def index(self):
        return {a.id: k for k, a in enumerate(self.atoms)}

    @property
    def ids(self):
        return [a.id for a in self.atoms]

    @property
    def masses(self):
        return np.array([a.mass for a in self.atoms])

    @property
    def return_times(self):
        return np.array([a.return_time for a in self.atoms], dtype=np.int64)

    @cached_property
    def image_index(self):
        """Images as tuples of atom positions."""
        return tuple(tuple(self.index[p] for p in a.image) for a in self.atoms)

    @cached_property
    def tower_atoms(self):
        """All partition elements ``(position, floor)`` in a fixed order."""
        return tuple((k, l) for k, a in enumerate(self.atoms) for l in range(a.return_time))

    @cached_property
    def tower_index(self):
        return {ta: n for n, ta in enumerate(self.tower_atoms)}

    def successors(self, ta):
        k, l = ta
        if l + 1 < self.atoms[k].return_time:
            return ((k, l + 1),)
        return tuple((p, 0) for p in self.image_index[k])

    def total_mass(self):
        return float(np.sum(self.masses * self.return_times))

    def floor_masses(self):
        """``nu(Delta_l)`` for l = 0 .. max R - 1."""
        R = self.return_times
        m = self.masses
        return np.array([m[R > l].sum() for l in range(int(R.max()))])

    def predecessor_key(self, k):
        """Atoms with the same set of predecessors have paired pre-images."""
        return frozenset(j for j, img in enumerate(self.image_index) if k in img)


@dataclass(frozen=True)
class VariationSequence:
    tail: TailModel

    @property
    def distortion_constant(self):
        """``C = exp(sum_{j>=1} w_j)``."""
        return math.exp(self.tail.total())


@dataclass(frozen=True)
class TowerState:
    atom: int          # atom id
    floor: int
    word: tuple = ()   # future base atoms entered at successive returns

    def cell(self):
        return (self.atom, self.floor)


@dataclass
class ValidationReport:
    spec: TowerSpec
    eta: float
    normalization_factor: float
    axioms: dict = field(default_factory=dict)

    @property
    def ok(self):
        return all(a["passed"] for a in self.axioms.values())

    def failures(self):
        return [k for k, a in self.axioms.items() if not a["passed"]]

    def to_dict(self):
        return {"ok": self.ok, "eta": self.eta,
                "normalization_factor": self.normalization_factor,
                "axioms": self.axioms}


# ---------------------------------------------------------------------------

def validate_tower(spec: TowerSpec, variation: VariationSequence | None, eta_floor=1e-12):
    """Check (A.I)-(A.IV) and return the normalized spec in the report.

    Raises :class:`MarkovViolation` when an image set is empty or names an
    unknown atom, since no other quantity is defined in that case.
    """
    ids = set(spec.ids)
    for a in spec.atoms:
        if not a.image:
            raise MarkovViolation(a.id, "has an empty image set")
        bad = [p for p in a.image if p not in ids]
        if bad:
            raise MarkovViolation(a.id, f"maps onto unknown atoms {bad}")
    total = spec.total_mass()
    factor = 1.0 / total
    atoms = tuple(replace(a, mass=a.mass * factor) for a in spec.atoms)
    norm = TowerSpec(atoms, normalized=True, max_depth=spec.max_depth)
    masses = norm.masses
    eta = min(float(masses[list(img)].sum()) for img in norm.image_index)
    axioms = {
        "A.I": {"passed": bool(abs(norm.total_mass() - 1.0) <= 1e-12),
                "value": norm.total_mass(), "raw_total": total,
                "name": "summability of upper floors"},
        "A.II": {"passed": True, "value": None,
                 "name": "generating partition (exact for symbolic states)"},
    }
    if variation is None:
        axioms["A.III"] = {"passed": False, "value": None, "name": "summable variation",
                           "message": "no variation sequence given"}
    else:
        total_var = variation.tail.total()
        axioms["A.III"] = {"passed": bool(math.isfinite(total_var)), "value": total_var,
                           "name": "summable variation"}
    axioms["A.IV"] = {"passed": bool(eta > eta_floor), "value": eta,
                      "name": "Markov property and large image"}
    return ValidationReport(norm, eta, factor, axioms)


def step(state: TowerState, spec: TowerSpec) -> TowerState:
    k = spec.index[state.atom]
    R = spec.atoms[k].return_time
    if not 0 <= state.floor < R:
        raise TowerError(f"floor {state.floor} invalid for atom {state.atom}")
    if state.floor + 1 < R:
        return TowerState(state.atom, state.floor + 1, state.word)
    if not state.word:
        raise InsufficientDepth("insufficient symbolic depth: return with empty word")
    nxt = state.word[0]
    if nxt not in spec.atoms[k].image:
        raise MarkovViolation(state.atom, f"cannot return to atom {nxt}")
    return TowerState(nxt, 0, state.word[1:])


def separation_time(x: TowerState, y: TowerState, spec: TowerSpec):
    """Largest n with F^j x, F^j y in the same partition atom for 0 <= j <= n.

    Returns :data:`NEVER` when the atoms differ at time 0 and
    :data:`INFINITE` when the orbits agree as far as the words reach.
    """
    if x.cell() != y.cell():
        return NEVER
    n = 0
    while True:
        try:
            x, y = step(x, spec), step(y, spec)
        except InsufficientDepth:
            return INFINITE
        if x.cell() != y.cell():
            return n
        n += 1


def d_metric(x, y, level, tables, spec):
    """``d_level(x, y) = R_level(s(x, y))``; level 0 is the tail sum of w."""
    tables = getattr(tables, "tables", tables)
    sep = separation_time(x, y, spec)
    if sep == INFINITE:
        return 0.0
    sep = max(sep, 0)
    return float(np.exp(tables.log_R_at(level, sep)[0]))


# ---------------------------------------------------------------------------
# spectral decomposition

@dataclass
class RecurrentComponent:
    atoms: list            # tower atoms (id, floor)
    period: int
    classes: list          # classes[c] = tower atoms in cyclic class c

    @property
    def aperiodic(self):
        return self.period == 1


@dataclass
class SpectralReport:
    transient: list
    components: list

    @property
    def irreducible(self):
        return not self.transient and len(self.components) == 1

    @property
    def mixing(self):
        return self.irreducible and self.components[0].aperiodic

    def notes(self):
        out = []
        for c in self.components:
            if not c.aperiodic:
                out.append(f"period {c.period}; spectral reduction required")
        if len(self.components) > 1:
            out.append(f"{len(self.components)} recurrent components")
        if self.transient:
            out.append(f"{len(self.transient)} transient atoms")
        return out

    def to_dict(self):
        return {"transient": [list(t) for t in self.transient],
                "components": [{"period": c.period, "aperiodic": c.aperiodic,
                                "atoms": [list(t) for t in c.atoms],
                                "classes": [[list(t) for t in cl] for cl in c.classes]}
                               for c in self.components],
                "notes": self.notes()}


def partition_graph(spec: TowerSpec):
    """Sparse adjacency of the partition graph ``P -> Q iff F(P) contains Q``."""
    rows, cols = [], []
    for ta, n in spec.tower_index.items():
        for succ in spec.successors(ta):
            rows.append(n)
            cols.append(spec.tower_index[succ])
    N = len(spec.tower_atoms)
    return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(N, N))


def spectral_decomposition(spec: TowerSpec) -> SpectralReport:
    A = partition_graph(spec)
    ncomp, labels = connected_components(A, directed=True, connection="strong")
    N = A.shape[0]
    closed = np.ones(ncomp, dtype=bool)
    coo = A.tocoo()
    for u, v in zip(coo.row, coo.col):
        if labels[u] != labels[v]:
            closed[labels[u]] = False
    label_of = lambda n: spec.tower_atoms[n]
    named = lambda n: (spec.atoms[label_of(n)[0]].id, label_of(n)[1])
    transient = [named(n) for n in range(N) if not closed[labels[n]]]
    comps = []
    for c in range(ncomp):
        if not closed[c]:
            continue
        members = [n for n in range(N) if labels[n] == c]
        period, level = _period(A, members)
        classes = [[named(n) for n in members if level[n] % period == r] for r in range(period)]
        comps.append(RecurrentComponent([named(n) for n in members], period, classes))
    comps.sort(key=lambda c: c.atoms[0])
    return SpectralReport(transient, comps)


def _period(A, members):
    """gcd of ``level[u] + 1 - level[v]`` over edges inside a strong component."""
    inside = set(members)
    root = members[0]
    level = {root: 0}
    frontier = [root]
    while frontier:
        nxt = []
        for u in frontier:
            for v in A.indices[A.indptr[u]:A.indptr[u + 1]]:
                if v in inside and v not in level:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    g = 0
    for u in members:
        for v in A.indices[A.indptr[u]:A.indptr[u + 1]]:
            if v in inside:
                g = math.gcd(g, abs(level[u] + 1 - level[v]))
    return g, level


# ---------------------------------------------------------------------------
# JSON ingestion

def spec_from_dict(doc):
    """Build ``(TowerSpec, VariationSequence | None, truncation)`` from a JSON document.

    A variation block that does not define a summable sequence yields
    ``None`` so that validation reports (A.III) as failed.
    """
    try:
        atoms = tuple(BaseAtom(int(a["id"]), float(a["mass"]), int(a["return_time"]),
                               tuple(int(p) for p in a["image"])) for a in doc["atoms"])
    except (KeyError, TypeError) as exc:
        raise TowerError(f"malformed atoms block: {exc}") from exc
    trunc = dict(doc.get("truncation", {}) or {})
    spec = TowerSpec(atoms, max_depth=trunc.get("max_depth"))
    variation = None
    if "variation" in doc:
        try:
            variation = VariationSequence(tail_from_variation(doc["variation"]))
        except (TailError, KeyError):
            variation = None
    else:
        variation = VariationSequence(TailModel.zero())
    if "max_return" in trunc and spec.return_times.max() > int(trunc["max_return"]):
        raise TowerError("return time exceeds truncation.max_return")
    return spec, variation, trunc


def load_spec(path):
    with open(Path(path)) as fh:
        return spec_from_dict(json.load(fh))


def spec_to_dict(spec: TowerSpec, tail: TailModel | None = None, truncation=None):
    doc = {"atoms": [{"id": a.id, "mass": a.mass, "return_time": a.return_time,
                      "image": list(a.image)} for a in spec.atoms]}
    if tail is not None:
        if tail.kind == "explicit":
            doc["variation"] = {"model": "explicit",
                                "params": {"values": list(tail.values), "beyond": tail.beyond}}
        elif tail.kind == "exponential":
            doc["variation"] = {"model": "exponential", "params": {"rho": tail.param, "scale": tail.scale}}
        elif tail.kind == "zero":
            doc["variation"] = {"model": "zero", "params": {}}
        else:
            doc["variation"] = {"model": tail.kind, "params": {"exponent": tail.param, "scale": tail.scale}}
    if truncation:
        doc["truncation"] = dict(truncation)
    return doc
