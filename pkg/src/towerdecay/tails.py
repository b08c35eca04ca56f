"""Parametric and explicit models of non-negative summable sequences.

A :class:`TailModel` describes either the oscillation sequence of the
log-Jacobian (``w_n``, n >= 1) or the floor masses of a tower.  The main
quantity is the tail sum ``R0(p) = sum_{k > p} w_k``, which is always
returned in log space so that very deep tails never underflow.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import mpmath
import numpy as np
from scipy import special

KINDS = ("exponential", "polynomial", "stretched", "explicit", "zero")
_ALIASES = {"exp": "exponential", "poly": "polynomial", "stretched": "stretched",
            "explicit": "explicit", "zero": "zero"}

# size of the exact log-space table used for stretched-exponential tails
_STRETCHED_TABLE = 1 << 22


class TailError(ValueError):
    pass


@dataclass(frozen=True)
class TailModel:
    """A sequence ``w_n = scale * g(n)`` for ``n >= 1``.

    ``param`` is ``rho`` for exponential tails, the exponent for polynomial
    and stretched tails and is unused for explicit lists.  Explicit lists
    give ``w_1, ..., w_L``; past ``L`` they are either treated as zero
    (``beyond="zero"``) or refused (``beyond="error"``).
    """

    kind: str
    param: float = 0.0
    scale: float = 1.0
    values: tuple = field(default=())
    beyond: str = "error"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TailError(f"unknown tail kind {self.kind!r}")
        if self.scale < 0:
            raise TailError("scale must be non-negative")
        if self.kind == "exponential" and not 0 < self.param < 1:
            raise TailError("exponential tail needs 0 < rho < 1")
        if self.kind == "polynomial" and not self.param > 1:
            raise TailError("polynomial tail needs exponent > 1")
        if self.kind == "stretched" and not 0 < self.param < 1:
            raise TailError("stretched tail needs 0 < exponent < 1")
        if self.kind == "explicit":
            vals = np.asarray(self.values, dtype=float)
            if vals.ndim != 1 or np.any(vals < 0) or not np.all(np.isfinite(vals)):
                raise TailError("explicit tail must be a finite non-negative list")
            if self.beyond not in ("error", "zero"):
                raise TailError("beyond must be 'error' or 'zero'")

    # constructors -----------------------------------------------------
    @classmethod
    def exponential(cls, rho, scale=1.0):
        return cls("exponential", float(rho), float(scale))

    @classmethod
    def polynomial(cls, exponent, scale=1.0):
        return cls("polynomial", float(exponent), float(scale))

    @classmethod
    def stretched(cls, exponent, scale=1.0):
        return cls("stretched", float(exponent), float(scale))

    @classmethod
    def explicit(cls, values, beyond="error"):
        return cls("explicit", 0.0, 1.0, tuple(float(v) for v in values), beyond)

    @classmethod
    def zero(cls):
        return cls("zero", 0.0, 0.0)

    # evaluation -------------------------------------------------------
    @property
    def is_zero(self):
        if self.kind == "zero" or self.scale == 0:
            return True
        return self.kind == "explicit" and self.beyond == "zero" and not any(self.values)

    def label(self):
        if self.kind == "explicit":
            return f"explicit[{len(self.values)}]"
        if self.kind == "zero":
            return "zero"
        short = {"exponential": "exp", "polynomial": "poly"}.get(self.kind, self.kind)
        text = f"{short}:{self.param:g}"
        return text if self.scale == 1.0 else f"{text},scale={self.scale:g}"

    def terms(self, n):
        """Values ``w_n`` for an integer array ``n >= 1``."""
        n = np.asarray(n)
        if np.any(n < 1):
            raise TailError("sequence is indexed from n = 1")
        with np.errstate(divide="ignore"):
            return np.exp(self.log_terms(n))

    def log_terms(self, n):
        n = np.asarray(n, dtype=float)
        with np.errstate(divide="ignore"):
            logc = math.log(self.scale) if self.scale > 0 else -np.inf
            if self.kind == "exponential":
                return logc + n * math.log(self.param)
            if self.kind == "polynomial":
                return logc - self.param * np.log(n)
            if self.kind == "stretched":
                return logc - n ** self.param
            if self.kind == "zero":
                return np.full(n.shape, -np.inf)
            vals = np.asarray(self.values, dtype=float)
            idx = n.astype(np.int64)
            if np.any(idx > len(vals)) and self.beyond == "error":
                raise TailError("explicit list shorter than needed horizon")
            out = np.full(idx.shape, -np.inf)
            ok = idx <= len(vals)
            out[ok] = np.log(vals[idx[ok] - 1])
            return out

    def log_tail(self, p):
        """``log R0(p) = log sum_{k > p} w_k`` for integer ``p >= 0``."""
        scalar = np.ndim(p) == 0
        p = np.atleast_1d(np.asarray(p, dtype=np.int64))
        if np.any(p < 0):
            raise TailError("tail index must be >= 0")
        with np.errstate(divide="ignore"):
            logc = math.log(self.scale) if self.scale > 0 else -np.inf
            if self.is_zero:
                out = np.full(p.shape, -np.inf)
            elif self.kind == "exponential":
                rho = self.param
                out = logc + (p + 1) * math.log(rho) - math.log1p(-rho)
            elif self.kind == "polynomial":
                out = logc + _log_hurwitz(self.param, p.astype(float) + 1.0)
            elif self.kind == "stretched":
                out = logc + _stretched_log_tail(self.param, p)
            else:
                out = _explicit_log_tail(self.values, self.beyond, p)
        return float(out[0]) if scalar else out

    def tail(self, p):
        with np.errstate(under="ignore"):
            return np.exp(self.log_tail(p))

    def total(self):
        """``sum_{k >= 1} w_k``."""
        return float(self.tail(0))


def _log_hurwitz(a, q):
    z = special.zeta(a, q)
    out = np.log(z)
    # zeta underflows only for absurdly large q; fall back on the integral bound
    bad = ~np.isfinite(out)
    if np.any(bad):
        qb = q[bad]
        out[bad] = (1 - a) * np.log(qb) - math.log(a - 1)
    return out


def _explicit_log_tail(values, beyond, p):
    vals = np.asarray(values, dtype=float)
    L = len(vals)
    if beyond == "error" and np.any(p >= L):
        raise TailError("explicit list shorter than needed horizon")
    # reverse cumulative sum: tails[i] = sum_{k > i} w_k, i = 0..L
    tails = np.concatenate([np.cumsum(vals[::-1])[::-1], [0.0]])
    out = np.zeros(p.shape)
    inside = p < L
    out[inside] = tails[p[inside]]
    with np.errstate(divide="ignore"):
        return np.log(out)


@functools.lru_cache(maxsize=8)
def _stretched_table(alpha):
    K = _STRETCHED_TABLE
    k = np.arange(1, K + 1, dtype=float)
    logw = -(k ** alpha)
    rem = _stretched_log_remainder(alpha, K)
    # log sum_{k > p} exp(-k^alpha) for p = 0..K, accumulated from the far end
    rev = np.logaddexp.accumulate(np.concatenate([[rem], logw[::-1]]))
    return rev[::-1]


def _stretched_log_remainder(alpha, p):
    """``log sum_{k > p} exp(-k^alpha)`` by Euler-Maclaurin around the integral."""
    with mpmath.workdps(30):
        a = mpmath.mpf(1) / alpha
        z = mpmath.mpf(p) ** alpha
        integral = mpmath.gammainc(a, z) / alpha
        fp = mpmath.exp(-z)
        d1 = -alpha * mpmath.mpf(p) ** (alpha - 1) * fp
        total = integral - fp / 2 - d1 / 12
        return float(mpmath.log(total))


def _stretched_log_tail(alpha, p):
    table = _stretched_table(alpha)
    out = np.empty(p.shape)
    inside = p < len(table)
    out[inside] = table[p[inside]]
    for i in np.flatnonzero(~inside):
        out[i] = _stretched_log_remainder(alpha, int(p[i]))
    return out


def parse_tail(text, base_dir=None):
    """Parse ``exp:0.5``, ``poly:3``, ``stretched:0.5``, ``explicit:@file.csv``.

    An optional ``,scale=c`` suffix sets the hidden constant.
    """
    if not isinstance(text, str) or ":" not in text:
        raise TailError(f"cannot parse tail {text!r}")
    head, _, rest = text.partition(":")
    kind = _ALIASES.get(head.strip().lower())
    if kind is None:
        raise TailError(f"unknown tail kind {head!r}")
    parts = rest.split(",")
    body, opts = parts[0].strip(), {}
    for extra in parts[1:]:
        key, _, val = extra.partition("=")
        opts[key.strip()] = val.strip()
    if kind == "explicit":
        if not body.startswith("@"):
            raise TailError("explicit tails are read from a file: explicit:@path.csv")
        path = Path(body[1:])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return TailModel.explicit(read_sequence_csv(path), beyond=opts.get("beyond", "zero"))
    try:
        param = float(body)
        scale = float(opts.get("scale", 1.0))
    except ValueError as exc:
        raise TailError(f"cannot parse tail {text!r}") from exc
    return TailModel(kind, param, scale)


def read_sequence_csv(path):
    """Read ``w_1, w_2, ...`` from a CSV with one value or ``n,value`` per row."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                continue  # header
    if not rows:
        raise TailError(f"no values in {path}")
    if len(rows[0]) == 1:
        return [r[0] for r in rows]
    rows.sort(key=lambda r: r[0])
    return [r[1] for r in rows]


def tail_from_variation(doc):
    """Build a tail from the ``variation`` block of a tower JSON document."""
    model = doc.get("model")
    params = doc.get("params", {}) or {}
    scale = float(params.get("scale", 1.0))
    if model == "exponential":
        return TailModel.exponential(params["rho"], scale)
    if model == "polynomial":
        return TailModel.polynomial(params["exponent"], scale)
    if model == "stretched":
        return TailModel.stretched(params["exponent"], scale)
    if model == "explicit":
        return TailModel.explicit(params["values"], beyond=params.get("beyond", "zero"))
    if model == "zero":
        return TailModel.zero()
    raise TailError(f"unknown variation model {model!r}")
