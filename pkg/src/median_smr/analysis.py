"""Drift curves, gravity law, and metrics aggregation.

The three drift polynomials that govern the (6,3)-median dynamics are kept
as exact rational coefficient vectors:

    f(x)       = -10x^6 + 36x^5 - 45x^4 + 20x^3
    g(x)       = f(x) - 3x^2                 (death spiral,   <= 0 on [0,1])
    g_avail(x) = (4/5) f(x) - (41/40) x      (availability,   >= 0 on [1/2,3/4])
    g_block(x) = (7/10) f(x) - (39/40) x     (heavy blocking, <= 0 on [0,1])

f(x) is the probability that a server receives at least 3 useful replies
out of 6 uniform requests when a fraction x of servers is useful, i.e.
P[Bin(6,x) >= 3].  Sign scans run on an exact rational grid; on top of
that, certify_sign() proves the sign claim on the whole interval with
rational interval arithmetic (equality roots are factored out first, so
the recursion terminates).

The gravity law gives the probability that the (3,3)-median over n_t
useful servers adopts the value of rank i (ties broken by identifier):

    g(i) = (6(i-1)(n_t-i) + 3 n_t - 2) / n_t^3
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

Rat = Fraction


def _poly(*pairs) -> tuple[Fraction, ...]:
    """Coefficient tuple (ascending degree) from (degree, coeff) pairs."""
    deg = max(d for d, _ in pairs)
    out = [Fraction(0)] * (deg + 1)
    for d, c in pairs:
        out[d] += Fraction(c)
    return tuple(out)


F_POLY = _poly((6, -10), (5, 36), (4, -45), (3, 20))
G_POLY = _poly((6, -10), (5, 36), (4, -45), (3, 20), (2, -3))
G_AVAIL_POLY = _poly(
    (6, Fraction(-8)), (5, Fraction(144, 5)), (4, -36), (3, 16), (1, Fraction(-41, 40))
)
G_BLOCK_POLY = _poly(
    (6, -7), (5, Fraction(126, 5)), (4, Fraction(-63, 2)), (3, 14), (1, Fraction(-39, 40))
)

CURVES: dict[str, tuple[Fraction, ...]] = {
    "f": F_POLY,
    "g": G_POLY,
    "g_avail": G_AVAIL_POLY,
    "g_block": G_BLOCK_POLY,
}


class DomainError(ValueError):
    pass


def eval_poly(coeffs: Sequence[Fraction], x: Fraction) -> Fraction:
    acc = Fraction(0)
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def eval_curve(name: str, x) -> Fraction:
    """Exact value of a named drift curve at rational x in [0,1]."""
    if name not in CURVES:
        raise DomainError(f"unknown curve {name!r}")
    x = Fraction(x)
    if not 0 <= x <= 1:
        raise DomainError(f"curve argument {x} outside [0,1]")
    return eval_poly(CURVES[name], x)


def curve_success(x) -> Fraction:
    """P[Bin(6,x) >= 3], computed from the binomial tail.

    Independent route to f(x); the coefficient vector above must agree
    with this for all x (tested exactly).
    """
    x = Fraction(x)
    total = Fraction(0)
    for j in range(3, 7):
        total += math.comb(6, j) * x**j * (1 - x) ** (6 - j)
    return total


@dataclass
class ScanResult:
    curve: str
    claim: str
    lo: Fraction
    hi: Fraction
    step: Fraction
    points: int
    violations: list[Fraction]
    min_at: tuple[Fraction, Fraction]
    max_at: tuple[Fraction, Fraction]

    @property
    def ok(self) -> bool:
        return not self.violations


def sign_scan(name: str, claim: str, lo=0, hi=1, step=Fraction(1, 10_000)) -> ScanResult:
    """Exact rational grid scan of a sign claim ('<=0' or '>=0')."""
    coeffs = CURVES[name]
    lo, hi, step = Fraction(lo), Fraction(hi), Fraction(step)
    if claim not in ("<=0", ">=0"):
        raise DomainError(f"claim must be '<=0' or '>=0', got {claim!r}")
    x = lo
    violations: list[Fraction] = []
    vmin = vmax = None
    amin = amax = lo
    points = 0
    while x <= hi:
        v = eval_poly(coeffs, x)
        points += 1
        if vmin is None or v < vmin:
            vmin, amin = v, x
        if vmax is None or v > vmax:
            vmax, amax = v, x
        bad = v > 0 if claim == "<=0" else v < 0
        if bad:
            violations.append(x)
        x += step
    return ScanResult(name, claim, lo, hi, step, points, violations, (amin, vmin), (amax, vmax))


def _interval_eval(coeffs, xlo: Fraction, xhi: Fraction) -> tuple[Fraction, Fraction]:
    """Interval Horner evaluation; valid for any xlo <= xhi."""
    lo = hi = Fraction(0)
    for c in reversed(coeffs):
        cands = (lo * xlo, lo * xhi, hi * xlo, hi * xhi)
        lo, hi = min(cands) + c, max(cands) + c
    return lo, hi


def _divide_out_root_at_zero(coeffs) -> tuple[tuple[Fraction, ...], int]:
    m = 0
    cs = list(coeffs)
    while cs and cs[0] == 0:
        cs.pop(0)
        m += 1
    return tuple(cs), m


def certify_sign(name: str, claim: str, lo=0, hi=1, max_depth: int = 40) -> int:
    """Prove the sign claim on the whole interval, not just a grid.

    A root at x=0 of known multiplicity is factored out, after which the
    quotient has strict sign on the interval and a recursive interval
    subdivision terminates.  Returns the number of certified cells;
    raises DomainError if the claim is false or cannot be certified.
    """
    coeffs = CURVES[name]
    lo, hi = Fraction(lo), Fraction(hi)
    want_nonpos = claim == "<=0"
    q, mult = _divide_out_root_at_zero(coeffs)
    # x^mult >= 0 on [0,1], so the claim reduces to a strict claim on q.
    cells = 0

    def recurse(a: Fraction, b: Fraction, depth: int):
        nonlocal cells
        vlo, vhi = _interval_eval(q, a, b)
        if want_nonpos and vhi < 0:
            cells += 1
            return
        if not want_nonpos and vlo > 0:
            cells += 1
            return
        if depth >= max_depth:
            raise DomainError(f"certification of {name} {claim} stalled on [{a},{b}]")
        mid = (a + b) / 2
        recurse(a, mid, depth + 1)
        recurse(mid, b, depth + 1)

    recurse(lo, hi, 0)
    return cells


# ---------------------------------------------------------------------------
# Gravity law


def gravity(i: int, n_t: int) -> Fraction:
    """Adoption probability of the rank-i value under the (3,3)-median."""
    if n_t < 1:
        raise DomainError(f"n_t must be >= 1, got {n_t}")
    if not 1 <= i <= n_t:
        raise DomainError(f"rank {i} outside 1..{n_t}")
    return Fraction(6 * (i - 1) * (n_t - i) + 3 * n_t - 2, n_t**3)


def gravity_terms(i: int, n_t: int) -> tuple[Fraction, Fraction, Fraction]:
    """The pairwise-distinct, one-duplicate, and triple-hit contributions.

    Their sum equals gravity(i, n_t) identically.
    """
    n = Fraction(n_t)
    distinct = 3 * Fraction(1, n_t) * 2 * (Fraction(i - 1) / n) * (Fraction(n_t - i) / n)
    duplicate = 3 * Fraction(1, n_t**2) * (Fraction(n_t - 1) / n)
    triple = Fraction(1, n_t**3)
    return distinct, duplicate, triple


def gravity_argmax(n_t: int) -> int:
    best = max(range(1, n_t + 1), key=lambda i: gravity(i, n_t))
    return best


def heavy_threshold(c: float, n_t: int) -> float:
    """Identifier-count threshold 2*sqrt(c * n_t * ln n_t) above which a
    single identifier is considered heavy."""
    if n_t < 1:
        raise DomainError(f"n_t must be >= 1, got {n_t}")
    return 2.0 * math.sqrt(c * n_t * math.log(n_t)) if n_t > 1 else 0.0


# ---------------------------------------------------------------------------
# Trace metrics

@dataclass
class MetricsReport:
    """Aggregated per-trial metrics; fields are None when not applicable."""

    rounds: int = 0
    n: int = 0
    useful_min: int | None = None
    useful_mean: float | None = None
    useful_final: int | None = None
    first_zero_useful_round: int | None = None
    agreement_round: int | None = None
    agreed_value: object = None
    commit_latencies: dict[str, int] = field(default_factory=dict)
    window_classes: dict[str, int] = field(default_factory=dict)
    audits: dict[str, object] = field(default_factory=dict)
    extra: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "rounds": self.rounds,
            "n": self.n,
            "useful_min": self.useful_min,
            "useful_mean": self.useful_mean,
            "useful_final": self.useful_final,
            "first_zero_useful_round": self.first_zero_useful_round,
            "agreement_round": self.agreement_round,
            "agreed_value": self.agreed_value,
            "commit_latencies": self.commit_latencies,
            "window_classes": self.window_classes,
            "audits": self.audits,
        }
        d.update(self.extra)
        return d


def trace_metrics(trace: dict) -> MetricsReport:
    """Summarize a runner trace (a dict of series and events)."""
    useful = trace.get("useful", [])
    rep = MetricsReport(rounds=trace.get("rounds", len(useful)), n=trace.get("n", 0))
    if useful:
        rep.useful_min = min(useful)
        rep.useful_mean = sum(useful) / len(useful)
        rep.useful_final = useful[-1]
        for r, u in enumerate(useful, start=1):
            if u == 0:
                rep.first_zero_useful_round = r
                break
    rep.agreement_round = trace.get("agreement_round")
    rep.agreed_value = trace.get("agreed_value")
    rep.commit_latencies = dict(trace.get("commit_latencies", {}))
    rep.window_classes = dict(trace.get("window_classes", {}))
    rep.audits = dict(trace.get("audits", {}))
    for key in ("holders", "events"):
        if key in trace:
            rep.extra[key] = trace[key]
    return rep
