"""One-value gossip rules of the (k,l) family.

All rules share the same shape: a server sends k value requests to
uniform random servers (with replacement, self allowed); servers holding
a value reply; a server that receives fewer than l replies becomes
undecided (None).  With at least l replies:

  median rule    adopt the median of a uniformly random l-subset;
  (k,l,f) rule   adopt f(l-subset) for an order-invariant valid selector;
  gossip rule    adopt the target value if *any* received reply carries
                 it (all replies are checked, no subsampling), else the
                 fallback value;
  priority rule  adopt the maximum of a uniformly random l-subset.

Besides the per-server step functions this module houses a vectorized
whole-population simulator for these rules (value dynamics only; logs
live elsewhere), which is what the statistical experiments run on, plus
the exact distribution enumerations used to cross-check it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations, product

import numpy as np

from .adversary import Strategy, StrategySpec
from .errors import ConfigError, SelectorValidityError
from .rng import StreamFactory
from .simcore import WorldSnapshot

BOT = None


@dataclass(frozen=True)
class RuleParams:
    k: int = 6
    l: int = 3

    def __post_init__(self):
        if not (self.k >= self.l > 1):
            raise ConfigError(f"need k >= l > 1, got k={self.k} l={self.l}")
        if self.l % 2 == 0:
            raise ConfigError(f"l must be odd, got {self.l}")


def _subset(replies, l: int, rng) -> list:
    idx = rng.choice(len(replies), size=l, replace=False)
    return [replies[i] for i in idx]


def median_step(own, replies, params: RuleParams, rng) -> object:
    """Median of a uniform l-subset; None when fewer than l replies."""
    if len(replies) < params.l:
        return BOT
    sub = sorted(_subset(replies, params.l, rng))
    return sub[params.l // 2]


def klf_step(own, replies, params: RuleParams, selector, rng) -> object:
    """Generic (k,l,f) rule for a pluggable selector.

    The selector must be order-invariant and must return one of its
    arguments; both are checked and a violation aborts the trial.
    """
    if len(replies) < params.l:
        return BOT
    sub = _subset(replies, params.l, rng)
    val = selector(sub)
    if not any(val == s for s in sub):
        raise SelectorValidityError(f"selector returned {val!r}, not among {sub!r}")
    if selector(sorted(sub)) != val:
        raise SelectorValidityError("selector is not order-invariant")
    return val


def gossip_step(own, replies, params: RuleParams, target, fallback) -> object:
    """Two-value spread rule; every received reply is checked for the target."""
    if len(replies) < params.l:
        return BOT
    return target if any(r == target for r in replies) else fallback


def priority_step(own, replies, params: RuleParams, rng) -> object:
    """Maximum of a uniform l-subset; None when fewer than l replies."""
    if len(replies) < params.l:
        return BOT
    return max(_subset(replies, params.l, rng))


# ---------------------------------------------------------------------------
# Vectorized population dynamics.
#
# Values are int64 with -1 encoding the undecided state.  Per round all
# n*k request targets are drawn at once; one iid priority per request
# slot turns "first three valid slots in priority order" into a uniform
# 3-subset of the received replies, mirroring the scalar step exactly.


@dataclass
class ValueRunConfig:
    n: int
    rounds: int
    params: RuleParams = RuleParams()
    alpha: int = 1
    rule: str = "median"            # median | gossip | priority
    gossip_target: int = 2
    gossip_fallback: int = 1
    stop_on_agreement: bool = False
    settle_rounds: int = 10
    stop_on_extinction: bool = False
    record_values: bool = False


def run_value_dynamics(init_values: np.ndarray, cfg: ValueRunConfig,
                       strategy: Strategy, streams: StreamFactory) -> dict:
    n, k, l = cfg.n, cfg.params.k, cfg.params.l
    if init_values.shape != (n,):
        raise ConfigError("init_values must have shape (n,)")
    V = init_values.astype(np.int64).copy()

    useful_series: list[int] = []
    holder_series: list[int] = []
    distinct_series: list[int] = []
    target_series: list[int] = []
    values_log: list[list[int]] = []
    snapshots: list[WorldSnapshot] = []
    blocked_prev = np.zeros(n, dtype=bool)
    validity_ok = True
    absorption_ok = True
    agreement_round = None
    agreed_value = None
    extinction_round = None
    all_hold_target_round = None
    settle_left = None
    rounds_run = 0

    for r in range(1, cfg.rounds + 1):
        holders = V >= 0
        snapshots.append(WorldSnapshot(r, holders, blocked_prev, states=()))
        lagged = snapshots[max(1, r - cfg.alpha) - 1]
        blocked = strategy.choose_blocked(lagged)
        useful = holders & ~blocked

        tstream = streams.round_stream(r, "targets")
        targets = tstream.integers(0, n, size=(n, k))
        tv = V[targets]
        valid = useful[targets] & ~blocked[:, None]
        counts = valid.sum(axis=1)
        enough = counts >= l

        if cfg.rule == "gossip":
            saw = (valid & (tv == cfg.gossip_target)).any(axis=1)
            chosen = np.where(saw, cfg.gossip_target, cfg.gossip_fallback)
        else:
            pri = streams.round_stream(r, "subsets").random((n, k))
            pri = np.where(valid, pri, 2.0)
            order = np.argsort(pri, axis=1)[:, :l]
            picked = np.take_along_axis(tv, order, axis=1)
            if cfg.rule == "median":
                chosen = np.sort(picked, axis=1)[:, l // 2]
            elif cfg.rule == "priority":
                chosen = picked.max(axis=1)
            else:
                raise ConfigError(f"unknown rule {cfg.rule!r}")
        newV = np.where(enough, chosen, -1)

        start_vals = np.unique(V[holders])
        end_vals = np.unique(newV[newV >= 0])
        if np.setdiff1d(end_vals, start_vals).size:
            validity_ok = False

        rounds_run = r
        useful_series.append(int(useful.sum()))
        holder_series.append(int((newV >= 0).sum()))
        distinct_series.append(int(end_vals.size))
        if cfg.rule == "gossip":
            cnt = int((newV == cfg.gossip_target).sum())
            target_series.append(cnt)
            if all_hold_target_round is None and holder_series[-1] > 0 \
                    and cnt == holder_series[-1]:
                all_hold_target_round = r
        if cfg.record_values:
            values_log.append([int(x) for x in newV])

        if agreement_round is None and end_vals.size == 1:
            agreement_round = r
            agreed_value = int(end_vals[0])
            settle_left = cfg.settle_rounds
        elif agreement_round is not None:
            if end_vals.size > 1 or (end_vals.size == 1 and int(end_vals[0]) != agreed_value):
                absorption_ok = False
        if extinction_round is None and holder_series[-1] == 0:
            extinction_round = r

        V = newV
        blocked_prev = blocked

        if cfg.stop_on_extinction and extinction_round is not None:
            break
        if cfg.stop_on_agreement and settle_left is not None:
            if settle_left == 0:
                break
            settle_left -= 1

    trace = {
        "n": n,
        "rounds": rounds_run,
        "useful": useful_series,
        "holders": holder_series,
        "distinct": distinct_series,
        "agreement_round": agreement_round,
        "agreed_value": agreed_value,
        "extinction_round": extinction_round,
        "audits": {"validity": validity_ok, "absorption": absorption_ok},
        "final_values": [int(x) for x in V],
    }
    if cfg.rule == "gossip":
        trace["target_holders"] = target_series
        trace["all_hold_target_round"] = all_hold_target_round
    if cfg.record_values:
        trace["values"] = values_log
    return trace


def make_init(n: int, kind: str, **kw) -> np.ndarray:
    """Initial value vectors: unanimous | binary | fraction-useful | keys."""
    if kind == "unanimous":
        return np.full(n, int(kw.get("value", 1)), dtype=np.int64)
    if kind == "binary":
        v = np.full(n, 1, dtype=np.int64)
        v[: n // 2] = 0
        return v
    if kind == "fraction-useful":
        p = float(kw["fraction"])
        if not 0 <= p <= 1:
            raise ConfigError(f"fraction must lie in [0,1], got {p}")
        m = int(p * n)
        v = np.full(n, -1, dtype=np.int64)
        v[:m] = np.arange(1, m + 1)
        return v
    if kind == "plant":
        copies = int(kw["copies"])
        if copies > n:
            raise ConfigError(f"cannot plant {copies} copies among {n} servers")
        target = int(kw.get("target", 2))
        fallback = int(kw.get("fallback", 1))
        v = np.full(n, fallback, dtype=np.int64)
        v[:copies] = target
        return v
    if kind == "keys":
        keys = [int(x) for x in kw["keys"]]
        if len(keys) != n:
            raise ConfigError(f"keys list has {len(keys)} entries for n={n}")
        return np.array(keys, dtype=np.int64)
    raise ConfigError(f"unknown init kind {kind!r}")


def run_consensus(n: int, rounds: int, seed: int, init: np.ndarray,
                  adversary_spec: StrategySpec, params: RuleParams = RuleParams(),
                  alpha: int = 1, rule: str = "median", **cfg_kw) -> dict:
    """One seeded trial of the population dynamics; returns the trace."""
    streams = StreamFactory(seed)
    strategy = Strategy(adversary_spec, n, streams)
    cfg = ValueRunConfig(n=n, rounds=rounds, params=params, alpha=alpha,
                         rule=rule, **cfg_kw)
    return run_value_dynamics(init, cfg, strategy, streams)


# ---------------------------------------------------------------------------
# Exact enumerations.


def median_subset_distribution(replies, l: int = 3) -> dict:
    """Exact distribution of the median over all l-subsets of `replies`."""
    total = math.comb(len(replies), l)
    dist: dict = {}
    for sub in combinations(replies, l):
        m = sorted(sub)[l // 2]
        dist[m] = dist.get(m, Fraction(0)) + Fraction(1, total)
    return dist


def selection_distribution_full(values, n: int, k: int = 6, l: int = 3) -> dict:
    """Distribution of the (k,l)-median over n servers, conditioned on success.

    The first len(values) servers are useful and hold `values`; the rest
    are undecided and never reply.  Enumerates all n^k target tuples and
    all l-subsets of the replies, in exact rational arithmetic.
    """
    u = len(values)
    if u > n:
        raise ConfigError("more values than servers")
    dist: dict = {}
    success = Fraction(0)
    base = Fraction(1, n ** k)
    for tup in product(range(n), repeat=k):
        replies = [values[t] for t in tup if t < u]
        c = len(replies)
        if c < l:
            continue
        success += base
        w = base / math.comb(c, l)
        for sub in combinations(replies, l):
            m = sorted(sub)[l // 2]
            dist[m] = dist.get(m, Fraction(0)) + w
    if success == 0:
        return {}
    return {v: p / success for v, p in dist.items()}


def selection_distribution_useful_only(values, l: int = 3) -> dict:
    """Distribution of the (l,l)-median sampling only the useful servers."""
    u = len(values)
    dist: dict = {}
    w = Fraction(1, u ** l)
    for tup in product(range(u), repeat=l):
        m = sorted(values[t] for t in tup)[l // 2]
        dist[m] = dist.get(m, Fraction(0)) + w
    return dist
