"""Replicated command logs under the extended (6,3)-median rule.

Logs are repetition-free sequences of commands ordered lexicographically:
a strict prefix precedes its extensions, and entries compare by the
command order (client id, sequence number, payload digest).  Each entry
also carries the round in which it was born (entered circulation) plus a
nullified flag; neither participates in the ordering, so flag flips and
birth disagreements never move a command's position.

A command's 40-byte order key is encoding-faithful: NUL-padded client id
(16 bytes), big-endian sequence number (8), truncated payload digest
(16).  A whole log's order key is the concatenation of its entries'
keys, which makes lexicographic log comparison a plain bytes comparison,
prefix rule included.

Logs are immutable and spread by reference: adopting a median adopts the
object, and a merge that changes nothing returns its median argument
unchanged, so converged populations share one log instance and the
per-server step cost collapses.

The per-round transition is: fan out fresh client commands as sigma*log2(n)
append requests, pull k logs from uniform random servers, and either go
undecided (fewer than l replies) or adopt median(M) for a uniform
l-subset M, extended by every command seen in M's logs or in this
round's append requests that the median is missing, in canonical command
order.  Merged births: the median log's birth wins for entries it
contains; otherwise the minimum birth among sources is kept.  Nullified
flags are sticky: a merge unions them across sources.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .adversary import Strategy, StrategySpec
from .errors import ConfigError
from .medianrules import RuleParams
from .rng import StreamFactory
from .simcore import World

SEED_CLIENT = "_seed"
DUMMY_CLIENT = "_dummy"


class Command:
    """A client command; value semantics on (client, seq, payload, nullified)."""

    __slots__ = ("client", "seq", "payload", "nullified", "okey", "_hash")

    def __init__(self, client: str, seq: int, payload: bytes = b"", nullified: bool = False):
        if not isinstance(client, str) or not client or len(client) > 16:
            raise ConfigError(f"client id must be 1..16 characters, got {client!r}")
        try:
            raw = client.encode("ascii")
        except UnicodeEncodeError:
            raise ConfigError(f"client id must be ascii, got {client!r}") from None
        if b"\x00" in raw:
            raise ConfigError("client id must not contain NUL")
        if not isinstance(seq, int) or seq < 1 or seq >= 1 << 63:
            raise ConfigError(f"seq must be a positive integer, got {seq!r}")
        self.client = client
        self.seq = seq
        self.payload = bytes(payload)
        self.nullified = bool(nullified)
        self.okey = raw.ljust(16, b"\x00") + seq.to_bytes(8, "big") \
            + hashlib.sha256(self.payload).digest()[:16]
        self._hash = hash((self.okey, self.nullified))

    def as_null(self) -> "Command":
        if self.nullified:
            return self
        return Command(self.client, self.seq, self.payload, nullified=True)

    def __eq__(self, other):
        return isinstance(other, Command) and self.okey == other.okey \
            and self.nullified == other.nullified

    def __hash__(self):
        return self._hash

    def __repr__(self):
        flag = ",null" if self.nullified else ""
        return f"Command({self.client}/{self.seq}{flag})"

    def label(self) -> str:
        return f"{self.client}/{self.seq}"


class Entry(NamedTuple):
    cmd: Command
    birth: int


def seed_command() -> Command:
    return Command(SEED_CLIENT, 1, b"")


class Log:
    """Immutable repetition-free command sequence."""

    __slots__ = ("entries", "key", "keyset", "_mkey", "_index", "_hash", "_nullcache")

    def __init__(self, entries: Sequence[Entry]):
        entries = tuple(entries)
        if not entries:
            raise ConfigError("logs are never empty; the undecided state is None")
        self.entries = entries
        self.key = b"".join(e.cmd.okey for e in entries)
        self.keyset = frozenset(e.cmd.okey for e in entries)
        if len(self.keyset) != len(entries):
            raise ConfigError("log contains a repeated command")
        self._mkey = None
        self._index = None
        self._hash = None
        self._nullcache = None

    def meta_key(self):
        """Full-content tie break used when order keys compare equal."""
        if self._mkey is None:
            self._mkey = tuple((e.cmd.okey, e.birth, e.cmd.nullified) for e in self.entries)
        return self._mkey

    def index(self) -> dict:
        if self._index is None:
            self._index = {e.cmd.okey: i for i, e in enumerate(self.entries)}
        return self._index

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if self is other:
            return True
        return isinstance(other, Log) and self.key == other.key \
            and self.meta_key() == other.meta_key()

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.key, self.meta_key()))
        return self._hash

    def __repr__(self):
        inner = ",".join(e.cmd.label() + ("*" if e.cmd.nullified else "") for e in self.entries)
        return f"Log[{inner}]"


def initial_log() -> Log:
    return Log((Entry(seed_command(), 0),))


def lex_compare(a: Log, b: Log) -> int:
    """-1, 0, 1 in the log order; a strict prefix precedes its extensions."""
    if a.key < b.key:
        return -1
    if a.key > b.key:
        return 1
    return 0


def _median3(logs: Sequence[Log]) -> Log:
    a, b, c = logs
    if a is b or a is c:
        return a
    if b is c:
        return b
    return sorted(logs, key=lambda L: (L.key, L.meta_key()))[len(logs) // 2]


def merge_logs(m_logs: Sequence[Log], appends: Iterable[Entry] = ()) -> Log:
    """median(M) extended by commands from M's logs / append requests.

    Returns the median object itself when nothing changes, preserving
    reference convergence across the population.
    """
    if len(m_logs) == 3:
        median = _median3(m_logs)
    else:
        median = sorted(m_logs, key=lambda L: (L.key, L.meta_key()))[len(m_logs) // 2]

    all_same = all(L is median for L in m_logs)
    if all_same and not appends:
        return median

    keyset = median.keyset
    extra: dict[bytes, Entry] = {}
    sticky_null: set[bytes] = set()
    for L in m_logs:
        if L is median:
            continue
        for e in L.entries:
            ok = e.cmd.okey
            if ok in keyset:
                if e.cmd.nullified:
                    sticky_null.add(ok)
            else:
                prev = extra.get(ok)
                if prev is None:
                    extra[ok] = e
                else:
                    birth = min(prev.birth, e.birth)
                    null = prev.cmd.nullified or e.cmd.nullified
                    cmd = prev.cmd if prev.cmd.nullified == null else prev.cmd.as_null()
                    extra[ok] = Entry(cmd, birth)
    for e in appends:
        ok = e.cmd.okey
        if ok in keyset:
            if e.cmd.nullified:
                sticky_null.add(ok)
            continue
        prev = extra.get(ok)
        if prev is None:
            extra[ok] = e
        else:
            birth = min(prev.birth, e.birth)
            null = prev.cmd.nullified or e.cmd.nullified
            cmd = prev.cmd if prev.cmd.nullified == null else prev.cmd.as_null()
            extra[ok] = Entry(cmd, birth)

    if not extra and not sticky_null:
        return median

    entries = list(median.entries)
    if sticky_null:
        entries = [Entry(e.cmd.as_null(), e.birth) if e.cmd.okey in sticky_null else e
                   for e in entries]
    for ok in sorted(extra):
        entries.append(extra[ok])
    return Log(entries)


def nullify_conflicts(log: Log) -> Log:
    """Flag every group of distinct commands sharing (client, seq).

    Positions and births are untouched; only the nullified flags flip,
    so the log order is stable under nullification.
    """
    by_pair: dict[bytes, bytes | None] = {}
    conflicted: set[bytes] = set()
    for e in log.entries:
        pair = e.cmd.okey[:24]
        seen = by_pair.get(pair)
        if seen is None:
            by_pair[pair] = e.cmd.okey
        elif seen != e.cmd.okey:
            conflicted.add(pair)
    if not conflicted:
        return log
    entries = [Entry(e.cmd.as_null(), e.birth) if e.cmd.okey[:24] in conflicted else e
               for e in log.entries]
    return Log(entries)


def extended_median_step(own: Log | None, replies: Sequence[Log],
                         appends: Sequence[Entry], params: RuleParams, rng) -> Log | None:
    """Spec-shaped per-server step: subset choice via the provided rng."""
    if len(replies) < params.l:
        return None
    idx = rng.choice(len(replies), size=params.l, replace=False)
    return merge_logs([replies[i] for i in sorted(idx)], appends)


def fanout_count(n: int, sigma: int) -> int:
    return math.ceil(sigma * math.log2(n))


# ---------------------------------------------------------------------------
# Engine protocol and runner.


class LogCache:
    """Per-trial canonicalization of logs plus a per-round step memo.

    Content-equal logs produced by different servers become the same
    object, which lets merge/median fast paths run on identity and lets
    step results be shared population-wide: once every useful server
    references one log object, a converged round costs O(1) merges.
    """

    __slots__ = ("_intern", "memo", "_memo_round")

    def __init__(self):
        self._intern: dict[Log, Log] = {}
        self.memo: dict = {}
        self._memo_round = -1

    def canon(self, log: Log) -> Log:
        got = self._intern.get(log)
        if got is None:
            self._intern[log] = log
            return log
        return got

    def memo_for(self, r: int) -> dict:
        if self._memo_round != r:
            self.memo.clear()
            self._memo_round = r
        return self.memo

    def nullified(self, log: Log) -> Log:
        out = log._nullcache
        if out is None:
            out = nullify_conflicts(log)
            if out is not log:
                out = self.canon(out)
            log._nullcache = out
        return out


class SmrProtocol:
    """Extended median rule wired to the round engine.

    Server state is Log | None.  Replies are log references; the engine
    pre-shuffles them, so the first l form a uniform l-subset.
    """

    def __init__(self, n: int, params: RuleParams = RuleParams(), sigma: int = 5):
        self.n = n
        self.k = params.k
        self.l = params.l
        self.params = params
        self.fanout = fanout_count(n, sigma)
        self.cache = LogCache()
        self._init = self.cache.canon(initial_log())

    def initial_state(self, sid: int):
        return self._init

    def holder_mask(self, states) -> np.ndarray:
        return np.fromiter((s is not None for s in states), dtype=bool, count=len(states))

    def serialize(self, state):
        if state is None:
            return None
        return [[e.cmd.label(), e.birth, e.cmd.nullified] for e in state.entries]

    def on_deliver(self, state, sid, msgs, r, rng, n):
        # An undecided server cannot vouch for a command; the client retries.
        pushes = []
        for cmd in msgs:
            if state is not None and cmd.okey not in state.keyset:
                for t in rng.integers(1, n + 1, size=self.fanout):
                    pushes.append((int(t), Entry(cmd, r)))
        return pushes, []

    def round_answers(self, states, blocked, r):
        return [None if blocked[i] or states[i] is None else states[i]
                for i in range(len(states))]

    def step(self, state, sid, replies, pushes, r):
        if len(replies) < self.l:
            return None
        if pushes:
            return self.cache.canon(merge_logs(replies[: self.l], pushes))
        memo = self.cache.memo_for(r)
        m = replies[: self.l]
        key = tuple(map(id, m))
        hit = memo.get(key)
        if hit is not None:
            return hit[1]
        out = self.cache.canon(merge_logs(m))
        memo[key] = (m, out)
        return out


@dataclass
class SmrTrackRecord:
    injected: int | None = None
    broadcast: int | None = None
    stable: int | None = None


def run_smr(n: int, rounds: int, seed: int, adversary_spec: StrategySpec,
            commands: dict[int, list[Command]], params: RuleParams = RuleParams(),
            sigma: int = 5, alpha: int = 1, audit_shrinkage: bool = True) -> dict:
    """One seeded trial of pure log replication (no commitment).

    commands maps a first-submission round to the commands a client hands
    over then; each command is redelivered to a fresh uniform server
    every round until its first receipt by a non-blocked server.
    """
    streams = StreamFactory(seed)
    strategy = Strategy(adversary_spec, n, streams)
    proto = SmrProtocol(n, params, sigma)
    world = World(n, proto, strategy, streams, alpha=alpha)

    by_okey: dict[bytes, Command] = {c.okey: c for cs in commands.values() for c in cs}
    track: dict[bytes, SmrTrackRecord] = {ok: SmrTrackRecord() for ok in by_okey}
    pending: dict[bytes, Command] = {}

    pos_series: dict[bytes, list] = {ok: [] for ok in track}
    shrink_ok = True
    prefix_sets: dict[bytes, frozenset] = {}

    for r in range(1, rounds + 1):
        for cmd in commands.get(r, ()):
            pending[cmd.okey] = cmd
        targets: dict[bytes, tuple[int, bool]] = {}
        for ok, cmd in pending.items():
            rng = streams.client_stream(cmd.client, r)
            tgt = int(rng.integers(1, n + 1))
            targets[ok] = (tgt, world.states[tgt - 1] is not None)
            world.schedule_delivery(r, tgt, cmd)

        ev = world.run_round()
        blocked = ev["blocked"]

        for ok, (tgt, held) in targets.items():
            if blocked[tgt - 1]:
                continue  # receipt lost outright; retry
            if track[ok].injected is None:
                track[ok].injected = r
            if held:
                # the receiver could fan out (or already carries the
                # command); the command is in circulation, stop retrying
                del pending[ok]

        # per-round tracking over end-of-round logs
        logs = [s for s in world.states if s is not None]
        for ok, rec in track.items():
            if rec.injected is None:
                continue
            present = [L.index().get(ok) for L in logs]
            in_all = bool(logs) and all(p is not None for p in present)
            if in_all and rec.broadcast is None:
                rec.broadcast = r
            positions = frozenset(p for p in present if p is not None)
            pos_series[ok].append((r, in_all, positions))
            if audit_shrinkage and in_all:
                pset = frozenset(L.key[: (L.index()[ok] + 1) * 40] for L in logs)
                prev = prefix_sets.get(ok)
                if prev is not None and not pset <= prev:
                    shrink_ok = False
                prefix_sets[ok] = pset

    for ok, rec in track.items():
        series = pos_series[ok]
        rec.stable = None
        if series and series[-1][1] and len(series[-1][2]) == 1:
            final_pos = series[-1][2]
            stable = None
            for r, in_all, positions in reversed(series):
                if in_all and positions == final_pos:
                    stable = r
                else:
                    break
            rec.stable = stable

    labels = {ok: cmd.label() for ok, cmd in by_okey.items()}
    return {
        "n": n,
        "rounds": rounds,
        "useful": world.useful_history,
        "commands": {labels[ok]: vars(rec) for ok, rec in track.items()},
        "audits": {"shrinkage": shrink_ok},
    }
