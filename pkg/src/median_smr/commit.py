"""Compact replication: age-based prefix commitment over median-merged logs.

Servers keep only the uncommitted tail of the history.  Every entry
remembers its birth round; once the round number exceeds the birth by
the age threshold T, the entry has had time to spread to every useful
server and settle at a common position, so each server independently
executes the aged prefix against its shared state and drops it from the
log.  T must exceed both twice the broadcast time and broadcast plus
merge-settling time, which the derived parameters enforce.

Client commands are admitted through sequence-number gating: a server
holding a log fans a command out only when its sequence number is the
next one for that client and the command is not already pending.  A
resubmission of the latest committed sequence number triggers an
acknowledgement carrying the committed position plus the previous
command's sibling chain, which is exactly the material the client needs
to certify commitment later (see certs).  Anything else is ignored and
the client's retry loop compensates.

Two conflicting commands (same client and sequence number, different
payload) nullify each other in place: both keep their log positions but
are flagged, commit as no-ops, and still advance the client's sequence
number.

An undecided server adopts the shared state of any replier (catch-up by
state transfer) and rejoins the log protocol the first round it sees a
full quorum of replies.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .adversary import Strategy, StrategySpec
from .certs import (CertMeta, EMPTY_META, leaf_hash, on_commit_update,
                    ClientStore, verify_certificate,
                    certificate_to_bytes, certificate_from_bytes, flip_bit)
from .errors import ConfigError
from .medianrules import RuleParams
from .rng import StreamFactory
from .simcore import World
from .smrlog import (Command, DUMMY_CLIENT, Entry, Log, LogCache, initial_log,
                     merge_logs)

GENESIS_DIGEST = hashlib.sha256(b"\x03shared-genesis").digest()
GENESIS_OKEY_DIGEST = hashlib.sha256(b"\x05shared-genesis-okeys").digest()


def okey_fold(digest: bytes, okey: bytes) -> bytes:
    """Flag-free digest chain over command order keys.

    Used for the virtual-prefix audit: folding a log prefix onto a
    state's okey_digest gives the same value no matter where the
    committed/pending split currently sits, and nullification (which
    only flips flags) does not disturb it.
    """
    return hashlib.sha256(b"\x04" + digest + okey).digest()


class SharedState:
    """Deterministic state machine folded over the committed sequence.

    The digest chain binds the whole committed history, so two states
    are equal iff (count, digest) agree; `history` keeps every prefix
    digest, which makes is-prefix-of checks O(1).
    """

    __slots__ = ("count", "digest", "history", "sn", "ps", "meta", "okey_digest")

    def __init__(self, count: int, digest: bytes, history: tuple,
                 sn: dict, ps: dict, meta: CertMeta, okey_digest: bytes):
        self.count = count
        self.digest = digest
        self.history = history
        self.sn = sn
        self.ps = ps
        self.meta = meta
        self.okey_digest = okey_digest

    @classmethod
    def genesis(cls) -> "SharedState":
        return cls(0, GENESIS_DIGEST, (GENESIS_DIGEST,), {}, {}, EMPTY_META,
                   GENESIS_OKEY_DIGEST)

    def apply(self, cmds: Sequence[Command]) -> "SharedState":
        count = self.count
        digest = self.digest
        okd = self.okey_digest
        hs = []
        sn = dict(self.sn)
        ps = dict(self.ps)
        meta = self.meta
        for cmd in cmds:
            count += 1
            digest = hashlib.sha256(b"\x02" + digest + leaf_hash(cmd)).digest()
            okd = okey_fold(okd, cmd.okey)
            hs.append(digest)
            sn[cmd.client] = cmd.seq
            ps[cmd.client] = count
            meta = on_commit_update(meta, cmd, count)
        return SharedState(count, digest, self.history + tuple(hs), sn, ps, meta, okd)

    def extends(self, old_count: int, old_digest: bytes) -> bool:
        return self.count >= old_count and self.history[old_count] == old_digest

    def __eq__(self, other):
        return isinstance(other, SharedState) and self.count == other.count \
            and self.digest == other.digest

    def __hash__(self):
        return hash((self.count, self.digest))

    def __repr__(self):
        return f"SharedState(count={self.count}, digest={self.digest.hex()[:12]})"


def dummy_command(state: SharedState) -> Command:
    """Placeholder appended when commitment would empty a log."""
    return Command(DUMMY_CLIENT, state.sn.get(DUMMY_CLIENT, 0) + 1, b"")


@dataclass(frozen=True)
class AgeParams:
    """Commit age threshold and the spreading budgets it must dominate."""
    T: int
    T_B: int   # broadcast budget: rounds for one command to reach all useful logs
    T_M: int   # settling budget: rounds for merged logs to agree on a prefix

    def __post_init__(self):
        if min(self.T, self.T_B, self.T_M) < 1:
            raise ConfigError("age parameters must be positive")
        if not (self.T > 2 * self.T_B and self.T > self.T_B + self.T_M):
            raise ConfigError(
                f"need T > max(2*T_B, T_B+T_M); got T={self.T}, T_B={self.T_B}, T_M={self.T_M}")

    @classmethod
    def derived(cls, n: int, c_t: float = 6.0, T: int | None = None) -> "AgeParams":
        tb = math.ceil(c_t * math.log2(n))
        return cls(T if T is not None else max(2 * tb, tb + tb) + 1, tb, tb)


class Ack(NamedTuple):
    client: str
    seq: int
    pos: int
    prev: tuple | None   # (seq, pos, chain) of the client's previous command


class CommitProtocol:
    """Engine protocol; per-server state is (log | None, shared state)."""

    def __init__(self, n: int, params: RuleParams = RuleParams(),
                 age: AgeParams | None = None, sigma: int = 5):
        self.n = n
        self.k = params.k
        self.l = params.l
        self.age = age if age is not None else AgeParams.derived(n)
        self.fanout = math.ceil(sigma * math.log2(n))
        self.cache = LogCache()
        self._states: dict = {}
        self._init = (self.cache.canon(initial_log()),
                      self._canon_state(SharedState.genesis()))
        self.commit_events: list = []   # (round, committed cmds, base count, new state)
        self._memo: dict = {}
        self._memo_round = -1

    def _canon_state(self, state: SharedState) -> SharedState:
        """Content-equal shared states become one object, so that server
        groups that commit the same prefix along different log tails
        re-converge on identity (and on memo keys) immediately."""
        got = self._states.get(state)
        if got is None:
            self._states[state] = state
            return state
        return got

    def initial_state(self, sid: int):
        return self._init

    def holder_mask(self, states):
        return np.fromiter((s[0] is not None for s in states), dtype=bool, count=len(states))

    def serialize(self, state):
        log, shared = state
        return {"count": shared.count, "digest": shared.digest.hex()[:16],
                "log": None if log is None else
                [[e.cmd.label(), e.birth, e.cmd.nullified] for e in log.entries]}

    def on_deliver(self, state, sid, msgs, r, rng, n):
        log, shared = state
        pushes, acks = [], []
        if log is None:
            return pushes, acks
        for cmd in msgs:
            have = shared.sn.get(cmd.client, 0)
            if cmd.seq == have + 1 and cmd.okey not in log.keyset:
                for t in rng.integers(1, n + 1, size=self.fanout):
                    pushes.append((int(t), Entry(cmd, r)))
            elif cmd.seq == have and have > 0:
                acks.append(self._make_ack(shared, cmd))
        return pushes, acks

    def _make_ack(self, shared: SharedState, cmd: Command) -> Ack:
        older, newer = shared.meta.pairs[cmd.client]
        prev = None if older is None else (older.seq, older.pos, older.chain)
        return Ack(cmd.client, newer.seq, newer.pos, prev)

    def round_answers(self, states, blocked, r):
        return [None if blocked[i] or states[i][0] is None else states[i]
                for i in range(len(states))]

    def step(self, st, sid, replies, pushes, r):
        log, shared = st
        if len(replies) < self.l:
            if log is None and replies:
                other = replies[0][1]
                if other is not shared:
                    return (None, other)
                return st
            if log is None:
                return st
            return (None, shared)
        if pushes:
            merged, shared2 = self._full_step(log, shared, replies, pushes, r)
        else:
            # The outcome depends only on the reply objects, whether our
            # own log is down, and (if it is not) our shared state —
            # share one computation and one result tuple per such key.
            memo = self.cache.memo_for(r)
            m = replies[: self.l]
            if log is None:
                key = (0, id(replies[0][1]), *map(id, (t[0] for t in m)))
            else:
                key = (1, id(shared), *map(id, (t[0] for t in m)))
            hit = memo.get(key)
            if hit is not None:
                merged, shared2 = hit[2]
            else:
                merged, shared2 = out = self._full_step(log, shared, replies, (), r)
                memo[key] = (shared, replies[:3], out)
        if merged is log and shared2 is shared:
            return st
        return (merged, shared2)

    def _full_step(self, log, shared, replies, pushes, r):
        shared2 = shared if log is not None else replies[0][1]
        merged = self.cache.canon(merge_logs([t[0] for t in replies[: self.l]], pushes))
        merged = self.cache.nullified(merged)
        if r - merged.entries[0].birth >= self.age.T:
            merged, shared2 = self._commit(merged, shared2, r)
        return merged, shared2

    def _commit(self, log: Log, shared: SharedState, r: int):
        """Execute the aged prefix; memoized per round so that servers
        sharing input objects also share the outputs (and the event is
        recorded once, not once per server)."""
        if self._memo_round != r:
            self._memo.clear()
            self._memo_round = r
        key = (id(log), id(shared))
        hit = self._memo.get(key)
        if hit is not None:
            return hit[2]
        T = self.age.T
        cut = 0
        for e in log.entries:
            if r - e.birth >= T:
                cut += 1
            else:
                break
        if cut == 0:
            out = (log, shared)
        else:
            cmds = [e.cmd for e in log.entries[:cut]]
            shared2 = self._canon_state(shared.apply(cmds))
            rest = log.entries[cut:]
            if not rest:
                rest = (Entry(dummy_command(shared2), r),)
            out = (self.cache.canon(Log(rest)), shared2)
            self.commit_events.append((r, cmds, shared.count, shared2))
        self._memo[key] = (log, shared, out)
        return out


# ---------------------------------------------------------------------------
# Trial runner: staggered clients, liveness/safety audits, certificates.


@dataclass
class ClientAgent:
    name: str
    total: int
    start: int
    store: ClientStore = None
    next_seq: int = 1
    outstanding: Command | None = None
    submitted_round: dict = field(default_factory=dict)
    injected_round: dict = field(default_factory=dict)
    acked_round: dict = field(default_factory=dict)

    def __post_init__(self):
        self.store = ClientStore(self.name)

    @property
    def done(self) -> bool:
        return self.outstanding is None and self.next_seq > self.total

    def issue(self, r: int):
        if self.outstanding is None and self.next_seq <= self.total and r >= self.start:
            cmd = Command(self.name, self.next_seq,
                          f"{self.name}/{self.next_seq}".encode())
            self.store.submitted(cmd)
            self.outstanding = cmd
            self.submitted_round[cmd.seq] = r
            self.next_seq += 1


def run_commit(n: int, rounds: int, seed: int, adversary_spec: StrategySpec,
               n_clients: int = 20, cmds_per_client: int = 10, stagger: int = 5,
               params: RuleParams = RuleParams(), age: AgeParams | None = None,
               sigma: int = 5, alpha: int = 1,
               verify_offsets: tuple = (), verify_servers: int = 5,
               mutations: int = 0, stop_when_done: bool = True) -> dict:
    """One seeded commitment trial.

    Returns per-command rounds (submitted/injected/committed/acked),
    round-by-round audit verdicts, certificate verification outcomes at
    the requested offsets after each ack, and mutation-fuzz counts.
    """
    streams = StreamFactory(seed)
    strategy = Strategy(adversary_spec, n, streams)
    proto = CommitProtocol(n, params, age, sigma)
    world = World(n, proto, strategy, streams, alpha=alpha)
    T = proto.age.T

    clients = [ClientAgent(f"c{j:02d}", cmds_per_client, 1 + j * stagger)
               for j in range(n_clients)]
    by_name = {c.name: c for c in clients}

    audits = {"digest": True, "monotone": True, "shrinkage": True, "commit_once": True}
    violations: list = []
    prev_obj: list = [None] * n
    prev_sig = [(0, GENESIS_DIGEST)] * n
    committed_round: dict[tuple, int] = {}     # (client, seq) -> first commit round
    position_registry: dict[int, bytes] = {}   # position -> leaf hash
    seen_events = 0
    prefix_sets: dict[bytes, frozenset] = {}
    verify_queue: dict[int, list] = {}          # round -> [(client, seq)]
    verify_results: list = []                   # (round, client, seq, sid, ok, reason)
    useful_series: list[int] = []
    last_round = rounds

    for r in range(1, rounds + 1):
        for cl in clients:
            cl.issue(r)
        targets: dict[str, int] = {}
        for cl in clients:
            if cl.outstanding is not None:
                rng = streams.client_stream(cl.name, r)
                tgt = int(rng.integers(1, n + 1))
                targets[cl.name] = tgt
                world.schedule_delivery(r, tgt, cl.outstanding)

        ev = world.run_round()
        blocked = ev["blocked"]

        for name, tgt in targets.items():
            cl = by_name[name]
            if not blocked[tgt - 1] and cl.outstanding is not None:
                cl.injected_round.setdefault(cl.outstanding.seq, r)

        for ack in ev["acks"]:
            cl = by_name.get(ack.client)
            if cl is None:
                continue
            cl.store.on_ack(ack.seq, ack.pos, ack.prev)
            if cl.outstanding is not None and ack.seq == cl.outstanding.seq:
                cl.acked_round[ack.seq] = r
                cl.outstanding = None
                for off in verify_offsets:
                    verify_queue.setdefault(r + off, []).append((ack.client, ack.seq))

        # ---- audits --------------------------------------------------
        for (er, cmds, base, new_state) in proto.commit_events[seen_events:]:
            for i, cmd in enumerate(cmds):
                pos = base + 1 + i
                lh = leaf_hash(cmd)
                prev = position_registry.get(pos)
                if prev is None:
                    position_registry[pos] = lh
                elif prev != lh:
                    audits["commit_once"] = False
                    violations.append({"kind": "commit-once", "round": er, "pos": pos})
                if cmd.client != DUMMY_CLIENT and not cmd.nullified:
                    committed_round.setdefault((cmd.client, cmd.seq), er)
        seen_events = len(proto.commit_events)

        groups: dict[int, tuple] = {}
        counts: dict[int, int] = {}
        for i, (log, shared) in enumerate(world.states):
            if log is None or blocked[i]:
                continue
            gid = id(shared)
            groups[gid] = (log, shared)
            counts[gid] = counts.get(gid, 0) + 1
        sigset = {(s.count, s.digest) for (_, s) in groups.values()}
        if len(sigset) > 1:
            audits["digest"] = False
            violations.append({"kind": "digest", "round": r,
                               "states": sorted((c, d.hex()[:12]) for c, d in sigset)})
        useful_series.append(sum(counts.values()))

        for i, (log, shared) in enumerate(world.states):
            if shared is prev_obj[i]:
                continue
            oc, od = prev_sig[i]
            if not shared.extends(oc, od):
                audits["monotone"] = False
                violations.append({"kind": "monotone", "round": r, "server": i + 1,
                                   "old": (oc, od.hex()[:12]),
                                   "new": (shared.count, shared.digest.hex()[:12])})
            prev_obj[i] = shared
            prev_sig[i] = (shared.count, shared.digest)

        pending = [(cl, seq) for cl in clients for seq in cl.injected_round
                   if (cl.name, seq) not in committed_round]
        if pending:
            lgroups: dict[tuple, tuple] = {}
            for i, (log, shared) in enumerate(world.states):
                if log is None or blocked[i]:
                    continue
                lgroups[(id(log), id(shared))] = (log, shared)
            # one okey-digest fold per distinct (log, state) pair covers
            # every pending command's virtual prefix in that pair
            folds: list[tuple[Log, list[bytes]]] = []
            for log, shared in lgroups.values():
                d = shared.okey_digest
                at: list[bytes] = []
                for e in log.entries:
                    d = okey_fold(d, e.cmd.okey)
                    at.append(d)
                folds.append((log, at))
            for cl, seq in pending:
                ok = cl.store.own.get(seq)
                if ok is None:
                    continue
                okey = ok.okey
                fps = set()
                everywhere = True
                for log, at in folds:
                    p = log.index().get(okey)
                    if p is None:
                        everywhere = False
                        break
                    fps.add(at[p])
                if not everywhere:
                    prefix_sets.pop(okey, None)
                    continue
                fset = frozenset(fps)
                prev = prefix_sets.get(okey)
                if prev is not None and not fset <= prev:
                    audits["shrinkage"] = False
                    violations.append({"kind": "shrinkage", "round": r,
                                       "command": ok.label()})
                prefix_sets[okey] = fset

        for (cname, seq) in verify_queue.pop(r, ()):
            cl = by_name[cname]
            pool = [i for i, (log, _s) in enumerate(world.states)
                    if log is not None and not blocked[i]]
            if not pool:
                verify_queue.setdefault(r + 1, []).append((cname, seq))
                continue
            vrng = streams.stream("verify", cname, str(seq), str(r))
            chosen = vrng.choice(len(pool), size=min(verify_servers, len(pool)),
                                 replace=False)
            cert = cl.store.build_certificate(seq)
            for ci in chosen:
                sid = pool[int(ci)]
                ok, reason = verify_certificate(world.states[sid][1].meta, cert)
                verify_results.append((r, cname, seq, sid + 1, ok, reason))

        if stop_when_done and all(cl.done for cl in clients) and not verify_queue \
                and not pending:
            last_round = r
            break

    # ---- mutation fuzz over the final metadata ----------------------
    mutation_rejects = 0
    mutation_accepts = 0
    if mutations:
        mrng = streams.stream("mutate")
        acked = [(cl, seq) for cl in clients for seq in cl.acked_round]
        metas = [s.meta for (log, s) in world.states if log is not None]
        if acked and metas:
            for _ in range(mutations):
                cl, seq = acked[int(mrng.integers(len(acked)))]
                buf = certificate_to_bytes(cl.store.build_certificate(seq))
                mut = flip_bit(buf, int(mrng.integers(len(buf) * 8)))
                meta = metas[int(mrng.integers(len(metas)))]
                try:
                    cert = certificate_from_bytes(mut)
                except ConfigError:
                    mutation_rejects += 1
                    continue
                ok, _reason = verify_certificate(meta, cert)
                if ok:
                    mutation_accepts += 1
                else:
                    mutation_rejects += 1

    commands = {}
    for cl in clients:
        for seq in cl.submitted_round:
            commands[f"{cl.name}/{seq}"] = {
                "submitted": cl.submitted_round.get(seq),
                "injected": cl.injected_round.get(seq),
                "committed": committed_round.get((cl.name, seq)),
                "acked": cl.acked_round.get(seq),
            }
    return {
        "n": n,
        "T": T,
        "rounds": last_round,
        "useful": useful_series,
        "commands": commands,
        "audits": audits,
        "violations": violations,
        "verify_results": verify_results,
        "verify_all_accept": all(v[4] for v in verify_results) if verify_results else None,
        "mutations": {"rejects": mutation_rejects, "accepts": mutation_accepts},
        "committed_total": len(position_registry),
        "all_done": all(cl.done for cl in clients),
    }
