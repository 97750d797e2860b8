"""Window-structured recovery: checkpoints, reset consensus, rollback.

Time is cut into windows of T rounds.  Inside a window servers run the
extended median rule on logs but never commit; alongside the log pulls
they gossip a reset flag R (no-reset beats reset; fewer than l replies
means R becomes undecided) and a checkpoint C = (S, P, W) where a larger
window number W wins.  A server that sees a newer checkpoint adopts it
wholesale: shared state, pre-committed prefix as its log, and the
checkpoint itself.

At each boundary every server, independently and deterministically:
rolls back to its own checkpoint if R = reset; then, if it holds a log,
commits the checkpoint's prefix onto the shared state, strips it from
the log (appending a dummy command if that empties it), takes the new
checkpoint (S', aged prefix, W+1) and sets R := no-reset; a server
without a log sets R := reset, arming a rollback for the next boundary.

The net effect: blocked-out servers first converge on reset, then
jointly roll back to the newest surviving checkpoint, which restarts the
pipeline at most a few windows after a surge ends.  Commitment is
monotone throughout because the shared state only ever moves at
boundaries, in lockstep with the checkpoint it came from.

An undecided server (R = bot) answers nothing; R = bot implies L = bot
every round, which the runner asserts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .adversary import Strategy, StrategySpec
from .commit import Ack, ClientAgent, SharedState, dummy_command
from .errors import ConfigError, MonotonicityViolation
from .medianrules import RuleParams
from .rng import StreamFactory
from .simcore import World
from .smrlog import Entry, Log, LogCache, initial_log, merge_logs

RESET = 0
NO_RESET = 1   # priority: no-reset beats reset; None stands for bot


class Checkpoint(NamedTuple):
    shared: SharedState
    prefix: tuple | None    # tuple of Entry; None = never took one (genesis)
    window: int

    def signature(self) -> tuple:
        pfx = None if self.prefix is None else tuple(
            (e.cmd.okey, e.cmd.nullified, e.birth) for e in self.prefix)
        return (self.window, self.shared.count, self.shared.digest, pfx)


@dataclass(frozen=True)
class WindowParams:
    """Window length and the spreading budgets it must dominate."""
    T: int
    T_B: int   # broadcast
    T_D: int   # reset-consensus decision
    T_P: int   # checkpoint propagation
    T_M: int   # merge settling
    T_E: int   # epidemic catch-up slack

    def __post_init__(self):
        if min(self.T, self.T_B, self.T_D, self.T_P, self.T_M, self.T_E) < 1:
            raise ConfigError("window budgets must be positive")
        if not (self.T > self.T_B + self.T_D and self.T >= self.T_P + self.T_D):
            raise ConfigError(
                f"need T > T_B+T_D and T >= T_P+T_D; got T={self.T}, "
                f"T_B={self.T_B}, T_D={self.T_D}, T_P={self.T_P}")

    @classmethod
    def derived(cls, n: int, c_t: float = 6.0, T: int | None = None) -> "WindowParams":
        b = math.ceil(c_t * math.log2(n))
        return cls(T if T is not None else 3 * b + 1, b, b, b, b, b)


class RecoveryProtocol:
    """Engine protocol; per-server state is (log, shared, R, checkpoint)."""

    def __init__(self, n: int, params: RuleParams = RuleParams(),
                 window: WindowParams | None = None, sigma: int = 5):
        self.n = n
        self.k = params.k
        self.l = params.l
        self.window = window if window is not None else WindowParams.derived(n)
        self.fanout = math.ceil(sigma * math.log2(n))
        self.cache = LogCache()
        self._states: dict = {}
        genesis = self._canon_state(SharedState.genesis())
        self._init = (self.cache.canon(initial_log()), genesis, NO_RESET,
                      Checkpoint(genesis, None, 0))
        self.commit_events: list = []
        self.boundary_log: list = []    # one record per boundary (audit material)

    def _canon_state(self, state: SharedState) -> SharedState:
        got = self._states.get(state)
        if got is None:
            self._states[state] = state
            return state
        return got

    def initial_state(self, sid: int):
        return self._init

    def holder_mask(self, states):
        return np.fromiter((s[0] is not None for s in states), dtype=bool,
                           count=len(states))

    def serialize(self, state):
        log, shared, reset, cp = state
        return {"count": shared.count, "digest": shared.digest.hex()[:16],
                "R": {None: "bot", RESET: "reset", NO_RESET: "no-reset"}[reset],
                "W": cp.window,
                "log": None if log is None else
                [[e.cmd.label(), e.birth, e.cmd.nullified] for e in log.entries]}

    def on_deliver(self, state, sid, msgs, r, rng, n):
        log, shared, reset, cp = state
        pushes, acks = [], []
        if log is None:
            return pushes, acks
        for cmd in msgs:
            have = shared.sn.get(cmd.client, 0)
            if cmd.seq == have + 1 and cmd.okey not in log.keyset:
                for t in rng.integers(1, n + 1, size=self.fanout):
                    pushes.append((int(t), Entry(cmd, r)))
            elif cmd.seq == have and have > 0:
                older, newer = shared.meta.pairs[cmd.client]
                prev = None if older is None else (older.seq, older.pos, older.chain)
                acks.append(Ack(cmd.client, newer.seq, newer.pos, prev))
        return pushes, acks

    def round_answers(self, states, blocked, r):
        return [None if blocked[i] or states[i][2] is None else states[i]
                for i in range(len(states))]

    def step(self, st, sid, replies, pushes, r):
        log, shared, reset, cp = st
        if len(replies) < self.l:
            if log is None and reset is None:
                return st
            return (None, shared, None, cp)
        if pushes:
            parts = self._compute(replies, shared, cp, pushes)
        else:
            memo = self.cache.memo_for(r)
            key = (id(shared), id(cp),
                   *(x for t in replies for x in (id(t[0]), t[2], id(t[3]))))
            hit = memo.get(key)
            if hit is None:
                parts = self._compute(replies, shared, cp, ())
                memo[key] = (replies, shared, cp, parts)
            else:
                parts = hit[3]
        if (parts[0] is log and parts[1] is shared
                and parts[2] == reset and parts[3] is cp):
            return st
        return parts

    def _compute(self, replies, shared, cp, pushes):
        reset2 = NO_RESET if any(t[2] == NO_RESET for t in replies) else RESET
        best = None
        for t in replies:
            if best is None or t[3].window > best.window:
                best = t[3]
        log_replies = [t[0] for t in replies if t[0] is not None]
        if len(log_replies) >= self.l:
            merged = self.cache.nullified(
                self.cache.canon(merge_logs(log_replies[: self.l], pushes)))
        else:
            merged = None
        shared2, cp2 = shared, cp
        if best.window > cp.window:
            cp2 = best
            shared2 = cp2.shared
            merged = (self.cache.canon(Log(cp2.prefix)) if cp2.prefix else None)
        return (merged, shared2, reset2, cp2)

    # -- boundary ---------------------------------------------------------

    def end_round(self, states, r):
        if r % self.window.T:
            return None
        w = r // self.window.T
        pre_resets = sum(1 for s in states if s[2] == RESET)
        pre_noresets = sum(1 for s in states if s[2] == NO_RESET)
        max_w_before = max(s[3].window for s in states)
        memo: dict = {}
        created: dict = {}
        causal = True
        for i, st in enumerate(states):
            key = (id(st[0]), id(st[1]), st[2], id(st[3]))
            hit = memo.get(key)
            if hit is None:
                hit = self._boundary_one(st, r)
                memo[key] = hit
            new_st = hit
            if new_st[3] is not st[3]:
                sig = new_st[3].signature()
                created.setdefault(sig, 0)
                created[sig] += 1
                if st[3].window != max_w_before:
                    causal = False
            states[i] = new_st
        rec = {"window": w, "round": r, "resets": pre_resets,
               "noresets": pre_noresets, "mixed": pre_resets > 0 and pre_noresets > 0,
               "max_w_before": max_w_before, "created": created, "causal": causal}
        self.boundary_log.append(rec)
        return rec

    def _boundary_one(self, st, r):
        log, shared, reset, cp = st
        if reset == RESET:
            shared = cp.shared
            work = None if cp.prefix is None else list(cp.prefix)
        else:
            work = None if log is None else list(log.entries)
        if work is None:
            return (None, shared, RESET, cp)
        pcmds = [] if cp.prefix is None else [e.cmd for e in cp.prefix]
        shared2 = self._canon_state(shared.apply(pcmds)) if pcmds else shared
        if pcmds:
            self.commit_events.append((r, pcmds, shared.count, shared2))
        pk = {e.cmd.okey for e in (cp.prefix or ())}
        rest = [e for e in work if e.cmd.okey not in pk] if pk else work
        if not rest:
            rest = [Entry(dummy_command(shared2), r)]
        T = self.window.T
        aged = 0
        for e in rest:
            if r - e.birth >= T:
                aged += 1
            else:
                break
        cp2 = Checkpoint(shared2, tuple(rest[:aged]), cp.window + 1)
        log2 = self.cache.canon(Log(tuple(rest)))
        return (log2, shared2, NO_RESET, cp2)


def classify_window(r_counts, l_counts, window: int, params: WindowParams,
                    n: int, eps: float = 0.02) -> dict:
    """good/happy verdicts from the per-round R/L population counts."""
    T = params.T
    lo = (window - 1) * T
    span_r = r_counts[lo: lo + T - params.T_D]
    span_l = l_counts[lo: lo + T - params.T_D]
    thr = (1.0 / 3.0 - eps) * n
    good = len(span_r) == T - params.T_D and all(c > thr for c in span_r)
    happy = len(span_l) == T - params.T_D and all(c > thr for c in span_l)
    return {"window": window, "good": good, "happy": happy}


def run_recovery(n: int, rounds: int, seed: int, adversary_spec: StrategySpec,
                 n_clients: int = 4, cmds_per_client: int = 4, stagger: int = 3,
                 late_clients: int = 0, late_start: int | None = None,
                 late_cmds: int | None = None,
                 params: RuleParams = RuleParams(),
                 window: WindowParams | None = None, sigma: int = 5,
                 alpha: int = 1, eps: float = 0.02,
                 on_violation: str = "record") -> dict:
    """One seeded recovery trial with the full audit battery.

    `late_clients` start at `late_start` (for probing post-surge
    liveness).  Monotonicity violations either abort with a forensic
    dump (`on_violation="raise"`) or are recorded in the report.
    """
    streams = StreamFactory(seed)
    strategy = Strategy(adversary_spec, n, streams)
    proto = RecoveryProtocol(n, params, window, sigma)
    world = World(n, proto, strategy, streams, alpha=alpha)
    T = proto.window.T

    clients = [ClientAgent(f"c{j:02d}", cmds_per_client, 1 + j * stagger)
               for j in range(n_clients)]
    if late_clients:
        if late_start is None:
            raise ConfigError("late_clients need late_start")
        # probe clients sort before the steady ones ("a" < "c"), so a
        # young steady command can never sit ahead of an aged probe in
        # the log and push its boundary commit out by a window
        clients += [ClientAgent(f"a{j:02d}",
                                cmds_per_client if late_cmds is None else late_cmds,
                                late_start + j * stagger)
                    for j in range(late_clients)]
    by_name = {c.name: c for c in clients}

    audits = {"monotone": True, "bot_closure": True, "mutual_exclusion": True,
              "cp_unique": True, "cp_causal": True}
    violations: list = []
    prev_obj: list = [None] * n
    prev_sig = [(0, SharedState.genesis().digest)] * n
    committed_round: dict[tuple, int] = {}
    seen_events = 0
    cp_registry: dict[int, tuple] = {}
    r_counts: list[int] = []
    l_counts: list[int] = []
    useful_series: list[int] = []
    commit_rounds: list[int] = []

    for r in range(1, rounds + 1):
        for cl in clients:
            cl.issue(r)
        targets: dict[str, tuple[int, bool]] = {}
        for cl in clients:
            if cl.outstanding is not None:
                rng = streams.client_stream(cl.name, r)
                tgt = int(rng.integers(1, n + 1))
                targets[cl.name] = (tgt, world.states[tgt - 1][0] is not None)
                world.schedule_delivery(r, tgt, cl.outstanding)

        ev = world.run_round()
        blocked = ev["blocked"]

        for name, (tgt, held) in targets.items():
            cl = by_name[name]
            # counts as injected once a log-holding server could fan it
            # out; an undecided receiver drops the request silently
            if held and not blocked[tgt - 1] and cl.outstanding is not None:
                cl.injected_round.setdefault(cl.outstanding.seq, r)

        for ack in ev["acks"]:
            cl = by_name.get(ack.client)
            if cl is None:
                continue
            cl.store.on_ack(ack.seq, ack.pos, ack.prev)
            if cl.outstanding is not None and ack.seq == cl.outstanding.seq:
                cl.acked_round[ack.seq] = r
                cl.outstanding = None

        for (er, cmds, base, new_state) in proto.commit_events[seen_events:]:
            commit_rounds.append(er)
            for cmd in cmds:
                if not cmd.nullified and cmd.client in by_name:
                    committed_round.setdefault((cmd.client, cmd.seq), er)
        seen_events = len(proto.commit_events)

        nr = 0
        nl = 0
        for i, st in enumerate(world.states):
            log, shared, reset, cp = st
            if reset is not None:
                nr += 1
            if log is not None:
                nl += 1
                if reset is None:
                    audits["bot_closure"] = False
                    violations.append({"kind": "bot-closure", "round": r, "server": i + 1})
            if shared is not prev_obj[i]:
                oc, od = prev_sig[i]
                if not shared.extends(oc, od):
                    audits["monotone"] = False
                    dump = {"kind": "monotone", "round": r, "server": i + 1,
                            "old": (oc, od.hex()), "R": reset, "W": cp.window,
                            "new": (shared.count, shared.digest.hex())}
                    violations.append(dump)
                    if on_violation == "raise":
                        raise MonotonicityViolation(
                            f"server {i+1} round {r}: committed history rewound", dump)
                prev_obj[i] = shared
                prev_sig[i] = (shared.count, shared.digest)
        r_counts.append(nr)
        l_counts.append(nl)
        useful_series.append(
            int(sum(1 for i, st in enumerate(world.states)
                    if st[0] is not None and not blocked[i])))

        b = ev.get("boundary")
        if b:
            if b["mixed"]:
                audits["mutual_exclusion"] = False
                violations.append({"kind": "mixed-boundary", "round": r,
                                   "resets": b["resets"], "noresets": b["noresets"]})
            if not b["causal"]:
                audits["cp_causal"] = False
                violations.append({"kind": "cp-causality", "round": r})
            for sig in b["created"]:
                w_created = sig[0]
                have = cp_registry.get(w_created)
                if have is None:
                    cp_registry[w_created] = sig
                elif have != sig:
                    audits["cp_unique"] = False
                    violations.append({"kind": "cp-uniqueness", "round": r,
                                       "window": w_created})

    windows = [classify_window(r_counts, l_counts, w, proto.window, n, eps)
               for w in range(1, len(r_counts) // T + 1)]

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
        "rounds": rounds,
        "useful": useful_series,
        "r_counts": r_counts,
        "l_counts": l_counts,
        "windows": windows,
        "commands": commands,
        "commit_rounds": commit_rounds,
        "audits": audits,
        "violations": violations,
        "boundaries": proto.boundary_log,
        "max_window": max((s[3].window for s in world.states), default=0),
    }
