"""Deterministic synchronous round engine.

Each round proceeds in lockstep for all servers:

  1. the adversary picks the blocked set from a *lagged* snapshot (it is
     always handed the world as of `alpha` rounds ago, never the current
     one, so lateness is enforced structurally);
  2. pending client deliveries arrive; deliveries to blocked servers are
     lost; receiving servers may emit push messages (append fan-out) and
     client acknowledgements;
  3. every non-blocked server sends k pull requests to uniform random
     servers (with replacement, self allowed) and the targets answer from
     their round-start state, so within a round all exchanges see the
     same world;
  4. every server applies its protocol step to the replies it received.
     Blocked servers send nothing, receive nothing, and step on an empty
     inbox, which forces them to the undecided state.

All randomness is pre-drawn from counter-based streams keyed by
(seed, round, purpose), so a run is a pure function of its seed: two runs
with the same seed produce byte-identical snapshot archives.

Replies handed to the protocol step are pre-shuffled into a uniformly
random order (one iid priority per request slot); taking the first l of
them is therefore a uniformly random l-subset of the received replies,
which is how the protocol steps implement subset sampling without
consuming randomness themselves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import StreamFactory


@dataclass(frozen=True)
class WorldSnapshot:
    """State of the world at the beginning of a round.

    holders[i] is True when server i+1 holds a decided value / non-empty
    log at the start of the round.  blocked_prev is the blocked set of
    the previous round (all False for round 1).  states is a tuple of
    opaque per-server protocol states; injections lists the client
    deliveries scheduled for this round.
    """

    round: int
    holders: np.ndarray
    blocked_prev: np.ndarray
    states: tuple
    injections: tuple = ()

    def useful_prev(self) -> np.ndarray:
        """Holder mask combined with the previous blocked set.

        Note this is *not* by itself the useful set of any round; the
        adversary combines holder information with its own memory of its
        past decisions to reconstruct usefulness.
        """
        return self.holders & ~self.blocked_prev


def draw_targets(rng: np.random.Generator, n: int, k: int) -> list[int]:
    """k uniform server ids in 1..n, independent, with replacement."""
    return [int(t) for t in rng.integers(1, n + 1, size=k)]


def snapshot_for_adversary(world: "World", r: int, alpha: int | None = None) -> WorldSnapshot:
    """Archived snapshot of round r-alpha, clamped to the initial one."""
    a = world.alpha if alpha is None else alpha
    idx = max(1, r - a)
    return world.snapshots[idx - 1]


class World:
    """Mutable world wired to a protocol, an adversary, and a seed."""

    def __init__(self, n: int, protocol, adversary, streams: StreamFactory,
                 alpha: int = 1, archive=None):
        self.n = n
        self.protocol = protocol
        self.adversary = adversary
        self.streams = streams
        self.alpha = alpha
        self.round = 1
        self.states: list = [protocol.initial_state(sid) for sid in range(1, n + 1)]
        self.deliveries: dict[int, list[tuple[int, object]]] = {}
        self.snapshots: list[WorldSnapshot] = []
        self.blocked_history: list[np.ndarray] = []
        self.useful_history: list[int] = []
        self._archive = archive
        self._push_snapshot()

    # -- bookkeeping ---------------------------------------------------

    def schedule_delivery(self, round_no: int, sid: int, msg) -> None:
        """Queue a client message for delivery at the start of round_no."""
        self.deliveries.setdefault(round_no, []).append((sid, msg))

    def _holder_mask(self) -> np.ndarray:
        return self.protocol.holder_mask(self.states)

    def _push_snapshot(self) -> None:
        prev = self.blocked_history[-1] if self.blocked_history else np.zeros(self.n, dtype=bool)
        snap = WorldSnapshot(
            round=self.round,
            holders=self._holder_mask(),
            blocked_prev=prev,
            states=tuple(self.states),
            injections=tuple(self.deliveries.get(self.round, ())),
        )
        self.snapshots.append(snap)
        if self._archive is not None:
            self._archive.write(json.dumps({
                "round": snap.round,
                "holders": [int(i) + 1 for i in np.flatnonzero(snap.holders)],
                "blocked_prev": [int(i) + 1 for i in np.flatnonzero(snap.blocked_prev)],
                "states": [self.protocol.serialize(s) for s in self.states],
            }, sort_keys=True) + "\n")

    # -- the round -----------------------------------------------------

    def run_round(self) -> dict:
        r = self.round
        n = self.n
        proto = self.protocol

        lagged = snapshot_for_adversary(self, r)
        blocked = self.adversary.choose_blocked(lagged)
        self.blocked_history.append(blocked)
        self.useful_history.append(int(np.count_nonzero(self.snapshots[-1].holders & ~blocked)))

        # Phase 2: client deliveries and fan-out pushes.
        pushes: list[list] = [[] for _ in range(n + 1)]
        acks: list = []
        lost: list = []
        events: dict = {"round": r, "blocked": blocked}
        todays = self.deliveries.pop(r, ())
        if todays:
            fan_rng = self.streams.round_stream(r, "fanout")
            per_server: dict[int, list] = {}
            for sid, msg in todays:
                per_server.setdefault(sid, []).append(msg)
            for sid in sorted(per_server):
                if blocked[sid - 1]:
                    lost.extend((sid, m) for m in per_server[sid])
                    continue
                out_pushes, out_acks = proto.on_deliver(
                    self.states[sid - 1], sid, per_server[sid], r, fan_rng, n)
                for tgt, payload in out_pushes:
                    if not blocked[tgt - 1]:
                        pushes[tgt].append(payload)
                acks.extend(out_acks)
        events["acks"] = acks
        events["lost_deliveries"] = lost

        # Phase 3: pull requests, answered from round-start states.
        k = proto.k
        targets = self.streams.round_stream(r, "targets").integers(0, n, size=(n, k))
        priorities = self.streams.round_stream(r, "subsets").random((n, k))
        answers = proto.round_answers(self.states, blocked, r)

        # Phase 4: transitions.  Replies are pre-shuffled by per-slot
        # priorities (stable argsort, ties by slot), so a protocol that
        # consumes the first l gets a uniform l-subset.
        answered = np.fromiter((a is not None for a in answers), dtype=bool, count=n)
        valid = answered[targets].tolist()
        order = np.argsort(priorities, axis=1, kind="stable").tolist()
        rows = targets.tolist()
        blocked_list = blocked.tolist()

        new_states = list(self.states)
        states = self.states
        for i in range(n):
            if blocked_list[i]:
                new_states[i] = proto.step(states[i], i + 1, (), (), r)
                continue
            row = rows[i]
            row_v = valid[i]
            replies = tuple(answers[row[j]] for j in order[i] if row_v[j])
            p = pushes[i + 1]
            new_states[i] = proto.step(states[i], i + 1, replies, tuple(p) if p else (), r)
        self.states = new_states

        boundary = getattr(proto, "end_round", None)
        if boundary is not None:
            events["boundary"] = boundary(self.states, r)

        self.round = r + 1
        self._push_snapshot()
        return events

    def run(self, rounds: int, on_round: Callable[[dict], None] | None = None) -> None:
        for _ in range(rounds):
            ev = self.run_round()
            if on_round is not None:
                on_round(ev)


def run_round(world: World) -> World:
    """Single-step convenience wrapper; mutates and returns the world."""
    world.run_round()
    return world


def read_archive(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
