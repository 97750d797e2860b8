"""Blocking adversary strategies.

A strategy decides at the start of each round which servers are blocked
for that round.  It is only ever handed the snapshot of round r - alpha
by the engine; combined with its own past decisions and its own random
stream this realizes the late adversary: nothing it does can depend on
the current round's state or randomness.

Bounded strategies never block more than floor(beta * n) servers.  The
surge schedule may use beta = 1 inside a phase, and the partition
strategy blocks one whole side at a time (that is how severing all
cross-partition communication is realized in a fully-connected gossip
world: the isolated side neither sends nor receives).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import StreamFactory
from .simcore import WorldSnapshot

STRATEGY_NAMES = (
    "none",
    "uniform-random",
    "sticky",
    "target-useful",
    "permanent-set",
    "surge-schedule",
    "partition",
)


@dataclass(frozen=True)
class Phase:
    start: int
    end: int
    beta: float


@dataclass(frozen=True)
class StrategySpec:
    name: str
    beta: float = 0.0
    size: int | None = None
    hold: int = 1
    phases: tuple[Phase, ...] = ()
    split: float = 0.5
    period: int = 1

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown adversary strategy {self.name!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0,1], got {self.beta}")
        if self.hold < 1:
            raise ConfigError(f"hold must be >= 1, got {self.hold}")
        if self.period < 1:
            raise ConfigError(f"period must be >= 1, got {self.period}")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must lie strictly in (0,1), got {self.split}")
        if self.size is not None and self.size < 0:
            raise ConfigError(f"size must be >= 0, got {self.size}")
        prev_end = 0
        for ph in self.phases:
            if ph.start < 1 or ph.end < ph.start:
                raise ConfigError(f"bad phase bounds {ph}")
            if ph.start <= prev_end:
                raise ConfigError(f"overlapping surge phases at round {ph.start}")
            if not 0.0 <= ph.beta <= 1.0:
                raise ConfigError(f"phase beta must lie in [0,1], got {ph.beta}")
            prev_end = ph.end


_ALLOWED_KEYS = {
    "none": set(),
    "uniform-random": {"beta"},
    "sticky": {"beta", "hold"},
    "target-useful": {"beta"},
    "permanent-set": {"beta", "size"},
    "surge-schedule": {"phases"},
    "partition": {"split", "period"},
}


def spec_from_dict(d: dict) -> StrategySpec:
    if not isinstance(d, dict) or "name" not in d:
        raise ConfigError(f"adversary spec must be an object with a 'name': {d!r}")
    name = d["name"]
    if name not in _ALLOWED_KEYS:
        raise ConfigError(f"unknown adversary strategy {name!r}")
    extra = set(d) - {"name"} - _ALLOWED_KEYS[name]
    if extra:
        raise ConfigError(f"unknown keys for adversary {name!r}: {sorted(extra)}")
    kwargs: dict = {}
    for key in _ALLOWED_KEYS[name]:
        if key in d:
            if key == "phases":
                phases = []
                for ph in d["phases"]:
                    bad = set(ph) - {"from_round", "to_round", "beta"}
                    if bad:
                        raise ConfigError(f"unknown phase keys {sorted(bad)}")
                    phases.append(Phase(int(ph["from_round"]), int(ph["to_round"]),
                                        float(ph["beta"])))
                kwargs["phases"] = tuple(phases)
            else:
                kwargs[key] = d[key]
    return StrategySpec(name=name, **kwargs)


class Strategy:
    """Stateful wrapper; the engine calls choose_blocked once per round."""

    def __init__(self, spec: StrategySpec, n: int, streams: StreamFactory):
        self.spec = spec
        self.n = n
        self.streams = streams
        self.decisions: list[np.ndarray] = []
        if spec.size is not None and spec.size > n:
            raise ConfigError(f"permanent set size {spec.size} exceeds n={n}")
        self._last_useful = np.zeros(n, dtype=np.int64)

    @property
    def round(self) -> int:
        return len(self.decisions) + 1

    def budget(self) -> int:
        return int(self.spec.beta * self.n)

    def choose_blocked(self, snapshot: WorldSnapshot) -> np.ndarray:
        mask = self._choose(snapshot, self.round)
        self.decisions.append(mask)
        return mask

    # -- per-strategy decisions ---------------------------------------

    def _choose(self, snap: WorldSnapshot, r: int) -> np.ndarray:
        name = self.spec.name
        n = self.n
        if name == "none":
            return np.zeros(n, dtype=bool)
        if name == "uniform-random":
            return self._uniform(self.budget(), r)
        if name == "sticky":
            if (r - 1) % self.spec.hold == 0 or not self.decisions:
                return self._uniform(self.budget(), r)
            return self.decisions[-1]
        if name == "target-useful":
            return self._target_useful(snap)
        if name == "permanent-set":
            size = self.spec.size if self.spec.size is not None else self.budget()
            mask = np.zeros(n, dtype=bool)
            mask[:size] = True
            return mask
        if name == "surge-schedule":
            for ph in self.spec.phases:
                if ph.start <= r <= ph.end:
                    return self._uniform(int(ph.beta * n), r)
            return np.zeros(n, dtype=bool)
        if name == "partition":
            side_a = int(self.spec.split * n)
            epoch = (r - 1) // self.spec.period
            mask = np.zeros(n, dtype=bool)
            if epoch % 2 == 0:
                mask[:side_a] = True
            else:
                mask[side_a:] = True
            return mask
        raise ConfigError(f"unknown adversary strategy {name!r}")

    def _uniform(self, budget: int, r: int) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        if budget >= self.n:
            mask[:] = True
            return mask
        if budget > 0:
            rng = self.streams.adversary_stream(r)
            picks = rng.choice(self.n, size=budget, replace=False)
            mask[picks] = True
        return mask

    def _target_useful(self, snap: WorldSnapshot) -> np.ndarray:
        # Reconstruct usefulness of the snapshot round from the holder
        # mask and this strategy's own decision for that round, then rank
        # by recency of usefulness with server id as tie break.
        n = self.n
        if snap.round - 1 < len(self.decisions):
            blocked_then = self.decisions[snap.round - 1]
        else:
            blocked_then = np.zeros(n, dtype=bool)
        useful_then = snap.holders & ~blocked_then
        self._last_useful[useful_then] = snap.round
        budget = self.budget()
        mask = np.zeros(n, dtype=bool)
        if budget > 0:
            order = np.lexsort((np.arange(n), -self._last_useful))
            mask[order[:budget]] = True
        return mask


def choose_blocked(spec: StrategySpec, snapshot: WorldSnapshot, n: int,
                   streams: StreamFactory) -> np.ndarray:
    """One-shot functional form for the memoryless strategies."""
    return Strategy(spec, n, streams)._choose(snapshot, snapshot.round)
