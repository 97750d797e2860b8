"""Run configuration: strict schema, no silently ignored keys.

A config is one JSON object.  Everything the trial runners accept is
reachable from here, and nothing else is: unknown keys anywhere in the
tree are errors, as are missing required ones.  `runs` lets one file
describe a small family of related runs (e.g. the same experiment under
two adversaries) as overrides applied to the base object.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .adversary import StrategySpec, spec_from_dict
from .errors import ConfigError

PROTOCOLS = ("median", "gossip", "priority", "smr", "commit", "recovery")

_TOP_KEYS = {"experiment", "n", "seed", "trials", "rounds", "protocol",
             "adversary", "constants", "injection", "out", "runs"}
_CONST_KEYS = {"k", "l", "sigma", "c_t", "eps", "T"}
_INJECTION_KEYS = {
    "median": {"init", "stop_on_agreement", "settle_rounds", "stop_on_extinction"},
    "gossip": {"init", "target", "fallback"},
    "priority": {"init"},
    "smr": {"clients", "cmds", "stagger"},
    "commit": {"clients", "cmds", "stagger", "verify_offsets", "verify_servers",
               "mutations"},
    "recovery": {"clients", "cmds", "stagger", "late_clients", "late_start",
                 "late_cmds", "on_violation"},
}
_INIT_KEYS = {
    "unanimous": {"kind", "value"},
    "binary": {"kind"},
    "fraction-useful": {"kind", "fraction"},
    "plant": {"kind", "copies", "target", "fallback"},
    "keys": {"kind", "keys"},
}


@dataclass(frozen=True)
class Constants:
    k: int = 6
    l: int = 3
    sigma: int = 5
    c_t: float = 6.0
    eps: float = 0.02
    T: int | None = None

    def __post_init__(self):
        if self.k < 1 or not 1 <= self.l <= self.k:
            raise ConfigError(f"need 1 <= l <= k, got k={self.k} l={self.l}")
        if self.sigma < 1:
            raise ConfigError(f"sigma must be >= 1, got {self.sigma}")
        if self.c_t <= 0:
            raise ConfigError(f"c_t must be positive, got {self.c_t}")
        if not 0 <= self.eps < 1 / 3:
            raise ConfigError(f"eps must lie in [0, 1/3), got {self.eps}")
        if self.T is not None and self.T < 3:
            raise ConfigError(f"T must be >= 3, got {self.T}")


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    n: int
    seed: int
    trials: int
    rounds: int
    protocol: str
    adversary: StrategySpec
    constants: Constants = Constants()
    injection: dict = field(default_factory=dict)
    out: str | None = None

    def __post_init__(self):
        if not self.experiment or "/" in self.experiment:
            raise ConfigError(f"bad experiment name {self.experiment!r}")
        if self.n < 4:
            raise ConfigError(f"n must be >= 4, got {self.n}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")

    def echo(self) -> dict:
        d = asdict(self)
        d["adversary"] = _spec_dict(self.adversary)
        return d


def _spec_dict(spec: StrategySpec) -> dict:
    d = {"name": spec.name}
    if spec.name in ("uniform-random", "sticky", "target-useful", "permanent-set"):
        d["beta"] = spec.beta
    if spec.name == "sticky":
        d["hold"] = spec.hold
    if spec.name == "permanent-set":
        d["size"] = spec.size
    if spec.name == "surge-schedule":
        d["phases"] = [{"from_round": p.start, "to_round": p.end, "beta": p.beta}
                       for p in spec.phases]
    if spec.name == "partition":
        d["split"] = spec.split
        d["period"] = spec.period
    return d


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    bad = set(d) - allowed
    if bad:
        raise ConfigError(f"unknown keys {sorted(bad)} in {where}")


def _validate_injection(protocol: str, inj: dict) -> dict:
    if not isinstance(inj, dict):
        raise ConfigError("injection must be an object")
    _reject_unknown(inj, _INJECTION_KEYS[protocol], f"{protocol} injection")
    init = inj.get("init")
    if init is not None:
        if not isinstance(init, dict) or "kind" not in init:
            raise ConfigError("init must be an object with a 'kind'")
        kind = init["kind"]
        if kind not in _INIT_KEYS:
            raise ConfigError(f"unknown init kind {kind!r}")
        _reject_unknown(init, _INIT_KEYS[kind], f"init kind {kind!r}")
    for key in ("clients", "cmds", "stagger", "late_clients", "late_start",
                "late_cmds", "verify_servers", "mutations", "target", "fallback",
                "settle_rounds"):
        if key in inj and (not isinstance(inj[key], int) or inj[key] < 0):
            raise ConfigError(f"injection.{key} must be a nonnegative integer")
    if "verify_offsets" in inj:
        offs = inj["verify_offsets"]
        if (not isinstance(offs, list)
                or any(not isinstance(x, int) or x < 0 for x in offs)):
            raise ConfigError("injection.verify_offsets must be a list of"
                              " nonnegative integers")
    if "on_violation" in inj and inj["on_violation"] not in ("record", "raise"):
        raise ConfigError("injection.on_violation must be 'record' or 'raise'")
    return dict(inj)


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(d, _TOP_KEYS - {"runs"}, "config")
    for key in ("experiment", "n", "seed", "trials", "rounds", "protocol",
                "adversary"):
        if key not in d:
            raise ConfigError(f"config is missing required key {key!r}")
    const_d = d.get("constants", {})
    if not isinstance(const_d, dict):
        raise ConfigError("constants must be an object")
    _reject_unknown(const_d, _CONST_KEYS, "constants")
    constants = Constants(**const_d)
    protocol = d["protocol"]
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    injection = _validate_injection(protocol, d.get("injection", {}))
    return RunConfig(
        experiment=str(d["experiment"]),
        n=int(d["n"]),
        seed=int(d["seed"]),
        trials=int(d["trials"]),
        rounds=int(d["rounds"]),
        protocol=protocol,
        adversary=spec_from_dict(d["adversary"]),
        constants=constants,
        injection=injection,
        out=d.get("out"),
    )


def expand_runs(d: dict) -> list[dict]:
    """Split a config with a `runs` list into concrete config dicts.

    Each entry overrides top-level keys of the base; `injection` and
    `adversary` are replaced wholesale, not merged.  A config without
    `runs` expands to itself.
    """
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    runs = d.get("runs")
    if runs is None:
        return [dict(d)]
    if not isinstance(runs, list) or not runs:
        raise ConfigError("runs must be a non-empty list")
    base = {k: v for k, v in d.items() if k != "runs"}
    out = []
    for i, ov in enumerate(runs):
        if not isinstance(ov, dict):
            raise ConfigError("each run override must be an object")
        _reject_unknown(ov, _TOP_KEYS - {"runs"}, f"runs[{i}]")
        merged = dict(base)
        merged.update(ov)
        out.append(merged)
    return out


def load_config(path) -> list[RunConfig]:
    """Read one JSON file into its (possibly several) validated configs."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return [config_from_dict(x) for x in expand_runs(raw)]
