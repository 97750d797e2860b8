"""One-shot acceptance suite: pinned configs, evaluators, verdicts.

Each criterion id maps to exactly one JSON file under configs/.  Most
criteria run seeded trial batteries through the regular runners; the
exact ones (A9-A11) evaluate rational arithmetic directly.  Identical
trial batteries are shared between criteria (A6/A7 reuse one set of
commitment trials), keyed by the config content, so the suite never
runs the same experiment twice.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from importlib import resources

import numpy as np

from . import analysis, certs
from .commit import AgeParams, run_commit
from .config import RunConfig, config_from_dict, expand_runs
from .errors import ConfigError
from .medianrules import (RuleParams, make_init, run_consensus,
                          selection_distribution_full,
                          selection_distribution_useful_only)
from .recovery import WindowParams, run_recovery
from .rng import StreamFactory
from .smrlog import Command, run_smr

FOREST_MAX_LEAVES = 4096   # incremental-vs-scratch equivalence bound


def config_path(name: str):
    return resources.files("median_smr").joinpath("configs").joinpath(name)


def load_criterion_config(cid: str) -> dict:
    with config_path(f"{cid.lower()}.json").open(encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Trial orchestration.


def _one_trial(cfg: RunConfig, index: int) -> dict:
    seed = cfg.seed + index
    inj = cfg.injection
    params = RuleParams(cfg.constants.k, cfg.constants.l)
    if cfg.protocol in ("median", "gossip", "priority"):
        init_spec = dict(inj.get("init", {"kind": "binary"}))
        kind = init_spec.pop("kind")
        if kind == "fraction-useful":
            init_spec = {"fraction": init_spec["fraction"]}
        init = make_init(cfg.n, kind, **init_spec)
        kw: dict = {}
        if cfg.protocol == "gossip":
            kw["gossip_target"] = inj.get("target", 2)
            kw["gossip_fallback"] = inj.get("fallback", 1)
        if inj.get("stop_on_agreement"):
            kw["stop_on_agreement"] = True
            kw["settle_rounds"] = inj.get("settle_rounds", 10)
        if inj.get("stop_on_extinction"):
            kw["stop_on_extinction"] = True
        return run_consensus(cfg.n, cfg.rounds, seed, init, cfg.adversary,
                             params=params, rule=cfg.protocol, **kw)
    if cfg.protocol == "smr":
        clients = inj.get("clients", 4)
        cmds = inj.get("cmds", 2)
        stagger = inj.get("stagger", 3)
        schedule: dict[int, list[Command]] = {}
        for j in range(clients):
            name = f"c{j:02d}"
            for s in range(1, cmds + 1):
                r = 1 + j * stagger + (s - 1) * stagger * max(clients, 1)
                schedule.setdefault(r, []).append(
                    Command(name, s, f"{name}/{s}".encode()))
        return run_smr(cfg.n, cfg.rounds, seed, cfg.adversary, schedule,
                       params=params, sigma=cfg.constants.sigma)
    if cfg.protocol == "commit":
        age = AgeParams.derived(cfg.n, c_t=cfg.constants.c_t, T=cfg.constants.T)
        return run_commit(
            cfg.n, cfg.rounds, seed, cfg.adversary,
            n_clients=inj.get("clients", 20), cmds_per_client=inj.get("cmds", 10),
            stagger=inj.get("stagger", 5), params=params, age=age,
            sigma=cfg.constants.sigma,
            verify_offsets=tuple(inj.get("verify_offsets", ())),
            verify_servers=inj.get("verify_servers", 5),
            mutations=inj.get("mutations", 0))
    if cfg.protocol == "recovery":
        window = WindowParams.derived(cfg.n, c_t=cfg.constants.c_t,
                                      T=cfg.constants.T)
        return run_recovery(
            cfg.n, cfg.rounds, seed, cfg.adversary,
            n_clients=inj.get("clients", 4), cmds_per_client=inj.get("cmds", 4),
            stagger=inj.get("stagger", 3),
            late_clients=inj.get("late_clients", 0),
            late_start=inj.get("late_start"), late_cmds=inj.get("late_cmds"),
            params=params, window=window, sigma=cfg.constants.sigma,
            eps=cfg.constants.eps,
            on_violation=inj.get("on_violation", "record"))
    raise ConfigError(f"no trial runner for protocol {cfg.protocol!r}")


def run_config_trials(cfg: RunConfig, threads: int = 1) -> list[dict]:
    """All trials of one config, merged in trial-id order."""
    if threads <= 1:
        return [_one_trial(cfg, i) for i in range(cfg.trials)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: _one_trial(cfg, i), range(cfg.trials)))


_battery_cache: dict[str, list[dict]] = {}


def _battery(cfg: RunConfig, threads: int) -> list[dict]:
    d = cfg.echo()
    d.pop("experiment")
    d.pop("out")
    key = json.dumps(d, sort_keys=True)
    if key not in _battery_cache:
        _battery_cache[key] = run_config_trials(cfg, threads)
    return _battery_cache[key]


# ---------------------------------------------------------------------------
# Verdicts.


@dataclass(frozen=True)
class AcceptanceVerdict:
    criterion: str
    passed: int
    total: int
    threshold: float
    detail: dict

    @property
    def ok(self) -> bool:
        return self.passed / self.total >= self.threshold

    def row(self) -> dict:
        return {"criterion": self.criterion, "passed": self.passed,
                "total": self.total, "threshold": self.threshold,
                "ok": self.ok, "detail": self.detail}


def _configs(cid: str, seed: int | None = None) -> list[RunConfig]:
    cfgs = [config_from_dict(d) for d in expand_runs(load_criterion_config(cid))]
    if seed is not None:
        cfgs = [replace(c, seed=seed) for c in cfgs]
    return cfgs


def _a1(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    (cfg,) = _configs("A1", seed)
    traces = _battery(cfg, threads)
    hits = sum(1 for t in traces
               if t["extinction_round"] is not None and t["extinction_round"] <= 30)
    return AcceptanceVerdict("A1", hits, cfg.trials, 0.95,
                             {"within_30": hits, "trials": cfg.trials})


def _a2(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    detail = {}
    sub_ok = 0
    cfgs = _configs("A2", seed)
    for cfg in cfgs:
        floor = 0.70 * cfg.n
        hits = sum(1 for t in _battery(cfg, threads)
                   if all(u >= floor for u in t["useful"][50:]))
        detail[cfg.adversary.name] = f"{hits}/{cfg.trials}"
        sub_ok += hits >= math.ceil(0.95 * cfg.trials)
    return AcceptanceVerdict("A2", sub_ok, len(cfgs), 1.0, detail)


def _a3(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    (cfg,) = _configs("A3", seed)
    traces = _battery(cfg, threads)
    hits = sum(1 for t in traces
               if t["extinction_round"] is not None and t["extinction_round"] <= 200)
    return AcceptanceVerdict("A3", hits, cfg.trials, 0.95,
                             {"blocked_set": cfg.adversary.size})


def _a4(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    (cfg,) = _configs("A4", seed)
    traces = _battery(cfg, threads)
    agree = sum(1 for t in traces
                if t["agreement_round"] is not None and t["agreement_round"] <= 300)
    valid = sum(1 for t in traces if t["audits"]["validity"])
    checks = (agree >= math.ceil(0.95 * cfg.trials)) + (valid == cfg.trials)
    return AcceptanceVerdict("A4", checks, 2, 1.0,
                             {"agreement": f"{agree}/{cfg.trials}",
                              "validity": f"{valid}/{cfg.trials}"})


def _a5(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    spread_cfg, single_cfg = _configs("A5", seed)
    spread = sum(1 for t in _battery(spread_cfg, threads)
                 if t["all_hold_target_round"] is not None
                 and t["all_hold_target_round"] <= 120)
    dichotomy = 0
    for t in _battery(single_cfg, threads):
        th, h = t["target_holders"][-1], t["holders"][-1]
        dichotomy += th == 0 or (h > 0 and th == h)
    checks = (spread >= math.ceil(0.95 * spread_cfg.trials)) + \
             (dichotomy >= math.ceil(0.95 * single_cfg.trials))
    return AcceptanceVerdict("A5", checks, 2, 1.0,
                             {"spread": f"{spread}/{spread_cfg.trials}",
                              "dichotomy": f"{dichotomy}/{single_cfg.trials}"})


def _commit_liveness_ok(trace: dict) -> bool:
    bound = 3 * trace["T"]
    for rec in trace["commands"].values():
        if rec["injected"] is None or rec["committed"] is None:
            return False
        if rec["committed"] - rec["injected"] > bound:
            return False
    return True


def _a6(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    (cfg,) = _configs("A6", seed)
    traces = _battery(cfg, threads)
    digest = sum(1 for t in traces if t["audits"]["digest"] and t["audits"]["monotone"]
                 and t["audits"]["commit_once"])
    live = sum(1 for t in traces if _commit_liveness_ok(t))
    shrink = sum(1 for t in traces if t["audits"]["shrinkage"])
    checks = (digest == cfg.trials) + (live >= math.ceil(0.95 * cfg.trials)) \
        + (shrink == cfg.trials)
    return AcceptanceVerdict("A6", checks, 3, 1.0,
                             {"digest": f"{digest}/{cfg.trials}",
                              "liveness_3T": f"{live}/{cfg.trials}",
                              "shrinkage": f"{shrink}/{cfg.trials}"})


def _forest_equivalence(max_leaves: int) -> bool:
    """Incremental forest vs a levels-table builder, all prefix lengths."""
    enc = [certs.leaf_hash(Command("fz", s, b"%d" % s))
           for s in range(1, max_leaves + 1)]
    levels = [list(enc)]
    while len(levels[-1]) > 1:
        prev = levels[-1]
        levels.append([certs.node_hash(prev[2 * i], prev[2 * i + 1])
                       for i in range(len(prev) // 2)])

    def scratch_roots(m: int):
        out, start = [], 0
        for h in range(m.bit_length() - 1, -1, -1):
            if m >> h & 1:
                out.append(certs.Root(h, start, levels[h][start >> h]))
                start += 1 << h
        return tuple(out)

    roots = ()
    for m in range(1, max_leaves + 1):
        roots, _ = certs.forest_append(roots, m - 1, enc[m - 1])
        if roots != scratch_roots(m):
            return False
    return True


def _a7(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    (cfg,) = _configs("A7", seed)
    traces = _battery(cfg, threads)
    accept = sum(1 for t in traces
                 if t["verify_results"] and t["verify_all_accept"])
    reject = sum(1 for t in traces
                 if t["mutations"]["accepts"] == 0 and t["mutations"]["rejects"] > 0)
    forest = _forest_equivalence(FOREST_MAX_LEAVES)
    checks = (accept == cfg.trials) + (reject == cfg.trials) + int(forest)
    return AcceptanceVerdict("A7", checks, 3, 1.0,
                             {"cert_accept": f"{accept}/{cfg.trials}",
                              "mutation_reject": f"{reject}/{cfg.trials}",
                              "forest_exact": forest})


def _a8(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    surge_cfg, part_cfg = _configs("A8", seed)
    T = WindowParams.derived(surge_cfg.n, c_t=surge_cfg.constants.c_t,
                             T=surge_cfg.constants.T).T
    surge_end = surge_cfg.adversary.phases[1].end
    resumed = probes = clean = 0
    for t in _battery(surge_cfg, threads):
        post = [r for r in t["commit_rounds"] if r > surge_end]
        resumed += bool(post) and min(post) <= surge_end + 3 * T
        probe_cmds = [v for k, v in t["commands"].items() if k.startswith("a")]
        probes += bool(probe_cmds) and all(
            v["injected"] is not None and v["committed"] is not None
            and v["committed"] - v["injected"] <= 3 * T for v in probe_cmds)
        clean += all(t["audits"].values())
    part_clean = sum(1 for t in _battery(part_cfg, threads)
                     if t["audits"]["monotone"] and t["audits"]["bot_closure"])
    n, pn = surge_cfg.trials, part_cfg.trials
    checks = (resumed == n) + (probes == n) + (clean == n) + (part_clean == pn)
    return AcceptanceVerdict("A8", checks, 4, 1.0,
                             {"resumed_3T": f"{resumed}/{n}",
                              "probe_3T": f"{probes}/{n}",
                              "audits": f"{clean}/{n}",
                              "partition_monotone": f"{part_clean}/{pn}"})


def _a9(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    spec = load_criterion_config("A9")
    step = Fraction(1, spec["step_denominator"])
    detail = {}
    checks = total = 0
    for scan in spec["scans"]:
        res = analysis.sign_scan(scan["curve"], scan["claim"],
                                 Fraction(scan["lo"]), Fraction(scan["hi"]), step)
        detail[scan["curve"]] = (f"{scan['claim']} on [{scan['lo']},{scan['hi']}]: "
                                 f"{len(res.violations)} violations / {res.points} pts")
        checks += res.ok
        total += 1
    for expr, want in spec["endpoint_checks"].items():
        x = Fraction(expr[2:-1])
        got = analysis.eval_curve("f", x)
        detail[expr] = f"= {got} (want {want})"
        checks += got == Fraction(want)
        total += 1
    return AcceptanceVerdict("A9", checks, total, 1.0, detail)


def _a10(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    spec = load_criterion_config("A10")
    n, k, l = spec["n"], spec["k"], spec["l"]
    checks = 0
    detail = {}
    for values in spec["value_sets"]:
        full = selection_distribution_full(values, n, k=k, l=l)
        useful = selection_distribution_useful_only(values, l=l)
        same = full == useful
        detail[str(values)] = "equal" if same else f"full={full} useful={useful}"
        checks += same
    return AcceptanceVerdict("A10", checks, len(spec["value_sets"]), 1.0, detail)


def _a11(threads: int, seed: int | None = None) -> AcceptanceVerdict:
    spec = load_criterion_config("A11")
    sums_ok = all(
        sum(analysis.gravity(i, nt) for i in range(1, nt + 1)) == 1
        for nt in range(1, spec["sum_max_nt"] + 1))
    argmax_ok = all(analysis.gravity_argmax(nt) == math.ceil(nt / 2)
                    for nt in range(1, spec["argmax_max_nt"] + 1))
    nt, samples = spec["empirical_nt"], spec["samples"]
    rng = StreamFactory(seed if seed is not None else spec["seed"]).stream("gravity-samples")
    draws = rng.integers(1, nt + 1, size=(samples, 3))
    med = np.sort(draws, axis=1)[:, 1]
    counts = np.bincount(med, minlength=nt + 1)[1:]
    worst = 0.0
    for i in range(1, nt + 1):
        p = float(analysis.gravity(i, nt))
        sigma = math.sqrt(p * (1 - p) * samples)
        worst = max(worst, abs(float(counts[i - 1]) - p * samples) / sigma)
    emp_ok = worst <= spec["sigma_bound"]
    checks = sums_ok + argmax_ok + emp_ok
    return AcceptanceVerdict("A11", checks, 3, 1.0,
                             {"sum_to_one": sums_ok, "argmax": argmax_ok,
                              "empirical_worst_sigma": round(worst, 3)})


CRITERIA = {"A1": _a1, "A2": _a2, "A3": _a3, "A4": _a4, "A5": _a5, "A6": _a6,
            "A7": _a7, "A8": _a8, "A9": _a9, "A10": _a10, "A11": _a11}

SUITES = {
    "curves": ["A9"],
    "consensus": ["A1", "A2", "A3", "A4", "A10", "A11"],
    "gossip": ["A5"],
    "smr": ["A6"],
    "commit": ["A6", "A7"],
    "certs": ["A7"],
    "recovery": ["A8"],
    "all": ["A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "A9", "A10", "A11"],
}


def run_criterion(cid: str, threads: int = 1,
                  seed: int | None = None) -> AcceptanceVerdict:
    if cid not in CRITERIA:
        raise ConfigError(f"unknown criterion {cid!r}")
    return CRITERIA[cid](threads, seed)


def run_suite(suite: str, threads: int = 1,
              seed: int | None = None) -> list[AcceptanceVerdict]:
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; one of {sorted(SUITES)}")
    return [run_criterion(cid, threads, seed) for cid in SUITES[suite]]
