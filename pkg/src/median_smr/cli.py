"""Command-line front end: run experiments, write artifacts, accept.

    median-smr consensus --n 1024 --init fraction-useful=0.30 \
        --adversary none --trials 100
    median-smr commit --config my-commit.json --out results
    median-smr curves --step 0.0001
    median-smr accept --suite all --seed 7
    median-smr replay out/a4-consensus/404

Every run writes out/<experiment>/<seed>/ containing metrics.csv,
summary.json and config.echo.json; reruns with the same config and seed
reproduce those files byte for byte (which is what `replay` checks).
The MEDIAN_SMR_OUT environment variable overrides --out.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

from . import acceptance, analysis
from .config import RunConfig, config_from_dict, load_config
from .errors import ConfigError, MedianSmrError

SUMMARY_SCHEMA = 1


# ---------------------------------------------------------------------------
# Artifact writing.


def _outdir(cfg: RunConfig, cli_out: str | None) -> Path:
    base = os.environ.get("MEDIAN_SMR_OUT") or cli_out or cfg.out or "out"
    return Path(base) / cfg.experiment / str(cfg.seed)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _metrics_rows(cfg: RunConfig, traces: list[dict]) -> tuple[list[str], list[list]]:
    if cfg.protocol in ("median", "gossip", "priority"):
        cols = ["trial", "round", "useful", "holders", "distinct"]
        gossip = cfg.protocol == "gossip"
        if gossip:
            cols.append("target_holders")
        rows = []
        for i, t in enumerate(traces):
            for r in range(t["rounds"]):
                row = [i, r + 1, t["useful"][r], t["holders"][r], t["distinct"][r]]
                if gossip:
                    row.append(t["target_holders"][r])
                rows.append(row)
        return cols, rows
    if cfg.protocol == "smr":
        cols = ["trial", "command", "injected", "broadcast", "stable"]
        rows = [[i, label, rec["injected"], rec["broadcast"], rec["stable"]]
                for i, t in enumerate(traces)
                for label, rec in sorted(t["commands"].items())]
        return cols, rows
    if cfg.protocol == "commit":
        cols = ["trial", "command", "submitted", "injected", "committed", "acked"]
        rows = [[i, label, rec["submitted"], rec["injected"],
                 rec["committed"], rec["acked"]]
                for i, t in enumerate(traces)
                for label, rec in sorted(t["commands"].items())]
        return cols, rows
    if cfg.protocol == "recovery":
        cols = ["trial", "window", "good", "happy"]
        rows = [[i, w["window"], int(w["good"]), int(w["happy"])]
                for i, t in enumerate(traces) for w in t["windows"]]
        return cols, rows
    raise ConfigError(f"no metrics layout for protocol {cfg.protocol!r}")


def _trial_summary(cfg: RunConfig, t: dict) -> dict:
    if cfg.protocol in ("median", "gossip", "priority"):
        out = {"rounds": t["rounds"], "agreement_round": t["agreement_round"],
               "agreed_value": t["agreed_value"],
               "extinction_round": t["extinction_round"], "audits": t["audits"]}
        if cfg.protocol == "gossip":
            out["all_hold_target_round"] = t["all_hold_target_round"]
        return out
    if cfg.protocol == "smr":
        return {"rounds": t["rounds"], "audits": t["audits"]}
    if cfg.protocol == "commit":
        return {"rounds": t["rounds"], "T": t["T"], "audits": t["audits"],
                "committed_total": t["committed_total"], "all_done": t["all_done"],
                "verify_all_accept": t["verify_all_accept"],
                "mutations": t["mutations"], "violations": len(t["violations"])}
    if cfg.protocol == "recovery":
        return {"rounds": t["rounds"], "T": t["T"], "audits": t["audits"],
                "max_window": t["max_window"],
                "commit_rounds": t["commit_rounds"],
                "violations": len(t["violations"])}
    raise ConfigError(f"no summary layout for protocol {cfg.protocol!r}")


def _violations(cfg: RunConfig, traces: list[dict]) -> list[dict]:
    bad = []
    for i, t in enumerate(traces):
        audits = t.get("audits", {})
        failed = sorted(k for k, v in audits.items() if not v)
        if failed:
            bad.append({"trial": i, "audits": failed,
                        "events": t.get("violations", [])})
    return bad


def run(cfg: RunConfig, cli_out: str | None = None, threads: int = 1) -> int:
    """Execute one config, write its artifact directory, return exit code."""
    traces = acceptance.run_config_trials(cfg, threads)
    outdir = _outdir(cfg, cli_out)
    outdir.mkdir(parents=True, exist_ok=True)

    cols, rows = _metrics_rows(cfg, traces)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows(rows)
    (outdir / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8")

    violations = _violations(cfg, traces)
    summary = {
        "schema": SUMMARY_SCHEMA,
        "experiment": cfg.experiment,
        "protocol": cfg.protocol,
        "n": cfg.n,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "trial_summaries": [_trial_summary(cfg, t) for t in traces],
        "audit_violations": len(violations),
    }
    _dump_json(outdir / "summary.json", summary)
    _dump_json(outdir / "config.echo.json", cfg.echo())

    if violations:
        dump = outdir / "forensics.json"
        _dump_json(dump, violations)
        print(f"{cfg.experiment}: {len(violations)} trial(s) failed audits; "
              f"forensic dump at {dump}", file=sys.stderr)
        return 1
    print(f"{cfg.experiment}: {cfg.trials} trial(s) ok -> {outdir}")
    return 0


# ---------------------------------------------------------------------------
# Subcommands.


_INIT_SHORTHAND = {"fraction-useful": "fraction", "plant": "copies",
                   "unanimous": "value"}


def _parse_init(text: str) -> dict:
    kind, _, val = text.partition("=")
    init: dict = {"kind": kind}
    if val:
        field = _INIT_SHORTHAND.get(kind)
        if field is None:
            raise ConfigError(f"init kind {kind!r} takes no value")
        init[field] = float(val) if kind == "fraction-useful" else int(val)
    return init


def _config_from_args(args, protocol: str) -> list[RunConfig]:
    if args.config:
        cfgs = load_config(args.config)
        out = []
        for cfg in cfgs:
            d = cfg.echo()
            if args.seed is not None:
                d["seed"] = args.seed
            if args.trials is not None:
                d["trials"] = args.trials
            out.append(config_from_dict(d))
        return out
    d: dict = {
        "experiment": args.experiment or protocol,
        "n": args.n,
        "seed": args.seed if args.seed is not None else 1,
        "trials": args.trials if args.trials is not None else 1,
        "rounds": args.rounds,
        "protocol": protocol,
        "adversary": {"name": args.adversary},
        "injection": {},
    }
    if args.adversary in ("uniform-random", "sticky", "target-useful",
                          "permanent-set"):
        d["adversary"]["beta"] = args.beta
    if protocol in ("median", "gossip", "priority") and args.init:
        d["injection"]["init"] = _parse_init(args.init)
    return [config_from_dict(d)]


def _cmd_run(args, protocol: str) -> int:
    code = 0
    for cfg in _config_from_args(args, protocol):
        code = max(code, run(cfg, args.out, args.threads))
    return code


def _cmd_curves(args) -> int:
    step = Fraction(args.step).limit_denominator(10**9)
    outdir = Path(os.environ.get("MEDIAN_SMR_OUT") or args.out or "out")
    outdir = outdir / "curves" / str(step.denominator)
    outdir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["curve", "x", "value"])
    x = Fraction(0)
    while x <= 1:
        for name in ("f", "g", "g_avail", "g_block"):
            w.writerow([name, str(x), str(analysis.eval_curve(name, x))])
        x += step
    (outdir / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8")
    scans = [
        analysis.sign_scan("g", "<=0", 0, 1, step),
        analysis.sign_scan("g_avail", ">=0", Fraction(1, 2), Fraction(3, 4), step),
        analysis.sign_scan("g_block", "<=0", 0, 1, step),
    ]
    summary = {
        "schema": SUMMARY_SCHEMA,
        "experiment": "curves",
        "step": str(step),
        "scans": [{"curve": s.curve, "claim": s.claim, "points": s.points,
                   "violations": len(s.violations), "ok": s.ok} for s in scans],
    }
    _dump_json(outdir / "summary.json", summary)
    _dump_json(outdir / "config.echo.json", {"step": str(step)})
    ok = all(s.ok for s in scans)
    print(f"curves: {'ok' if ok else 'SIGN VIOLATIONS'} -> {outdir}")
    return 0 if ok else 1


def _cmd_accept(args) -> int:
    verdicts = acceptance.run_suite(args.suite, threads=args.threads,
                                    seed=args.seed)
    for v in verdicts:
        print(json.dumps(v.row(), sort_keys=True))
    ok = all(v.ok for v in verdicts)
    print(json.dumps({"suite": args.suite, "criteria": len(verdicts), "ok": ok},
                     sort_keys=True))
    return 0 if ok else 1


def _cmd_replay(args) -> int:
    outdir = Path(args.dir)
    echo = json.loads((outdir / "config.echo.json").read_text(encoding="utf-8"))
    cfg = config_from_dict(echo)
    trace = acceptance.run_config_trials(
        RunConfig(**{**cfg.__dict__, "trials": 1}), 1)[0]
    cols, rows = _metrics_rows(cfg, [trace])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows(rows)
    stored = (outdir / "metrics.csv").read_text(encoding="utf-8")
    stored_trial0 = "".join(
        line + "\n" for i, line in enumerate(stored.splitlines())
        if i == 0 or line.partition(",")[0] == "0")
    same = buf.getvalue() == stored_trial0
    print(f"replay {cfg.experiment}/{cfg.seed}: trial 0 "
          f"{'matches' if same else 'DIVERGES from'} stored metrics")
    return 0 if same else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="median-smr",
                                description="gossip-based replication testbed")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, rounds_default):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--experiment", help="experiment name override")
        sp.add_argument("--n", type=int, default=1024)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--trials", type=int, default=None)
        sp.add_argument("--rounds", type=int, default=rounds_default)
        sp.add_argument("--adversary", default="none",
                        choices=["none", "uniform-random", "sticky",
                                 "target-useful", "permanent-set", "partition"])
        sp.add_argument("--beta", type=float, default=0.1)
        sp.add_argument("--out", help="output directory (MEDIAN_SMR_OUT wins)")
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("consensus", help="value-level median dynamics")
    common(sp, 300)
    sp.add_argument("--init", default="binary",
                    help="initial values, e.g. binary | fraction-useful=0.3"
                         " | plant=60")
    sp.set_defaults(fn=lambda a: _cmd_run(a, "median"))

    sp = sub.add_parser("smr", help="replicated logs, no commitment")
    common(sp, 200)
    sp.set_defaults(fn=lambda a: _cmd_run(a, "smr"))

    sp = sub.add_parser("commit", help="replicated logs with commitment")
    common(sp, 3000)
    sp.set_defaults(fn=lambda a: _cmd_run(a, "commit"))

    sp = sub.add_parser("recover", help="windowed checkpoint recovery")
    common(sp, 3260)
    sp.set_defaults(fn=lambda a: _cmd_run(a, "recovery"))

    sp = sub.add_parser("curves", help="drift-curve data files and sign scans")
    sp.add_argument("--step", default="0.0001")
    sp.add_argument("--out")
    sp.set_defaults(fn=_cmd_curves)

    sp = sub.add_parser("accept", help="acceptance suite")
    sp.add_argument("--suite", default="all", choices=sorted(acceptance.SUITES))
    sp.add_argument("--seed", type=int, default=None,
                    help="override the pinned per-criterion seeds")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(fn=_cmd_accept)

    sp = sub.add_parser("replay", help="re-run trial 0 of a stored artifact"
                                       " directory and compare")
    sp.add_argument("dir")
    sp.set_defaults(fn=_cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MedianSmrError as e:
        print(f"error: {e}", file=sys.stderr)
        if getattr(e, "dump", None):
            print(json.dumps(e.dump, sort_keys=True, default=str),
                  file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
