"""End-to-end CLI runs against temp dirs: artifacts, replay, exit codes."""

import json

import pytest

from median_smr.cli import _outdir, _parse_init, main
from median_smr.config import config_from_dict
from median_smr.errors import ConfigError


def run_cli(monkeypatch, tmp, argv):
    monkeypatch.setenv("MEDIAN_SMR_OUT", str(tmp))
    return main(argv)


def test_parse_init_shorthand():
    assert _parse_init("binary") == {"kind": "binary"}
    assert _parse_init("fraction-useful=0.3") == {"kind": "fraction-useful",
                                                  "fraction": 0.3}
    assert _parse_init("plant=60") == {"kind": "plant", "copies": 60}
    assert _parse_init("unanimous=5") == {"kind": "unanimous", "value": 5}
    with pytest.raises(ConfigError):
        _parse_init("binary=1")


def test_outdir_precedence(monkeypatch):
    cfg = config_from_dict({"experiment": "e", "n": 16, "seed": 7, "trials": 1,
                            "rounds": 5, "protocol": "median",
                            "adversary": {"name": "none"}, "out": "cfgout"})
    monkeypatch.delenv("MEDIAN_SMR_OUT", raising=False)
    assert str(_outdir(cfg, "cliout")) == "cliout/e/7"
    assert str(_outdir(cfg, None)) == "cfgout/e/7"
    monkeypatch.setenv("MEDIAN_SMR_OUT", "envout")
    assert str(_outdir(cfg, "cliout")) == "envout/e/7"


def test_consensus_run_writes_artifacts(monkeypatch, tmp_path):
    argv = ["consensus", "--n", "16", "--rounds", "30", "--seed", "4",
            "--trials", "2", "--init", "binary"]
    assert run_cli(monkeypatch, tmp_path / "a", argv) == 0
    d = tmp_path / "a" / "median" / "4"
    metrics = (d / "metrics.csv").read_text()
    assert metrics.splitlines()[0] == "trial,round,useful,holders,distinct"
    summary = json.loads((d / "summary.json").read_text())
    assert summary["trials"] == 2 and summary["audit_violations"] == 0
    assert len(summary["trial_summaries"]) == 2
    echo = json.loads((d / "config.echo.json").read_text())
    assert config_from_dict(echo).seed == 4

    # same config, fresh directory: byte-identical artifacts
    assert run_cli(monkeypatch, tmp_path / "b", argv) == 0
    d2 = tmp_path / "b" / "median" / "4"
    for name in ("metrics.csv", "summary.json", "config.echo.json"):
        assert (d / name).read_bytes() == (d2 / name).read_bytes()


def test_replay_detects_divergence(monkeypatch, tmp_path):
    argv = ["smr", "--n", "16", "--rounds", "40", "--seed", "2"]
    assert run_cli(monkeypatch, tmp_path, argv) == 0
    d = tmp_path / "smr" / "2"
    assert run_cli(monkeypatch, tmp_path, ["replay", str(d)]) == 0

    lines = (d / "metrics.csv").read_text().splitlines()
    assert lines[1].startswith("0,")
    tail = lines[1][-1]
    lines[1] = lines[1][:-1] + ("7" if tail != "7" else "8")
    (d / "metrics.csv").write_text("\n".join(lines) + "\n")
    assert run_cli(monkeypatch, tmp_path, ["replay", str(d)]) == 1


def test_config_file_with_runs(monkeypatch, tmp_path):
    cfgfile = tmp_path / "fam.json"
    cfgfile.write_text(json.dumps({
        "experiment": "fam", "n": 16, "seed": 1, "trials": 1, "rounds": 20,
        "protocol": "median", "adversary": {"name": "none"},
        "injection": {"init": {"kind": "binary"}},
        "runs": [{"seed": 1}, {"seed": 2, "adversary":
                 {"name": "uniform-random", "beta": 0.1}}],
    }))
    assert run_cli(monkeypatch, tmp_path / "o",
                   ["consensus", "--config", str(cfgfile)]) == 0
    assert (tmp_path / "o" / "fam" / "1" / "metrics.csv").exists()
    assert (tmp_path / "o" / "fam" / "2" / "metrics.csv").exists()
    adv2 = json.loads((tmp_path / "o" / "fam" / "2" / "config.echo.json")
                      .read_text())["adversary"]
    assert adv2["name"] == "uniform-random"


def test_config_errors_exit_2(monkeypatch, tmp_path, capsys):
    code = run_cli(monkeypatch, tmp_path,
                   ["consensus", "--n", "16", "--rounds", "5",
                    "--adversary", "uniform-random", "--beta", "1.5"])
    assert code == 2
    assert "error:" in capsys.readouterr().err

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment": "x", "bogus": 1}))
    assert run_cli(monkeypatch, tmp_path,
                   ["consensus", "--config", str(bad)]) == 2


def test_curves_artifacts(monkeypatch, tmp_path):
    assert run_cli(monkeypatch, tmp_path, ["curves", "--step", "1e-2"]) == 0
    d = tmp_path / "curves" / "100"
    rows = (d / "metrics.csv").read_text().splitlines()
    assert rows[0] == "curve,x,value" and len(rows) == 1 + 4 * 101
    summary = json.loads((d / "summary.json").read_text())
    assert [s["ok"] for s in summary["scans"]] == [True, True, True]
    assert summary["step"] == "1/100"


def test_accept_curves_suite(monkeypatch, tmp_path, capsys):
    assert run_cli(monkeypatch, tmp_path, ["accept", "--suite", "curves"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    tail = json.loads(lines[-1])
    assert tail["ok"] is True and tail["criteria"] == len(lines) - 1
    assert all(json.loads(x)["ok"] for x in lines[:-1])
