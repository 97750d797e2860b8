"""Windowed recovery: checkpoints, reset consensus, rollback, revival."""

import pytest

from median_smr.adversary import Phase, StrategySpec
from median_smr.commit import SharedState
from median_smr.errors import ConfigError
from median_smr.medianrules import RuleParams
from median_smr.recovery import (NO_RESET, RESET, Checkpoint, RecoveryProtocol,
                                 WindowParams, classify_window, run_recovery)
from median_smr.smrlog import DUMMY_CLIENT, Command, Entry, Log

WP = WindowParams(10, 4, 4, 4, 4, 4)


def mk_proto(n=8):
    return RecoveryProtocol(n, RuleParams(), WP, sigma=1)


def C(client, seq, payload=b""):
    return Command(client, seq, payload)


def small_window(n=32):
    # T = 31 at n = 32: boundaries come fast enough for short runs
    return WindowParams.derived(n, c_t=2.0)


def test_window_params():
    assert WindowParams.derived(512) == WindowParams(163, 54, 54, 54, 54, 54)
    assert WindowParams.derived(32, c_t=2.0) == WindowParams(31, 10, 10, 10, 10, 10)
    assert WindowParams.derived(64, c_t=1.0, T=25).T == 25
    with pytest.raises(ConfigError):
        WindowParams(10, 5, 5, 4, 4, 4)      # T must exceed T_B + T_D
    with pytest.raises(ConfigError):
        WindowParams(10, 4, 4, 7, 4, 4)      # T must cover T_P + T_D
    with pytest.raises(ConfigError):
        WindowParams(10, 4, 4, 4, 0, 4)
    with pytest.raises(ConfigError):
        WindowParams.derived(64, T=25)       # override still checked against budgets


def test_checkpoint_signature():
    sh = SharedState.genesis()
    e = Entry(C("a", 1), 3)
    assert Checkpoint(sh, (e,), 2).signature() == Checkpoint(sh, (e,), 2).signature()
    assert Checkpoint(sh, (e,), 2).signature() != Checkpoint(sh, (Entry(e.cmd, 4),), 2).signature()
    assert Checkpoint(sh, None, 0).signature() != Checkpoint(sh, (), 0).signature()


def test_reset_flag_union():
    # no-reset beats reset; unanimity returns the state object itself
    proto = mk_proto()
    log0, sh, _, cp0 = proto.initial_state(0)
    r_st = (log0, sh, RESET, cp0)
    n_st = (log0, sh, NO_RESET, cp0)
    assert proto.step(r_st, 1, (r_st, n_st, r_st), (), 3)[2] == NO_RESET
    out = proto.step(n_st, 1, (r_st, r_st, r_st), (), 4)
    assert out[2] == RESET
    assert out[0] is log0 and out[1] is sh and out[3] is cp0
    assert proto.step(n_st, 1, (n_st, n_st, n_st), (), 5) is n_st


def test_starvation_wipes_log_and_flag():
    proto = mk_proto()
    log0, sh, _, cp0 = proto.initial_state(0)
    st = (log0, sh, NO_RESET, cp0)
    bot = proto.step(st, 1, (st,), (), 6)    # one reply < l
    assert bot == (None, sh, None, cp0)
    assert bot[1] is sh and bot[3] is cp0
    assert proto.step(bot, 1, (), (), 7) is bot


def test_newer_checkpoint_is_adopted_wholesale():
    proto = mk_proto()
    log0, shg, _, cp0 = proto.initial_state(0)
    ent = Entry(C("p", 1, b"x"), 2)
    sh5 = shg.apply([C("q", 1)])
    cp5 = Checkpoint(sh5, (ent,), 5)
    own = (log0, shg, NO_RESET, cp0)
    donor = (log0, sh5, NO_RESET, cp5)
    out = proto.step(own, 1, (donor, own, own), (), 4)
    assert out[3] is cp5 and out[1] is sh5
    assert out[2] == NO_RESET
    assert list(out[0].entries) == [ent]     # log replaced by the adopted prefix
    # an empty adopted prefix leaves the server undecided on the log side
    cp4 = Checkpoint(sh5, (), 4)
    out2 = proto.step(own, 1, ((log0, sh5, NO_RESET, cp4), own, own), (), 5)
    assert out2[0] is None and out2[3] is cp4 and out2[1] is sh5


def test_boundary_only_fires_on_window_multiples():
    proto = mk_proto()
    states = [proto.initial_state(0)]
    before = states[0]
    assert proto.end_round(states, 7) is None
    assert states[0] is before


def test_boundary_commits_prefix_and_advances_checkpoint():
    proto = mk_proto()
    sh = SharedState.genesis()
    c1, c2, c3 = C("w", 1), C("w", 2), C("w", 3)
    e1, e2, e3 = Entry(c1, 0), Entry(c2, 0), Entry(c3, 5)
    states = [(proto.cache.canon(Log((e1, e2, e3))), sh, NO_RESET,
               Checkpoint(sh, (e1,), 3))]
    rec = proto.end_round(states, 10)
    log2, sh2, r2, cp2 = states[0]
    assert r2 == NO_RESET
    assert sh2.count == 1 and sh2.extends(0, sh.digest)
    assert [e.cmd for e in log2.entries] == [c2, c3]   # prefix stripped, log kept
    assert cp2.window == 4 and cp2.prefix == (e2,) and cp2.shared is sh2
    assert proto.commit_events == [(10, [c1], 0, sh2)]
    assert rec["created"] and rec["causal"] and not rec["mixed"]


def test_young_head_blocks_aged_tail():
    proto = mk_proto()
    sh = SharedState.genesis()
    young = Entry(C("a", 1), 9)
    aged = Entry(C("b", 1), 0)
    states = [(proto.cache.canon(Log((young, aged))), sh, NO_RESET,
               Checkpoint(sh, (), 1))]
    proto.end_round(states, 10)
    log2, _, _, cp2 = states[0]
    assert cp2.window == 2 and cp2.prefix == ()
    assert list(log2.entries) == [young, aged]
    assert proto.commit_events == []


def test_aged_run_at_head_enters_prefix():
    proto = mk_proto()
    sh = SharedState.genesis()
    o1, o2 = Entry(C("a", 1), 0), Entry(C("a", 2), 0)
    fresh = Entry(C("a", 3), 8)
    states = [(proto.cache.canon(Log((o1, o2, fresh))), sh, NO_RESET,
               Checkpoint(sh, (), 1))]
    proto.end_round(states, 10)
    log2, _, _, cp2 = states[0]
    assert cp2.prefix == (o1, o2)
    assert list(log2.entries) == [o1, o2, fresh]


def test_logless_server_arms_reset():
    proto = mk_proto()
    _, shg, _, cp0 = proto.initial_state(0)
    states = [(None, shg, NO_RESET, cp0), (None, shg, None, cp0)]
    rec = proto.end_round(states, 10)
    assert states[0] == (None, shg, RESET, cp0) and states[0][3] is cp0
    assert states[1][2] == RESET
    assert rec["created"] == {}


def test_reset_rolls_back_then_recommits():
    # rollback discards the working log, re-derives from the checkpoint,
    # and the freed server rejoins with a dummy-seeded log
    proto = mk_proto()
    sh = SharedState.genesis()
    kept = Entry(C("w", 1), 0)
    junk = Entry(C("z", 9), 1)
    states = [(proto.cache.canon(Log((junk,))), sh, RESET,
               Checkpoint(sh, (kept,), 2))]
    proto.end_round(states, 10)
    log2, sh2, r2, cp2 = states[0]
    assert r2 == NO_RESET and sh2.count == 1
    assert [e.cmd.client for e in log2.entries] == [DUMMY_CLIENT]
    assert log2.entries[0].birth == 10
    assert cp2 == Checkpoint(sh2, (), 3)
    assert proto.commit_events == [(10, [kept.cmd], 0, sh2)]


def test_genesis_rollback_is_terminal():
    proto = mk_proto()
    _, shg, _, cp0 = proto.initial_state(0)
    assert cp0.prefix is None
    states = [(None, shg, RESET, cp0)]
    rec = proto.end_round(states, 20)
    assert states[0] == (None, shg, RESET, cp0) and states[0][3] is cp0
    assert rec["created"] == {} and proto.commit_events == []


def test_empty_prefix_rollback_revives():
    proto = mk_proto()
    _, shg, _, _ = proto.initial_state(0)
    states = [(None, shg, RESET, Checkpoint(shg, (), 4))]
    proto.end_round(states, 10)
    log2, sh2, r2, cp2 = states[0]
    assert r2 == NO_RESET and sh2 is shg
    assert [e.cmd.client for e in log2.entries] == [DUMMY_CLIENT]
    assert cp2 == Checkpoint(shg, (), 5)


def test_boundary_record_flags_mixed_and_stale():
    proto = mk_proto()
    log0, shg, _, cp0 = proto.initial_state(0)
    rec = proto.end_round([(log0, shg, RESET, cp0), (log0, shg, NO_RESET, cp0)], 10)
    assert rec["mixed"] and rec["resets"] == 1 and rec["noresets"] == 1

    proto2 = mk_proto()
    log0, shg, _, cp0 = proto2.initial_state(0)
    rec2 = proto2.end_round(
        [(log0, shg, NO_RESET, cp0), (None, shg, None, Checkpoint(shg, (), 2))], 10)
    assert rec2["max_w_before"] == 2
    assert not rec2["causal"]    # creator advanced from window 0, not the max


def test_classify_window():
    n, span = 30, WP.T - WP.T_D          # threshold (1/3 - eps) * 30 = 9.4
    r = [10] * span + [0] * WP.T_D       # decision-tail dip is out of scope
    l = [10] * WP.T
    assert classify_window(r, l, 1, WP, n) == {"window": 1, "good": True, "happy": True}
    dip = [10] * 3 + [9] + [10] * (WP.T - 4)
    assert classify_window(dip, l, 1, WP, n)["good"] is False
    assert classify_window(r[:4], l[:4], 1, WP, n) == \
        {"window": 1, "good": False, "happy": False}
    two = classify_window([0] * WP.T + [10] * WP.T, [10] * 2 * WP.T, 2, WP, n)
    assert two == {"window": 2, "good": True, "happy": True}


def test_late_clients_need_a_start_round():
    with pytest.raises(ConfigError):
        run_recovery(32, 10, 1, StrategySpec("none"), late_clients=1,
                     window=small_window())


def test_benign_run_commits_within_three_windows():
    rep = run_recovery(32, 310, 11, StrategySpec("none"), n_clients=3,
                       cmds_per_client=3, stagger=3, window=small_window())
    T = rep["T"]
    assert T == 31
    assert rep["violations"] == [] and all(rep["audits"].values())
    assert all(w["good"] and w["happy"] for w in rep["windows"])
    assert rep["max_window"] == 10
    assert all(r % T == 0 for r in rep["commit_rounds"])
    for rec in rep["boundaries"]:
        assert not rec["mixed"] and rec["causal"]
        assert len(rec["created"]) == 1 and sum(rec["created"].values()) == 32
    assert len(rep["commands"]) == 9
    for c in rep["commands"].values():
        assert c["committed"] is not None and c["acked"] is not None
        assert c["committed"] - c["injected"] <= 3 * T - 1
        assert c["acked"] > c["committed"]


def test_surge_wipe_recovers_through_reset_flood():
    # near-total surge in window 2 kills every log; window 3 is the
    # reset flood (good, not happy); rollback revives the pipeline and
    # the stalled clients eventually land their retried commands
    spec = StrategySpec("surge-schedule", phases=(Phase(32, 45, 0.97),))
    rep = run_recovery(32, 310, 23, spec, n_clients=2, cmds_per_client=2,
                       stagger=3, late_clients=1, late_start=100, late_cmds=1,
                       window=small_window())
    assert rep["violations"] == [] and all(rep["audits"].values())
    assert rep["l_counts"][35] == 0          # mid-surge: no live logs anywhere
    w = rep["windows"]
    assert w[0]["good"] and w[0]["happy"]
    assert not w[1]["good"] and not w[1]["happy"]
    assert w[2]["good"] and not w[2]["happy"]
    assert all(x["good"] and x["happy"] for x in w[3:])
    assert rep["boundaries"][1]["created"] == {}    # dead boundary mints nothing
    assert rep["max_window"] == 9
    assert len(rep["commands"]) == 5
    for c in rep["commands"].values():
        assert c["committed"] is not None and c["acked"] is not None


def test_wipe_before_first_checkpoint_is_unrecoverable():
    # every server starves from round 1, so the only checkpoint anyone
    # ever holds is the genesis one, whose rollback target is nothing
    rep = run_recovery(32, 93, 7, StrategySpec("permanent-set", size=31),
                       n_clients=2, cmds_per_client=1, window=small_window())
    assert rep["max_window"] == 0
    assert rep["commit_rounds"] == []
    assert rep["l_counts"][-1] == 0
    assert not any(w["happy"] for w in rep["windows"])
    assert all(c["committed"] is None and c["acked"] is None
               for c in rep["commands"].values())
    assert rep["violations"] == [] and all(rep["audits"].values())


def test_alternating_partition_stalls_but_stays_safe():
    rep = run_recovery(32, 124, 17,
                       StrategySpec("partition", split=0.5, period=2),
                       n_clients=2, cmds_per_client=2, stagger=3,
                       window=small_window())
    assert rep["violations"] == [] and all(rep["audits"].values())
    assert rep["max_window"] == 0
    assert not any(w["happy"] for w in rep["windows"])


def test_recovery_run_is_seed_deterministic():
    kw = dict(n=32, rounds=93, seed=5,
              adversary_spec=StrategySpec("uniform-random", beta=0.1),
              n_clients=2, cmds_per_client=2, stagger=3, window=small_window())
    a = run_recovery(**kw)
    assert a == run_recovery(**kw)
    b = run_recovery(**{**kw, "seed": 6})
    assert (b["useful"], b["commands"]) != (a["useful"], a["commands"])
