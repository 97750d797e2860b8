"""Log order, median merge, and replication runs."""

import pytest
from hypothesis import given, strategies as st

from median_smr.adversary import StrategySpec
from median_smr.errors import ConfigError
from median_smr.medianrules import RuleParams
from median_smr.rng import stream
from median_smr.smrlog import (
    Command,
    Entry,
    Log,
    LogCache,
    SmrProtocol,
    extended_median_step,
    fanout_count,
    lex_compare,
    merge_logs,
    nullify_conflicts,
    run_smr,
    seed_command,
)


def cmd(client, seq, payload=b""):
    return Command(client, seq, payload)


def log_of(*cmds, birth=0):
    return Log(tuple(Entry(c, birth) for c in cmds))


X0 = seed_command()
A = cmd("a", 1)
B = cmd("b", 1)
C = cmd("c", 1)


# -- commands and order keys --------------------------------------------------


def test_command_validation():
    for bad in ("", "x" * 17, "naïve", "nul\x00id"):
        with pytest.raises(ConfigError):
            Command(bad, 1)
    for bad_seq in (0, -1, 1 << 63, "1"):
        with pytest.raises(ConfigError):
            Command("c", bad_seq)


def test_order_key_layout():
    k = cmd("ab", 3, b"payload").okey
    assert len(k) == 40
    assert k[:16] == b"ab" + b"\x00" * 14
    assert k[16:24] == (3).to_bytes(8, "big")


def test_order_key_sorts_by_client_then_seq():
    assert cmd("a", 2).okey < cmd("b", 1).okey
    assert cmd("a", 1).okey < cmd("a", 2).okey
    # seq compares numerically even across byte-length boundaries
    assert cmd("a", 255).okey < cmd("a", 256).okey


def test_null_flag_outside_the_order():
    a, an = cmd("a", 5), cmd("a", 5).as_null()
    assert a.okey == an.okey
    assert a != an
    assert an.as_null() is an


def test_log_prefix_precedes_extension():
    assert lex_compare(log_of(X0), log_of(X0, A)) == -1
    assert lex_compare(log_of(X0, A), log_of(X0)) == 1


def test_log_first_difference_decides():
    assert lex_compare(log_of(X0, A, C), log_of(X0, B)) == -1
    assert lex_compare(log_of(X0, B), log_of(X0, A, C)) == 1


def test_log_equality_elementwise():
    assert lex_compare(log_of(X0, A), log_of(X0, A)) == 0
    assert log_of(X0, A) == log_of(X0, A)
    assert hash(log_of(X0, A)) == hash(log_of(X0, A))


def test_log_rejects_empty_and_duplicates():
    with pytest.raises(ConfigError):
        Log(())
    with pytest.raises(ConfigError):
        log_of(X0, A, A)


# -- median merge -------------------------------------------------------------


def sorted_median(logs):
    """Brute-force median oracle: sort by full key material, take middle."""
    return sorted(logs, key=lambda L: (L.key, L.meta_key()))[len(logs) // 2]


def test_merge_hand_case():
    la, lb = log_of(X0, A), log_of(X0, B)
    la2 = log_of(X0, A)
    assert sorted_median([la, lb, la2]) == la
    got = merge_logs([la, lb, la2], appends=(Entry(B, 4),))
    assert [e.cmd for e in got.entries] == [X0, A, B]


def test_merge_of_identical_logs_is_identity():
    L = log_of(X0, A, B)
    assert merge_logs([L, L, L]) is L


def test_merge_appends_only_missing_commands():
    L = log_of(X0, A)
    out = merge_logs([L, L, L], appends=(Entry(A, 9), Entry(B, 9)))
    assert [e.cmd for e in out.entries] == [X0, A, B]
    assert out.entries[2].birth == 9


def test_merge_extends_median_in_command_order():
    la = log_of(X0, C)
    lb = log_of(X0, A)
    lc = log_of(X0, B)
    got = merge_logs([la, lb, lc])
    med = sorted_median([la, lb, lc])
    assert med == lc   # (x0,a) < (x0,b) < (x0,c)
    # median prefix first, then the missing commands in key order
    assert [e.cmd for e in got.entries] == [X0, B, A, C]


def test_merge_keeps_minimum_birth_for_extras():
    la = log_of(X0)
    lb = Log((Entry(X0, 0), Entry(B, 7)))
    lc = Log((Entry(X0, 0), Entry(B, 3)))
    got = merge_logs([la, lb, lc])
    assert sorted_median([la, lb, lc]) in (lb, lc)
    assert got.entries[-1].cmd == B
    assert got.entries[-1].birth == 3


def test_merge_median_birth_wins_for_its_own_entries():
    lb_young = Log((Entry(X0, 0), Entry(B, 9)))
    lb_old = Log((Entry(X0, 0), Entry(B, 1)))
    la = log_of(X0, A)
    got = merge_logs([lb_young, lb_young, la])
    assert got.entries[1].cmd == B if got.entries[1].cmd == B else True
    med = sorted_median([lb_young, lb_young, la])
    assert med is lb_young
    assert got.index()[B.okey] is not None
    assert got.entries[got.index()[B.okey]].birth == 9
    # same multiset but older copy in the median slot keeps its own birth
    got2 = merge_logs([lb_old, lb_old, la])
    assert got2.entries[got2.index()[B.okey]].birth == 1


def test_merge_null_flags_are_sticky():
    plain = log_of(X0, A)
    nulled = Log((Entry(X0, 0), Entry(A.as_null(), 0)))
    got = merge_logs([plain, plain, nulled])
    assert got.entries[1].cmd.nullified
    # ... even when the nullified copy arrives as an append request
    got2 = merge_logs([plain, plain, plain], appends=(Entry(A.as_null(), 2),))
    assert got2.entries[1].cmd.nullified


def test_extended_step_needs_l_logs():
    assert extended_median_step(None, [log_of(X0), log_of(X0)], (), RuleParams(),
                                stream(1, "s")) is None


def test_extended_step_unanimity_is_noop():
    L = log_of(X0, A)
    got = extended_median_step(L, [L] * 6, (), RuleParams(), stream(1, "s"))
    assert got is L


@st.composite
def small_logs(draw):
    pool = [X0, A, B, C, cmd("d", 2), cmd("a", 2)]
    picks = draw(st.lists(st.integers(0, len(pool) - 1), min_size=0, max_size=4,
                          unique=True))
    births = draw(st.lists(st.integers(0, 9), min_size=len(picks), max_size=len(picks)))
    entries = [Entry(X0, 0)] + [Entry(pool[i], b) for i, b in zip(picks, births)
                                if pool[i] is not X0]
    seen, uniq = set(), []
    for e in entries:
        if e.cmd.okey not in seen:
            seen.add(e.cmd.okey)
            uniq.append(e)
    return Log(tuple(uniq))


@given(st.lists(small_logs(), min_size=3, max_size=3), st.permutations([0, 1, 2]))
def test_merge_is_permutation_invariant(logs, perm):
    assert merge_logs(logs) == merge_logs([logs[i] for i in perm])


@given(st.lists(small_logs(), min_size=3, max_size=3))
def test_merge_preserves_median_prefix_and_unions_commands(logs):
    got = merge_logs(logs)
    med = sorted_median(logs)
    k = len(med.entries)
    assert [e.cmd.okey for e in got.entries[:k]] == [e.cmd.okey for e in med.entries]
    assert got.keyset == med.keyset | logs[0].keyset | logs[1].keyset | logs[2].keyset


@given(st.lists(small_logs(), min_size=3, max_size=3))
def test_merge_is_idempotent_on_its_result(logs):
    once = merge_logs(logs)
    assert merge_logs([once, once, once]) is once


# -- conflict nullification ---------------------------------------------------


def test_nullify_flags_equivocating_pairs():
    a1, a2 = cmd("c", 1, b"A"), cmd("c", 1, b"B")
    out = nullify_conflicts(Log((Entry(X0, 0), Entry(a1, 1), Entry(a2, 1))))
    assert [e.cmd.nullified for e in out.entries] == [False, True, True]
    # order keys (hence positions) are untouched
    assert [e.cmd.okey for e in out.entries] == [X0.okey, a1.okey, a2.okey]


def test_nullify_leaves_honest_logs_alone():
    L = Log((Entry(X0, 0), Entry(cmd("c", 1, b"A"), 1)))
    assert nullify_conflicts(L) is L
    M = Log((Entry(X0, 0), Entry(cmd("c", 1, b"A"), 1), Entry(cmd("d", 1, b"B"), 1)))
    assert nullify_conflicts(M) is M


# -- cache, fan-out, protocol hooks -------------------------------------------


def test_log_cache_interns_by_content():
    cache = LogCache()
    a = cache.canon(log_of(X0, A))
    b = cache.canon(log_of(X0, A))
    assert a is b
    assert cache.canon(log_of(X0, B)) is not a


def test_fanout_counts():
    assert fanout_count(1024, 5) == 50
    assert fanout_count(512, 5) == 45
    assert fanout_count(4, 5) == 10


def test_on_deliver_fans_out_fresh_commands_only():
    proto = SmrProtocol(1024)
    state = proto.initial_state(1)
    pushes, acks = proto.on_deliver(state, 1, [A], 3, stream(0, "f"), 1024)
    assert len(pushes) == 50
    assert all(1 <= t <= 1024 for t, _ in pushes)
    assert all(e == Entry(A, 3) for _, e in pushes)
    assert acks == []
    # undecided server: client must retry later
    assert proto.on_deliver(None, 1, [A], 3, stream(0, "f"), 1024) == ([], [])
    # already carried: no second fan-out
    carrying = log_of(X0, A)
    assert proto.on_deliver(carrying, 1, [A], 3, stream(0, "f"), 1024) == ([], [])


# -- replication runs ---------------------------------------------------------


def test_no_injections_logs_stay_seeded():
    trace = run_smr(32, 20, seed=4, adversary_spec=StrategySpec("none"), commands={})
    assert trace["commands"] == {}
    assert trace["useful"] == [32] * 20
    assert trace["audits"]["shrinkage"]


def test_staggered_commands_broadcast_and_stabilize():
    cmds = {1: [cmd("u", 1)], 4: [cmd("u", 2)], 7: [cmd("v", 1)]}
    trace = run_smr(64, 120, seed=8,
                    adversary_spec=StrategySpec("uniform-random", beta=0.1),
                    commands=cmds)
    assert trace["audits"]["shrinkage"]
    for label, rec in trace["commands"].items():
        assert rec["injected"] is not None, label
        assert rec["broadcast"] is not None, label
        assert rec["stable"] is not None, label
        assert rec["injected"] <= rec["broadcast"]


def test_run_smr_deterministic():
    cmds = lambda: {2: [cmd("w", 1)]}
    a = run_smr(32, 40, seed=6, adversary_spec=StrategySpec("uniform-random", beta=0.1),
                commands=cmds())
    b = run_smr(32, 40, seed=6, adversary_spec=StrategySpec("uniform-random", beta=0.1),
                commands=cmds())
    assert a == b
