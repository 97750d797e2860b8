import numpy as np
import pytest

from median_smr.adversary import Phase, Strategy, StrategySpec, spec_from_dict
from median_smr.errors import ConfigError
from median_smr.rng import StreamFactory
from median_smr.simcore import WorldSnapshot


def snap(r, n, holders=None, blocked_prev=None):
    return WorldSnapshot(
        round=r,
        holders=np.ones(n, dtype=bool) if holders is None else holders,
        blocked_prev=np.zeros(n, dtype=bool) if blocked_prev is None else blocked_prev,
        states=(),
    )


def drive(spec, n, rounds, seed=1):
    strat = Strategy(spec, n, StreamFactory(seed))
    return [strat.choose_blocked(snap(r, n)) for r in range(1, rounds + 1)]


def test_none_blocks_nobody():
    for mask in drive(StrategySpec("none"), 50, 5):
        assert not mask.any()


def test_permanent_set_blocks_lowest_ids():
    # size ceil(0.3 * 10) = 3 -> servers {1,2,3} every round
    masks = drive(StrategySpec("permanent-set", size=3), 10, 4)
    for mask in masks:
        assert np.flatnonzero(mask).tolist() == [0, 1, 2]


def test_permanent_set_size_from_beta():
    masks = drive(StrategySpec("permanent-set", beta=0.301), 1000, 1)
    assert int(masks[0].sum()) == 301


def test_uniform_budget_is_floor_beta_n():
    for n, beta, want in [(1000, 0.1, 100), (17, 0.1, 1), (9, 0.1, 0), (512, 0.25, 128)]:
        masks = drive(StrategySpec("uniform-random", beta=beta), n, 3)
        assert all(int(m.sum()) == want for m in masks)


def test_uniform_resamples_each_round():
    a, b = drive(StrategySpec("uniform-random", beta=0.1), 1000, 2)
    assert (a != b).any()


def test_uniform_is_seed_deterministic():
    one = drive(StrategySpec("uniform-random", beta=0.2), 200, 6, seed=9)
    two = drive(StrategySpec("uniform-random", beta=0.2), 200, 6, seed=9)
    assert all((x == y).all() for x, y in zip(one, two))


def test_sticky_holds_choice_for_hold_rounds():
    masks = drive(StrategySpec("sticky", beta=0.1, hold=3), 300, 7)
    assert (masks[0] == masks[1]).all() and (masks[1] == masks[2]).all()
    assert (masks[3] == masks[4]).all() and (masks[4] == masks[5]).all()
    assert (masks[2] != masks[3]).any()


def test_target_useful_prefers_recently_useful_servers():
    n = 10
    strat = Strategy(StrategySpec("target-useful", beta=0.3), n, StreamFactory(3))
    holders = np.zeros(n, dtype=bool)
    holders[[1, 4, 7]] = True   # servers 2, 5, 8 hold values
    mask = strat.choose_blocked(snap(1, n, holders=holders))
    assert np.flatnonzero(mask).tolist() == [1, 4, 7]


def test_target_useful_budget_respected():
    n = 100
    strat = Strategy(StrategySpec("target-useful", beta=0.05), n, StreamFactory(3))
    mask = strat.choose_blocked(snap(1, n))
    assert int(mask.sum()) == 5


def test_surge_schedule_phases():
    spec = StrategySpec("surge-schedule", phases=(Phase(1, 2, 0.0), Phase(3, 4, 1.0)))
    masks = drive(spec, 40, 6)
    assert not masks[0].any() and not masks[1].any()
    assert masks[2].all() and masks[3].all()
    assert not masks[4].any() and not masks[5].any()   # after last phase


def test_partition_alternates_sides_by_period():
    spec = StrategySpec("partition", split=0.5, period=2)
    masks = drive(spec, 8, 6)
    lo = [0, 1, 2, 3]
    hi = [4, 5, 6, 7]
    assert np.flatnonzero(masks[0]).tolist() == lo
    assert np.flatnonzero(masks[1]).tolist() == lo
    assert np.flatnonzero(masks[2]).tolist() == hi
    assert np.flatnonzero(masks[3]).tolist() == hi
    assert np.flatnonzero(masks[4]).tolist() == lo


def test_spec_validation():
    with pytest.raises(ConfigError):
        StrategySpec("zap")
    with pytest.raises(ConfigError):
        StrategySpec("uniform-random", beta=1.5)
    with pytest.raises(ConfigError):
        StrategySpec("sticky", hold=0)
    with pytest.raises(ConfigError):
        StrategySpec("partition", split=0.0)
    with pytest.raises(ConfigError):
        StrategySpec("surge-schedule", phases=(Phase(5, 4, 0.1),))
    with pytest.raises(ConfigError):
        StrategySpec("surge-schedule", phases=(Phase(1, 5, 0.1), Phase(3, 9, 0.2)))
    with pytest.raises(ConfigError):
        Strategy(StrategySpec("permanent-set", size=11), 10, StreamFactory(1))


def test_spec_from_dict_strictness():
    spec = spec_from_dict({"name": "sticky", "beta": 0.2, "hold": 4})
    assert (spec.beta, spec.hold) == (0.2, 4)
    with pytest.raises(ConfigError):
        spec_from_dict({"name": "none", "beta": 0.1})
    with pytest.raises(ConfigError):
        spec_from_dict({"name": "uniform-random", "Beta": 0.1})
    with pytest.raises(ConfigError):
        spec_from_dict({"beta": 0.1})
    with pytest.raises(ConfigError):
        spec_from_dict({"name": "surge-schedule",
                        "phases": [{"from_round": 1, "to": 2, "beta": 0.5}]})


def test_phases_round_trip_from_dict():
    spec = spec_from_dict({
        "name": "surge-schedule",
        "phases": [{"from_round": 1, "to_round": 10, "beta": 0.1},
                   {"from_round": 11, "to_round": 20, "beta": 1.0}],
    })
    assert spec.phases == (Phase(1, 10, 0.1), Phase(11, 20, 1.0))
