"""Exact drift-curve and gravity-law oracles.

Every numeric claim here is either hand-arithmetic on rationals or a
brute-force enumeration written independently of the library code.
"""

import math
from fractions import Fraction
from itertools import product

import pytest

from median_smr.analysis import (
    DomainError,
    certify_sign,
    curve_success,
    eval_curve,
    gravity,
    gravity_argmax,
    heavy_threshold,
    sign_scan,
)

F = Fraction


def test_f_endpoint_values():
    assert eval_curve("f", 0) == 0
    assert eval_curve("f", 1) == 1          # -10 + 36 - 45 + 20
    assert eval_curve("f", F(1, 2)) == F(21, 32)   # 0.65625 by hand


def test_f_matches_binomial_tail_everywhere():
    # Dual route: the coefficient vector vs. P[Bin(6,x) >= 3] summed
    # term by term.  Exact rational equality on a fine grid.
    for i in range(0, 101):
        x = F(i, 100)
        assert eval_curve("f", x) == curve_success(x)


def test_sibling_curves_are_the_documented_combinations():
    # Hand-written relations; catches any slip in the stored vectors.
    for i in range(0, 41):
        x = F(i, 40)
        fx = curve_success(x)
        assert eval_curve("g", x) == fx - 3 * x**2
        assert eval_curve("g_avail", x) == F(4, 5) * fx - F(41, 40) * x
        assert eval_curve("g_block", x) == F(7, 10) * fx - F(39, 40) * x


def test_domain_checks():
    with pytest.raises(DomainError):
        eval_curve("f", F(11, 10))
    with pytest.raises(DomainError):
        eval_curve("h", F(1, 2))
    with pytest.raises(DomainError):
        sign_scan("g", "!=0")


def test_sign_scans_coarse_grid():
    assert sign_scan("g", "<=0", 0, 1, F(1, 1000)).ok
    assert sign_scan("g_avail", ">=0", F(1, 2), F(3, 4), F(1, 1000)).ok
    assert sign_scan("g_block", "<=0", 0, 1, F(1, 1000)).ok


def test_sign_scan_reports_violations():
    # g_avail dips negative outside its certified interval.
    bad = sign_scan("g_avail", ">=0", 0, 1, F(1, 100))
    assert not bad.ok
    assert all(eval_curve("g_avail", x) < 0 for x in bad.violations)


def test_certified_signs_on_whole_intervals():
    # Interval-arithmetic proof, not a grid: a positive leaf count means
    # the recursion closed every subinterval.
    assert certify_sign("g", "<=0", 0, 1) > 0
    assert certify_sign("g_avail", ">=0", F(1, 2), F(3, 4)) > 0
    assert certify_sign("g_block", "<=0", 0, 1) > 0


# -- gravity law ------------------------------------------------------------


def brute_gravity(i: int, n_t: int) -> Fraction:
    """P[median rank of three iid uniform picks == i], ties by rank order.

    Enumerates all n_t^3 ordered triples; the median of the sorted triple
    is the adopted rank.
    """
    hits = 0
    for triple in product(range(1, n_t + 1), repeat=3):
        if sorted(triple)[1] == i:
            hits += 1
    return Fraction(hits, n_t**3)


def test_gravity_closed_form_matches_enumeration():
    for n_t in range(1, 8):
        for i in range(1, n_t + 1):
            assert gravity(i, n_t) == brute_gravity(i, n_t)


def test_gravity_hand_values():
    assert gravity(1, 1) == 1
    assert [gravity(i, 3) for i in (1, 2, 3)] == [F(7, 27), F(13, 27), F(7, 27)]
    assert gravity(3, 5) == F(37, 125)   # (6*2*2 + 15 - 2) / 125


def test_gravity_sums_to_one():
    for n_t in (1, 2, 3, 5, 8, 13, 21, 64):
        assert sum(gravity(i, n_t) for i in range(1, n_t + 1)) == 1


def test_gravity_argmax_is_middle_rank():
    for n_t in range(1, 30):
        assert gravity_argmax(n_t) == math.ceil(n_t / 2)
        peak = gravity(gravity_argmax(n_t), n_t)
        assert all(gravity(i, n_t) <= peak for i in range(1, n_t + 1))


def test_heavy_threshold_values():
    assert heavy_threshold(0, 17) == 0
    assert heavy_threshold(1, 2) == pytest.approx(2 * math.sqrt(2 * math.log(2)))
    assert heavy_threshold(1, 1024) == pytest.approx(2 * math.sqrt(1024 * math.log(1024)))
