"""The acceptance gate: one test per criterion, A1 through A11.

Each criterion runs its pinned configuration (seeds included) and prints
a single PASS/FAIL line with the counts behind the verdict, so a bare
pytest run doubles as the acceptance report.  The statistical criteria
are thresholded well inside their expected concentration, but they are
real samples: a failure here means the claim, the implementation, or
the tolerance is wrong, and which one is worth finding out.
"""

import pytest

from median_smr.acceptance import CRITERIA, run_criterion

ORDER = sorted(CRITERIA, key=lambda c: int(c[1:]))


@pytest.mark.parametrize("cid", ORDER)
def test_criterion(cid, capsys):
    v = run_criterion(cid)
    with capsys.disabled():
        status = "PASS" if v.ok else "FAIL"
        print(f"  {status} {cid}: {v.passed}/{v.total}"
              f" (threshold {v.threshold}) {v.detail}")
    assert v.ok, f"{cid}: {v.row()}"
