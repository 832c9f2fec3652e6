"""Acceptance criteria, one test per criterion.

Each test runs the corresponding benchmark check at its stated tolerance
and prints a PASS/FAIL line; `sonoarm bench --suite primary` runs the
same list from the command line.
"""

import pytest

from sonoarm import bench


@pytest.mark.parametrize("check", bench.PRIMARY_CRITERIA,
                         ids=[c.__name__.removeprefix("check_")
                              for c in bench.PRIMARY_CRITERIA])
def test_criterion(check, capsys):
    import time

    t0 = time.perf_counter()
    result = check()
    result.runtime_s = time.perf_counter() - t0
    with capsys.disabled():
        print(f"\n{result.row()}")
    assert result.passed, result.row()
