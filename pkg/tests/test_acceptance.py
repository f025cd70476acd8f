"""All twelve acceptance criteria at their stated scale and tolerance.

Each criterion prints one ``[PASS]``/``[FAIL]`` line; the lines are also
collected into a section of the terminal summary.
"""

import pytest

from bfpnpu.harness.acceptance import CRITERIA, run_criterion

from conftest import ACCEPTANCE_LINES


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    res = run_criterion(number)
    line = f"{res.line()}  ({res.seconds:.1f}s)"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert res.passed, line
