"""Acceptance criteria 1-10 at their stated tolerances; one status line each."""

import pytest

from geosplat.acceptance import CRITERIA, run_criterion

LINES = []


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    r = run_criterion(number)
    LINES.append(r.line())
    print(r.line())
    assert r.passed, r.line()
