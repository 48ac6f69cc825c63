"""Acceptance suite: every criterion at full size and tolerance.

Each test prints one ``[PASS]``/``[FAIL]`` line; run with ``-s`` to see
them, or use ``commopt verify``.  The whole suite takes a few minutes.
"""
import pytest

from commopt.checks import ALL_CHECKS


@pytest.mark.acceptance
@pytest.mark.parametrize("name", list(ALL_CHECKS))
def test_criterion(name, capsys):
    res = ALL_CHECKS[name]()
    with capsys.disabled():
        print("\n" + res.line())
    assert res.ok, res.line()
