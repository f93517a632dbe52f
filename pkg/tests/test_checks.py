"""The property batteries themselves: fast passes and the negative control."""

import pytest

from exnode.checks import SUITES, run_suite


@pytest.mark.parametrize("suite", sorted(SUITES))
def test_suite_passes_fast(suite):
    report = run_suite(suite, seed=1, fast=True)
    assert report["passed"], report["cases"]
    assert report["suite"] == suite
    assert all({"name", "worst", "threshold", "passed"} <= set(c)
               for c in report["cases"])


def test_sabotage_breaks_equivariance():
    report = run_suite("equivariance", seed=1, fast=True, sabotage=True)
    assert not report["passed"]
    broken = [c for c in report["cases"] if not c["passed"]]
    assert broken


def test_sabotage_only_applies_to_equivariance():
    with pytest.raises(ValueError):
        run_suite("trace", sabotage=True)


def test_unknown_suite_rejected():
    with pytest.raises(KeyError):
        run_suite("nonsense")
