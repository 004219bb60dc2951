# File: test_checks.py
import pytest

from src.checks import CHECKS, FROZEN_STEPS, GRADIENT_TOLERANCE, check_frozen_parameters, check_gradients, run_checks


def test_gradient_check_covers_both_precisions():
    """The gradient check runs both modes in 64-bit and 32-bit and reports each"""
    detail = check_gradients()
    for key in ("adapter/64", "adapter/32", "fullft/64", "fullft/32"):
        assert key in detail
    assert GRADIENT_TOLERANCE == {True: 1e-4, False: 1e-2}


def test_frozen_parameter_check_runs_fifty_steps():
    """Frozen base tensors stay bitwise unchanged over 50 adapter steps"""
    assert FROZEN_STEPS == 50
    assert check_frozen_parameters() == "50 adapter steps"


def test_run_checks_by_name():
    """Selected checks run alone and report pass with timing"""
    results = run_checks(["placement", "shift inverse"])
    assert [r.name for r in results] == ["placement", "shift inverse"]
    assert all(r.passed and r.seconds >= 0 for r in results)


@pytest.mark.slow
def test_all_checks_pass():
    """The whole built-in suite passes"""
    results = run_checks()
    assert len(results) == len(CHECKS)
    assert [r.name for r in results if not r.passed] == []
