"""One test per acceptance criterion, each at its frozen threshold."""

import pytest

from stprompt import suite


def check(result):
    assert result.passed, f"{result.name}: value={result.value!r} threshold={result.threshold} {result.detail}"


def test_c01_gradient_fidelity():
    check(suite.check_gradients())


def test_c02_identity_at_init():
    check(suite.check_identity())


def test_c03_frozen_backbone_contract():
    check(suite.check_frozen_contract())


def test_c04_parameter_budget():
    check(suite.check_budget())


def test_c05_constant_footprint():
    check(suite.check_footprint())


@pytest.mark.slow
def test_c06_adaptation_speedup():
    check(suite.check_speedup())


@pytest.mark.slow
def test_c07_shift_recovery():
    check(suite.check_recovery())


def test_c08_metric_correctness():
    check(suite.check_metrics())


def test_c09_graph_algebra():
    check(suite.check_graph_algebra())


def test_c10_wasserstein_estimator():
    check(suite.check_wasserstein())


@pytest.mark.slow
def test_c11_reproducibility():
    check(suite.check_reproducibility())
