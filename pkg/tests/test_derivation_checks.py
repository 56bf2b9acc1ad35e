import time

import pytest

from derivation_checks import (
    CFG_TOLERANCE,
    TOLERANCE,
    ToyGaussianWorld,
    check_cfg_identity,
    check_conditional_score_identity,
    check_posterior_mean,
    check_x0_parameterization,
    run_identity_suite,
)
from errors import InvalidRangeError


@pytest.fixture(scope="module")
def world():
    return ToyGaussianWorld(mu0=0.0, sigma0=1.0, a=1.0, b=0.0, sigma_y=1.0)


def test_identity_suite_passes_quickly():
    start = time.perf_counter()
    results = run_identity_suite()
    assert time.perf_counter() - start < 10.0
    assert len(results) == 5 * 4 * 4
    failed = [r for r in results if not r.passed]
    assert failed == []


def test_zero_scale_gives_zero_deviation(world):
    assert check_conditional_score_identity(world, 500, -2.0, 0.0) == 0.0


def test_constant_property_leaves_the_score_alone():
    world = ToyGaussianWorld(a=0.0, b=0.3)
    assert check_conditional_score_identity(world, 250, -2.0, 1.5) <= TOLERANCE


def test_generic_world(world):
    for t in (1, 250, 500, 1000):
        assert check_conditional_score_identity(world, t, -2.0, 0.8) <= TOLERANCE


@pytest.mark.parametrize("s", [0.0, 1.0, 0.37, 1.9])
def test_cfg_identity(world, s):
    assert check_cfg_identity(world, 400, s) <= CFG_TOLERANCE


def test_x0_parameterization_in_deep_noise(world):
    assert check_x0_parameterization(world, 1000) <= TOLERANCE


def test_x0_parameterization_near_clean_data(world):
    deviation = check_x0_parameterization(world, 1)
    assert deviation == deviation
    assert deviation <= TOLERANCE


def test_point_mass_like_data():
    world = ToyGaussianWorld(mu0=0.4, sigma0=1e-6)
    assert check_x0_parameterization(world, 300) <= TOLERANCE


def test_posterior_mean_matches_bayes(world):
    for t in (1, 2, 100, 1000):
        assert check_posterior_mean(world, t) <= TOLERANCE


def test_world_rejects_nonpositive_spread():
    with pytest.raises(InvalidRangeError):
        ToyGaussianWorld(sigma0=0.0)
