from __future__ import annotations

import numpy as np
import pytest

from heatseg import *


@pytest.mark.parametrize("check", CHECKS, ids=lambda c: c.name)
def test_check_passes(check):
    result = check.run(0)
    assert result.passed, f"{result.name}: {result.error:.3e} > {result.threshold:.1e}"


def test_run_checks_reports_every_check():
    results = run_checks(0, CHECKS[:3])
    assert [r.name for r in results] == [c.name for c in CHECKS[:3]]


def test_failing_check():
    (result,) = run_checks(0, [Check("always off", 0.1, lambda rng: 1.0)])
    assert not result.passed and result.error == 1.0


def test_numerical_gradient_of_quadratic(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_allclose(numerical_gradient(lambda: float(np.sum(x**2)), x), 2 * x, atol=1e-6)


def test_direct_dct_matches_fast_transform(rng):
    x = rng.standard_normal((1, 5, 7))
    np.testing.assert_allclose(direct_dct(x), dct_forward(FeatureField(x)).data, atol=1e-12)
