import math

import numpy as np
import pytest
import scipy.special as sp

import oracles
from mocop import special


def _cases(seed, n=100):
    return np.random.default_rng(seed), range(n)


def test_known_values():
    assert special.normal_cdf(0.0) == pytest.approx(0.5, abs=1e-15)
    assert special.t_cdf(0.0, 7) == pytest.approx(0.5, abs=1e-15)
    assert special.chi2_sf(3.8415, 1) == pytest.approx(0.05, abs=2e-4)
    for d in (1, 4, 30, 500):
        assert special.f_cdf(1.0, d, d) == pytest.approx(0.5, abs=1e-12)


def test_gammainc_matches_scipy():
    rng, cases = _cases(1)
    for _ in cases:
        a = float(rng.uniform(0.05, 60))
        x = float(rng.uniform(0, 3 * a + 5))
        assert special.gammainc(a, x) == pytest.approx(sp.gammainc(a, x), abs=1e-10)
        assert special.gammaincc(a, x) == pytest.approx(sp.gammaincc(a, x), abs=1e-10)


def test_betainc_matches_scipy():
    rng, cases = _cases(2)
    for _ in cases:
        a, b = (float(v) for v in rng.uniform(0.1, 200, size=2))
        x = float(rng.uniform())
        assert special.betainc(a, b, x) == pytest.approx(sp.betainc(a, b, x), abs=1e-10)


def test_t_cdf_against_integrated_density():
    rng, cases = _cases(3)
    for _ in cases:
        df = float(rng.choice([rng.uniform(0.5, 5), rng.uniform(5, 2000)]))
        x = float(rng.normal(scale=4))
        assert special.t_cdf(x, df) == pytest.approx(oracles.t_cdf(x, df), abs=1e-6)


def test_chi2_sf_against_integrated_density():
    rng, cases = _cases(4)
    for _ in cases:
        df = float(rng.integers(1, 40))
        x = float(rng.uniform(0.01, 4 * df))
        assert special.chi2_sf(x, df) == pytest.approx(oracles.chi2_sf(x, df), abs=1e-6)
        assert special.chi2_cdf(x, df) == pytest.approx(1 - oracles.chi2_sf(x, df), abs=1e-6)


def test_f_cdf_against_integrated_density():
    rng, cases = _cases(5)
    for _ in cases:
        d1, d2 = (float(v) for v in rng.integers(1, 600, size=2))
        x = float(rng.uniform(0.05, 4))
        assert special.f_cdf(x, d1, d2) == pytest.approx(oracles.f_cdf(x, d1, d2), abs=1e-6)
        assert special.f_sf(x, d1, d2) == pytest.approx(1 - oracles.f_cdf(x, d1, d2), abs=1e-6)


def test_normal_cdf_against_integrated_density():
    rng, cases = _cases(6)
    for _ in cases:
        x = float(rng.normal(scale=3))
        assert special.normal_cdf(x) == pytest.approx(oracles.normal_cdf(x), abs=1e-6)
        assert special.normal_sf(x) == pytest.approx(1 - oracles.normal_cdf(x), abs=1e-6)


@pytest.mark.parametrize("fn,args", [
    (special.t_cdf, (1.0, 0)),
    (special.t_cdf, (1.0, -3)),
    (special.chi2_sf, (1.0, 0)),
    (special.f_cdf, (1.0, 0, 5)),
    (special.f_cdf, (1.0, 5, math.inf)),
])
def test_invalid_degrees_of_freedom(fn, args):
    with pytest.raises(special.InvalidDF):
        fn(*args)


def test_extreme_tails_stay_in_unit_interval():
    for x in (-1e6, -50, 50, 1e6):
        for df in (1, 10, 1e5):
            v = special.t_cdf(x, df)
            assert 0.0 <= v <= 1.0
    assert special.chi2_sf(1e4, 1) == pytest.approx(0.0, abs=1e-300)
    assert special.chi2_sf(0.0, 3) == 1.0
