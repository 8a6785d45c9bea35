import numpy as np

from hetsim.checks import SUITES, check_grads, check_prop1, check_trilinear, naive_trilinear


def test_prop1_suite_passes():
    res = check_prop1(draws=20_000)
    assert res.passed and res.max_error < 1e-12, res.summary()


def test_grads_suite_passes():
    res = check_grads(instances=2)
    assert res.passed and res.instances == 4, res.summary()


def test_trilinear_suite_passes():
    res = check_trilinear(instances=200)
    assert res.passed, res.summary()
    assert res.summary().startswith("PASS trilinear")


def test_naive_trilinear_matches_einsum():
    rng = np.random.default_rng(0)
    U, V, W = rng.normal(size=(3, 4)), rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(naive_trilinear(U, V, W), np.einsum("bl,bdl,bl->bd", U, V, W), rtol=1e-13)


def test_failure_is_reported():
    res = check_prop1(draws=10, threshold=-1.0)
    assert not res.passed and res.summary().startswith("FAIL")
    assert set(SUITES) == {"prop1", "grads", "trilinear"}
