import numpy as np
import pytest

from condflow.copies import (
    check_conditional_independence,
    check_conditional_law_equality,
    conditional_expectation,
    constant_initial,
    corrupted_copies,
    same_seed_copies,
    spawn_copies,
)
from condflow.core import build_time_grid
from condflow.errors import InsufficientData, InvalidArgument
from condflow.models import scalar_model
from condflow.rng import derive_seed

GRID = build_time_grid(1.0, 20)
X0 = constant_initial(0.0)


def _ensembles(model, n_seeds, n, builder=spawn_copies, grid=GRID):
    return [builder(model, grid, derive_seed(1, "c", i), X0, n, derive_seed(2, "b", i)) for i in range(n_seeds)]


def test_ensemble_invariants():
    model = scalar_model(0.1, 1.0, 1.0, intensity=2.0)
    e = spawn_copies(model, GRID, 5, X0, 6, 9)
    assert e.n == 6
    assert len(set(e.idio_seeds)) == 7
    assert e.base.common_seed == e.common_seed == 5
    with pytest.raises(InvalidArgument):
        spawn_copies(model, GRID, 5, X0, 0, 9)


def test_trivial_sigma_algebra_gives_iid_copies():
    e = spawn_copies(scalar_model(0.0, 1.0, 0.0), GRID, 5, X0, 4, 9)
    xt = e.terminal()[:, 0]
    assert np.unique(xt).size == 4


def test_pure_common_noise_copies_identical():
    e = spawn_copies(scalar_model(0.2, 0.0, 1.0), GRID, 5, X0, 4, 9)
    assert np.all(e.copies.values == e.base.values[None])


def test_conditional_expectation_trivial_cases():
    e = spawn_copies(scalar_model(0.2, 0.0, 1.0), GRID, 5, X0, 5, 9)
    assert conditional_expectation(lambda b: 3.5, e, arity=0) == 3.5
    xt = conditional_expectation(lambda b, c: c.values[-1, 0], e, arity=1)
    assert xt == e.base.values[-1, 0]
    with pytest.raises(InvalidArgument):
        conditional_expectation(lambda b: 0.0, e, arity=3)


def test_pair_expectation_matches_nested_oracle():
    # E[X'_T X''_T | G] = (E[X_T | G])^2 = (W0_T)^2 for dX = dW + dW0
    model = scalar_model(0.0, 1.0, 1.0)
    n = 200
    e = spawn_copies(model, GRID, 21, X0, n, 4)
    loop = conditional_expectation(lambda b, c1, c2: c1.values[-1, 0] * c2.values[-1, 0], e, arity=2)
    vec = conditional_expectation(
        lambda b, cs: np.outer(cs.values[:, -1, 0], cs.values[:, -1, 0]), e, arity=2, vectorized=True
    )
    assert loop == pytest.approx(vec, rel=1e-10)
    big = spawn_copies(model, GRID, 21, X0, 10 * n, 77)
    oracle = float(np.mean(big.terminal()[:, 0])) ** 2
    assert abs(vec - oracle) / max(abs(oracle), 1.0) < 2 / np.sqrt(n)


def test_law_equality_null_and_corrupted():
    model = scalar_model(0.0, 1.0, 1.0)
    grid = build_time_grid(1.0, 10)
    ok = check_conditional_law_equality(_ensembles(model, 120, 200, grid=grid), [lambda x: x[:, 0]], min_common=100)
    assert ok.passed
    bad = check_conditional_law_equality(
        _ensembles(model, 120, 200, builder=corrupted_copies, grid=grid), [lambda x: x[:, 0]], min_common=100
    )
    assert not bad.passed
    assert bad.statistic > 0.2


def test_law_equality_identical_seeds_distance_zero():
    model = scalar_model(0.0, 1.0, 1.0)
    es = [same_seed_copies(model, GRID, derive_seed(3, "c", i), X0, 2, 1) for i in range(3)]
    rep = check_conditional_law_equality(es, [lambda x: x[:, 0]], min_common=3)
    assert rep.details["max_ks_distance"] == 0.0


def test_independence_null_and_same_seed():
    model = scalar_model(0.0, 1.0, 1.0)
    grid = build_time_grid(1.0, 10)
    ident = lambda x: x[:, 0]  # noqa: E731
    ok = check_conditional_independence(_ensembles(model, 120, 40, grid=grid), ident, ident, min_common=100)
    assert ok.passed
    bad = check_conditional_independence(
        _ensembles(model, 120, 40, builder=same_seed_copies, grid=grid), ident, ident, min_common=100
    )
    assert abs(bad.statistic) > 4


def test_independence_degenerate_law_zero_covariance():
    model = scalar_model(0.1, 0.0, 1.0)
    rep = check_conditional_independence(_ensembles(model, 5, 4), lambda x: x[:, 0], lambda x: x[:, 0], min_common=5)
    assert rep.details["max_abs_covariance"] == 0.0


def test_checks_need_enough_seeds():
    with pytest.raises(InsufficientData):
        check_conditional_law_equality(_ensembles(scalar_model(0, 1, 1), 3, 4), [lambda x: x[:, 0]], min_common=100)
