import numpy as np
import pytest

from condflow.core import build_time_grid, common_increments
from condflow.flow import (
    EmpiricalConditionalLaw,
    component,
    counterexample_analytic,
    empirical_conditional_law,
    pair,
    process_from_spec,
    projected_process,
    verify_conditional_bracket,
    verify_conditional_integral,
)
from condflow.errors import InvalidArgument
from condflow.models import counterexample_model, model_from_spec, scalar_model
from condflow.rng import derive_seed, generator

GRID = build_time_grid(1.0, 20)
SEEDS = [derive_seed(4, "c", i) for i in range(60)]


def test_pair_examples():
    mu = EmpiricalConditionalLaw.from_particles([1.0, 2.0, 3.0])
    assert pair(mu, lambda x: x[:, 0]) == 2.0
    assert pair(mu, lambda x: np.full(x.shape[0], 4.25)) == 4.25
    big = EmpiricalConditionalLaw.from_particles(generator(0).standard_normal(100_000))
    assert abs(pair(big, lambda x: x[:, 0] ** 2) - 1.0) < 3 * np.sqrt(2 / 100_000)


def test_measure_invariants():
    flow = empirical_conditional_law(scalar_model(0.0, 1.0, 1.0), GRID, 3, 7)
    for k in (0, 10, 20):
        law = flow.law(k)
        assert law.weights.sum() == pytest.approx(1.0)
        assert np.array_equal(law.particles, flow.paths.values[:, k])
    single = empirical_conditional_law(scalar_model(0.0, 1.0, 1.0), GRID, 3, 1)
    assert pair(single.law(5), np.cos) == pytest.approx(np.cos(single.paths.values[0, 5, 0]))


def test_mix_and_signed_difference():
    a = EmpiricalConditionalLaw.from_particles([0.0, 1.0])
    b = EmpiricalConditionalLaw.from_particles([5.0])
    m = a.mix(b, 0.25)
    assert m.weights.sum() == pytest.approx(1.0)
    assert pair(m, lambda x: x[:, 0]) == pytest.approx(0.25 * 0.5 + 0.75 * 5.0)


def test_projection_pure_common_noise():
    flow = empirical_conditional_law(scalar_model(0.0, 0.0, 1.0), GRID, 3, 5)
    proj = projected_process(flow, component(0))
    assert np.allclose(proj.values, flow.paths.values[0, :, 0], rtol=1e-15, atol=1e-16)


def test_projection_bounded_test_function_no_jumps():
    flow = empirical_conditional_law(scalar_model(0.0, 1.0, 1.0), GRID, 3, 20)
    assert projected_process(flow, lambda x: np.tanh(x[:, 0])).jump_nodes.size == 0
    jumpy = empirical_conditional_law(scalar_model(0.0, 1.0, 1.0, intensity=5.0), GRID, 3, 20)
    assert projected_process(jumpy, lambda x: np.tanh(x[:, 0])).jump_nodes.size > 0


def test_projection_converges_to_common_brownian():
    model = scalar_model(0.0, 1.0, 1.0)
    errs = []
    Ms = (25, 100, 400)
    for M in Ms:
        e = []
        for c in SEEDS[:40]:
            flow = empirical_conditional_law(model, GRID, c, M)
            w0 = np.concatenate([[0.0], np.cumsum(common_increments(GRID, 1, c)[:, 0])])
            e.append(np.max(np.abs(projected_process(flow, component(0)).values - w0)))
        errs.append(np.mean(e))
    slope = -np.polyfit(np.log(Ms), np.log(errs), 1)[0]
    assert 0.35 <= slope <= 0.65


def test_process_catalog():
    assert process_from_spec(None) is None
    with pytest.raises(InvalidArgument):
        process_from_spec({"kind": "nope"})
    with pytest.raises(InvalidArgument):
        process_from_spec({"kind": "one", "extra": 1})


def test_integral_constant_integrand():
    rep = verify_conditional_integral(
        scalar_model(0.0, 1.0, 0.5), GRID, SEEDS, 200, 200, z=process_from_spec({"kind": "one"})
    )
    assert rep.passed


def test_integral_symmetric_integrand():
    rep = verify_conditional_integral(
        scalar_model(0.0, 1.0, 0.0), GRID, SEEDS, 100, 100, z=process_from_spec({"kind": "component"})
    )
    assert rep.passed
    assert rep.details["lhs_mean_abs"] < 0.1


def test_counterexample_analytic_and_naive_violation():
    model = counterexample_model()
    c = SEEDS[0]
    dW0 = common_increments(GRID, 1, c)
    assert counterexample_analytic(dW0, GRID) == pytest.approx(float(GRID.nodes[:-1] @ dW0[:, 0]))
    rep = verify_conditional_integral(
        model,
        GRID,
        SEEDS,
        200,
        200,
        z=process_from_spec({"kind": "one"}),
        x_component=1,
        eta=process_from_spec({"kind": "component", "component": 0}),
    )
    assert rep.details["naive_violation_t"] > 5
    assert rep.details["naive_violated"]


def test_bracket_examples():
    one = process_from_spec({"kind": "one"})

    def two(sv, sw):
        return model_from_spec({"n": 2, "d_i": 2, "d_c": 1, "sigma_v": {"kind": "constant", "value": sv},
                                "sigma_w": {"kind": "constant", "value": sw}})

    common = two([[0, 0], [0, 0]], [[1.0], [1.0]])
    rep = verify_conditional_bracket(common, GRID, SEEDS[:20], 20, 20, z=one)
    assert rep.passed
    assert rep.details["projected_bracket_mean"] == pytest.approx(1.0, abs=0.7)
    assert abs(rep.details["projected_bracket_residual_mean"]) < 1e-12
    idio = two([[1.0, 0], [0, 1.0]], [[0.0], [0.0]])
    assert verify_conditional_bracket(idio, GRID, SEEDS, 100, 100, z=one).passed
    mixed = two([[1.0, 0], [0, 1.0]], [[1.0], [1.0]])
    assert verify_conditional_bracket(mixed, GRID, SEEDS, 100, 100, z=one).passed
