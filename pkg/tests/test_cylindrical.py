import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condflow.cylindrical import (
    HatPartition,
    constant_outer,
    cos_fn,
    cylindrical,
    derivative_consistency,
    direct_sum,
    ftc_check,
    gaussian_bump,
    growth_bound_check,
    linear_outer,
    make_test_function,
    outer_function,
    perturbation_consistency,
    power_outer,
    product_outer,
    project_functional,
    quartic_y_outer,
    sin_fn,
    tanh_fn,
    z_sin_y_outer,
)
from condflow.errors import InvalidArgument, Unsupported
from condflow.flow import EmpiricalConditionalLaw
from condflow.rng import generator


def law(xs):
    return EmpiricalConditionalLaw.from_particles(np.asarray(xs, float))


FUNCTIONALS = {
    "tanh_squared": cylindrical(power_outer(2), [tanh_fn()]),
    "cubic": cylindrical(power_outer(3), [tanh_fn()]),
    "sin_cos_product": cylindrical(product_outer(), [sin_fn(), cos_fn()]),
    "z_sin_y": cylindrical(z_sin_y_outer(m=2), [tanh_fn(), gaussian_bump()]),
    "planar": cylindrical(product_outer(), [tanh_fn(d=2, component=0), cos_fn(d=2, component=1)], d=2),
}


# evaluation


def test_eval_examples():
    assert cylindrical(linear_outer([1.0]), [cos_fn()]).value(law([0.0])) == 1.0
    assert cylindrical(power_outer(2), [tanh_fn()]).value(law([0.0])) == 0.0
    phi = cylindrical(product_outer(), [sin_fn(), cos_fn()])
    assert phi.value(law([0.0, np.pi / 2])) == pytest.approx(0.25, abs=1e-15)


def test_linear_and_quadratic_derivatives():
    g = tanh_fn()
    mu = law([0.3, -1.2, 2.0])
    x = np.array([[0.7], [-0.4]])
    lin = cylindrical(linear_outer([1.0]), [g])
    assert np.allclose(lin.linear_derivative(mu, None, x), g.value(x))
    quad = cylindrical(power_outer(2), [g])
    assert np.allclose(quad.second_linear_derivative(mu, None, x[:1], x[1:]), 2 * g.value(x[:1]) * g.value(x[1:]))


@pytest.mark.parametrize("name", sorted(FUNCTIONALS))
def test_derivatives_match_finite_differences(name):
    worst = derivative_consistency(FUNCTIONALS[name], n_probes=100)
    assert max(worst.values()) < 1e-5, worst


@pytest.mark.parametrize("name", sorted(FUNCTIONALS))
def test_perturbation_limit(name):
    assert perturbation_consistency(FUNCTIONALS[name], n_probes=50) < 1e-5


@pytest.mark.parametrize("name", sorted(FUNCTIONALS))
def test_second_derivative_symmetry_exact(name):
    phi = FUNCTIONALS[name]
    rng = generator(3)
    for _ in range(50):
        mu = law(rng.standard_normal((5, phi.d)))
        y = rng.standard_normal(phi.dy)
        a, b = rng.standard_normal((1, phi.d)), rng.standard_normal((1, phi.d))
        assert np.array_equal(phi.second_linear_derivative(mu, y, a, b), phi.second_linear_derivative(mu, y, b, a))


# fundamental theorem of calculus


def test_ftc_equal_measures_zero():
    mu = law([0.1, 0.5])
    assert ftc_check(FUNCTIONALS["cubic"], mu, mu) == 0.0


def test_ftc_linear_roundoff():
    rng = generator(1)
    phi = cylindrical(linear_outer([2.0]), [tanh_fn()])
    assert ftc_check(phi, law(rng.standard_normal(10)), law(rng.standard_normal(10))) < 1e-12


def test_ftc_cubic():
    rng = generator(2)
    phi = FUNCTIONALS["cubic"]
    mu, nu = law(rng.standard_normal(10)), law(2 + rng.standard_normal(10))
    assert ftc_check(phi, mu, nu, nodes=32) < 1e-8
    assert ftc_check(phi, mu, nu, nodes=1) > ftc_check(phi, mu, nu, nodes=2)


# growth


def test_growth_bounded_passes():
    assert growth_bound_check(FUNCTIONALS["tanh_squared"], n_probes=200).passed


def test_growth_quartic_violates():
    rep = growth_bound_check(cylindrical(quartic_y_outer(), [tanh_fn()]), n_probes=200)
    assert not rep.passed
    assert rep.details["ratios"]["grad_y"] > 100


def test_growth_zero_functional():
    rep = growth_bound_check(cylindrical(constant_outer(0.0), [tanh_fn()]), n_probes=50)
    assert rep.passed
    assert max(rep.details["ratios"].values()) == 0.0


def test_growth_rejects_small_p():
    with pytest.raises(InvalidArgument):
        growth_bound_check(FUNCTIONALS["cubic"], p=1.5)


# catalogs and composition


def test_catalog_errors():
    with pytest.raises(InvalidArgument):
        make_test_function("nope")
    with pytest.raises(InvalidArgument):
        outer_function("nope")


def test_direct_sum_adds_values():
    a, b = FUNCTIONALS["tanh_squared"], FUNCTIONALS["cubic"]
    mu = law([0.2, 1.4, -0.6])
    assert direct_sum(a, b).value(mu) == pytest.approx(a.value(mu) + b.value(mu))


# T_n projection


def test_partition_of_unity():
    p = HatPartition.build(3)
    w = p.weights(np.linspace(-5, 5, 101))
    assert np.allclose(w.sum(axis=1), 1.0)
    assert np.all(w >= 0)
    assert p.h <= 1 / 3 + 1e-15
    with pytest.raises(InvalidArgument):
        HatPartition.build(0)


def test_projection_fixed_point_on_anchors():
    phi = FUNCTIONALS["cubic"]
    fn = project_functional(phi, 4)
    mu = law(fn.partition.anchors[[3, 10, 20, 30]])
    pushed = fn.partition.push(mu)
    assert np.array_equal(np.sort(pushed.particles[:, 0]), np.sort(mu.particles[:, 0]))
    assert fn.value(mu) == phi.value(mu)


def test_projection_linear_bound():
    phi = cylindrical(linear_outer([1.0]), [tanh_fn()])
    rng = generator(5)
    for n in (1, 2, 4):
        mu = law(rng.uniform(-n, n, 30))
        assert abs(project_functional(phi, n).value(mu) - phi.value(mu)) <= 1.0 / n + 1e-12


def test_projection_refinement():
    phi = FUNCTIONALS["tanh_squared"]
    mu = law(generator(6).uniform(-1.5, 1.5, 40))
    errs = [abs(project_functional(phi, n).value(mu) - phi.value(mu)) for n in (2, 4, 8)]
    assert errs[1] / errs[0] <= 0.6 and errs[2] / errs[1] <= 0.6


def test_projection_requires_scalar_state():
    with pytest.raises(Unsupported):
        project_functional(FUNCTIONALS["planar"], 2)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_push_preserves_mass_and_mean(xs, n):
    mu = law(xs)
    pushed = HatPartition.build(n).push(mu)
    assert pushed.weights.sum() == pytest.approx(1.0)
    # hats reproduce affine functions inside [-n, n]
    clipped = np.clip(mu.particles[:, 0], -n, n)
    assert float(pushed.weights @ pushed.particles[:, 0]) == pytest.approx(float(clipped.mean()), abs=1e-12)


@given(st.lists(st.floats(-4, 4), min_size=2, max_size=6), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_linear_derivative_centring_property(xs, x1, y):
    # the linear derivative is defined up to a constant; only centred values matter
    phi = FUNCTIONALS["z_sin_y"]
    mu = law(xs)
    a = phi.linear_derivative(mu, [y], np.array([[x1]]))[0]
    mean = float(mu.weights @ phi.linear_derivative(mu, [y], mu.particles))
    eps = 1e-6
    dirac = law([x1])
    fd = (phi.value(dirac.mix(mu, eps), [y]) - phi.value(mu, [y])) / eps
    assert fd == pytest.approx(a - mean, abs=1e-4)
