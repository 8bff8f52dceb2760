import numpy as np
import pytest

from condflow.control import (
    ControlProblem,
    L_operator,
    M_operator,
    baseline_schedules,
    best_action,
    constant_policy,
    constant_value_function,
    controlled_ledger,
    default_switch_nodes,
    drift_control_problem,
    generator_terms,
    hjb_residual,
    kolmogorov_oracle_check,
    linear_drift_value_function,
    moment_value_function,
    objective_estimate,
    ou_oracle_problem,
    random_policy,
    reward_from_spec,
    schedule_policy,
    simulate_controlled,
    symmetric_control_problem,
    terminal_from_spec,
    verification_check,
)
from condflow.core import build_time_grid, simulate_batch
from condflow.cylindrical import clipped_polynomial, cylindrical, identity_fn, linear_outer, power_outer, square_fn, tanh_fn
from condflow.errors import InvalidArgument
from condflow.flow import EmpiricalConditionalLaw, empirical_conditional_law, particle_seeds
from condflow.models import scalar_model
from condflow.reporting import mean_ci
from condflow.rng import derive_seed

SEEDS = [derive_seed(12, "c", i) for i in range(30)]
X = np.linspace(-3, 3, 13)[:, None]
MU = EmpiricalConditionalLaw.from_particles([-1.0, 0.5, 2.0])


def moment(test):
    return cylindrical(linear_outer([1.0]), [test])


def problem(model, actions=(0.0,), running=None, terminal=None, T=1.0):
    return ControlProblem(model, actions, reward_from_spec(running), terminal_from_spec(terminal), 1.0, T)


# generator operators


def test_L_pure_diffusion_on_clipped_square():
    phi = moment(clipped_polynomial([0, 0, 1], radius=50.0))
    out = L_operator(phi, scalar_model(0.0, 1.0, 0.0), MU, 0.0, X)
    assert np.allclose(out, 1.0, atol=1e-12)


def test_L_pure_transport():
    out = L_operator(moment(identity_fn()), scalar_model(1.0, 0.0, 0.0), MU, 0.0, X)
    assert np.allclose(out, 1.0)


def test_L_jump_second_moment():
    out = L_operator(moment(square_fn()), scalar_model(0.0, 0.0, 0.0, intensity=1.0), MU, 0.0, X)
    assert np.allclose(out, 1.0, atol=3 * np.sqrt(2 / 10_000))


def test_M_operator_examples():
    phi = cylindrical(power_outer(2), [identity_fn()])
    assert np.allclose(M_operator(phi, scalar_model(0.0, 0.0, 1.0), MU, 0.0, X, X[::-1]), 1.0)
    assert np.all(M_operator(phi, scalar_model(0.0, 1.0, 0.0), MU, 0.0, X, X) == 0.0)
    jumps = M_operator(phi, scalar_model(0.0, 0.0, 0.0, intensity=1.0), MU, 0.0, X, X)
    assert np.allclose(jumps, 0.0, atol=1e-12)
    with pytest.raises(InvalidArgument):
        M_operator(phi, scalar_model(0.0, 0.0, 1.0), MU, 0.0, X, X[:3])


def test_generator_terms_match_operators():
    phi = cylindrical(power_outer(2), [tanh_fn()])
    model = scalar_model(0.3, 1.0, 1.0)
    gt = generator_terms(phi, model, MU, 0.0)
    L = L_operator(phi, model, MU, 0.0, MU.particles)
    assert gt.drift_diffusion == pytest.approx(float(MU.weights @ L))
    x1 = np.repeat(MU.particles, 3, 0)
    x2 = np.tile(MU.particles, (3, 1))
    Mv = M_operator(phi, model, MU, 0.0, x1, x2).reshape(3, 3)
    off = (Mv.sum() - np.trace(Mv)) / 6
    assert gt.pair_bracket == pytest.approx(off)


# Bellman residual


def test_hjb_constant_value_zero():
    r = hjb_residual(problem(scalar_model(0.2, 1.0, 1.0)), constant_value_function(3.0), 0.5, MU)
    assert r.residual == 0.0 and r.terminal_gap == 3.0


def test_hjb_terminal_gap_zero_for_g():
    p = problem(scalar_model(0.0, 1.0, 1.0), terminal={"kind": "tanh"})
    assert hjb_residual(p, moment_value_function(tanh_fn()), 1.0, MU).terminal_gap == 0.0


def test_hjb_linear_drift_exact():
    p = drift_control_problem()
    r = hjb_residual(p, linear_drift_value_function(1.0), 0.3, MU)
    assert r.residual == pytest.approx(0.0, abs=1e-12)
    assert r.action == 1.0 and r.action_index == 1


def test_ties_go_to_lowest_index():
    assert best_action(np.array([1.0, 1.0])) == 0
    assert best_action(np.array([1.0, 1.0 + 1e-14])) == 0
    assert best_action(np.array([1.0, 1.1])) == 1
    sym = EmpiricalConditionalLaw.from_particles([-1.0, 1.0])
    r = hjb_residual(symmetric_control_problem(), moment_value_function(square_fn()), 0.0, sym)
    assert r.hamiltonians[0] == r.hamiltonians[1]
    assert r.action_index == 0


def test_problem_validation():
    with pytest.raises(InvalidArgument):
        problem(scalar_model(), actions=())
    with pytest.raises(InvalidArgument):
        drift_control_problem().index(7.0)
    with pytest.raises(InvalidArgument):
        simulate_controlled(drift_control_problem(T=2.0), constant_policy(0.0), build_time_grid(1.0, 4), 1, 2)


def test_growth_check():
    assert drift_control_problem().growth_check().passed
    tight = ControlProblem(scalar_model(), (0.0,), reward_from_spec({"kind": "square"}), terminal_from_spec(None), 1e-3, 1.0)
    assert not tight.growth_check().passed


# controlled simulation and objectives


def test_singleton_action_matches_uncontrolled():
    model = scalar_model(0.1, 1.0, 1.0, intensity=1.0)
    grid = build_time_grid(1.0, 20)
    run = simulate_controlled(problem(model), constant_policy(0.0), grid, 5, 10)
    ref = empirical_conditional_law(model, grid, 5, 10)
    assert np.array_equal(run.flow.paths.values, ref.paths.values)


def test_constant_policy_matches_frozen_action():
    p = drift_control_problem()
    grid = build_time_grid(1.0, 10)
    run = simulate_controlled(p, constant_policy(1.0), grid, 5, 4)
    ids = particle_seeds(5, 4)
    ref = simulate_batch(p.model, grid, 5, ids, np.zeros((4, 1)), policy=lambda k, x: 1.0)
    assert np.array_equal(run.flow.paths.values, ref.values)
    assert run.actions == (1.0,) * 10


def test_actions_are_common_noise_adapted():
    p = drift_control_problem()
    grid = build_time_grid(1.0, 10)
    for pol in (random_policy(p), schedule_policy([0.0, 1.0] * 5)):
        a = simulate_controlled(p, pol, grid, 9, 8).actions
        b = simulate_controlled(p, pol, grid, 9, 8, seeds=[1, 2, 3]).actions
        assert a == b
    run = simulate_controlled(p, random_policy(p), grid, 9, 8, seeds=[1, 2])
    assert run.tracked.M == 2


def test_objective_examples():
    grid = build_time_grid(1.0, 10)
    one = problem(scalar_model(0.0, 1.0, 1.0), terminal={"kind": "constant", "value": 1.0})
    assert objective_estimate(one, constant_policy(0.0), grid, SEEDS[:3], 5).value == 1.0
    run = problem(scalar_model(0.0, 1.0, 1.0), running={"kind": "constant", "value": 1.0})
    assert objective_estimate(run, constant_policy(0.0), grid, SEEDS[:3], 5).value == pytest.approx(1.0, abs=1e-12)
    bm = problem(scalar_model(0.0, 1.0, 0.0), terminal={"kind": "square"})
    est = objective_estimate(bm, constant_policy(0.0), grid, SEEDS, 200)
    assert est.ci[0] - 1e-3 <= 1.0 <= est.ci[1] + 1e-3


# brute-force verification


def test_baseline_schedules():
    s = baseline_schedules((0, 1), 8, [2, 4, 6])
    assert len(s) == 16 and len(set(s)) == 16 and all(len(x) == 8 for x in s)
    assert default_switch_nodes(8) == [2, 4, 6]
    with pytest.raises(InvalidArgument):
        baseline_schedules((0, 1), 8, [1, 2, 3, 4, 5])
    with pytest.raises(InvalidArgument):
        baseline_schedules((0, 1), 8, [0])
    with pytest.raises(InvalidArgument):
        baseline_schedules(tuple(range(20)), 8, [2, 4, 6])


def test_verification_singleton_exact():
    p = problem(scalar_model(0.0, 1.0, 1.0), terminal={"kind": "tanh"})
    rep = verification_check(p, constant_value_function(), build_time_grid(1.0, 8), SEEDS[:5], 10)
    assert rep.passed
    assert rep.details["paired_difference"] == 0.0
    assert rep.details["baseline_size"] == 1


def test_verification_linear_drift():
    p = drift_control_problem()
    rep = verification_check(
        p, linear_drift_value_function(1.0), build_time_grid(1.0, 8), SEEDS[:10], 20, require_identical=True
    )
    assert rep.passed
    assert rep.details["actions_condition"]
    assert rep.details["baseline_policy"] == [1]


def test_verification_flags_suboptimal_candidate():
    # v = -<mu, x> makes the greedy feedback pick a = 0
    p = drift_control_problem()
    v = linear_drift_value_function(1.0).scaled(-1.0)
    rep = verification_check(p, v, build_time_grid(1.0, 8), SEEDS[:10], 20, require_identical=True)
    assert not rep.passed


def test_symmetric_actions_equal_values():
    p = symmetric_control_problem()
    grid = build_time_grid(1.0, 8)
    plus = objective_estimate(p, constant_policy(1.0), grid, SEEDS, 50)
    minus = objective_estimate(p, constant_policy(-1.0), grid, SEEDS, 50)
    diff = np.array(plus.per_seed) - np.array(minus.per_seed)
    mean, lo, hi = mean_ci(diff)
    assert lo - 3 * (hi - lo) <= 0.0 <= hi + 3 * (hi - lo)


def test_controlled_ledger_zero_model_and_finite():
    grid = build_time_grid(1.0, 10)
    zero = problem(scalar_model(0.0, 0.0, 0.0))
    run = simulate_controlled(zero, constant_policy(0.0), grid, 3, 5)
    led = controlled_ledger(moment(tanh_fn()), zero.model, run.flow.paths, run.actions)
    assert led.residual == 0.0
    p = drift_control_problem()
    run = simulate_controlled(p, constant_policy(1.0), grid, 3, 20)
    led = controlled_ledger(cylindrical(power_outer(2), [tanh_fn()]), p.model, run.flow.paths, run.actions)
    assert led.finite()


# backward Kolmogorov oracle


def test_kolmogorov_oracle_and_negative_control():
    p = ou_oracle_problem()
    grid = build_time_grid(1.0, 20)
    ok = kolmogorov_oracle_check(p, grid, SEEDS[:3], 200, nx=401)
    assert ok.passed
    bad = kolmogorov_oracle_check(p, grid, SEEDS[:3], 200, nx=401, value=moment_value_function(tanh_fn()))
    assert not bad.passed and bad.statistic > 10


def test_kolmogorov_oracle_rejects_multiple_actions():
    with pytest.raises(InvalidArgument):
        kolmogorov_oracle_check(drift_control_problem(), build_time_grid(1.0, 4), SEEDS[:1], 5)
