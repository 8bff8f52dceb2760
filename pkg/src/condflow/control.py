"""Controlled jump-diffusions under partial observation.

The observer sees the common noise only, so an admissible feedback maps the
particle cloud (a function of the common seed) to an action that is applied
to every particle.  This module evaluates objectives, the generator
operators ``L`` and ``M`` of the Bellman equation, its residual, a greedy
feedback built from a candidate value function, a brute-force verification
against piecewise-constant policies, and the generator-form Ito ledger along
a controlled flow.

Conventions
-----------
* ``f(x, a)`` maps ``(N, n)`` states to ``(N,)`` rewards, ``g(x)`` likewise.
* The action chosen at node ``k`` acts on ``(t_k, t_{k+1}]``, including the
  jumps assigned to node ``k + 1``.
* Pair averages ``<mu (x) mu, h>`` are distinct-pair U-statistics; a single
  atom falls back to ``h(x, x)``.
* The double-jump part of ``M`` carries the factor ``1/2`` of the controlled
  Ito formula.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import splu

from .copies import InitialSampler, draw_initial
from .core import (
    JumpDiffusionModel,
    PathBatch,
    TimeGrid,
    batch_noise,
    build_time_grid,
    common_increments,
    simulate_with_noise,
)
from .cylindrical import (
    CylindricalFunctional,
    TestFunctionC2b,
    cylindrical,
    direct_sum,
    identity_fn,
    linear_outer,
)
from .errors import InsufficientData, InvalidArgument, NumericalFailure, Unsupported
from .flow import EmpiricalConditionalLaw, MeasureFlow, pair, particle_seeds
from .ito import ToleranceModel, fit_tolerance
from .parallel import parallel_map
from .reporting import CheckReport, mean_ci
from .rng import derive_seed, generator, seed_chain

Reward = Callable[[np.ndarray, object], np.ndarray]
Terminal = Callable[[np.ndarray], np.ndarray]

OPERATOR_BUDGET = 10_000
MAX_BASELINE = 100_000
MAX_SWITCH_NODES = 4


# rewards


def _component(x, i):
    return np.asarray(x, float)[:, i]


def reward_from_spec(spec: dict | None, n: int = 1) -> Reward:
    """Running reward ``f(x, a)`` from a catalog entry.

    Kinds: ``zero``, ``constant`` (``value``), ``identity``, ``square``,
    ``tanh``, ``cos`` (all on ``component``, times ``scale``) and
    ``action_cost`` (``-scale * a**2``).
    """
    spec = dict(spec or {"kind": "zero"})
    kind = spec.pop("kind", "zero")
    scale = float(spec.pop("scale", 1.0))
    comp = int(spec.pop("component", 0))
    value = float(spec.pop("value", 0.0))
    if spec:
        raise InvalidArgument(f"unknown reward parameters {sorted(spec)}")
    if not 0 <= comp < n:
        raise InvalidArgument(f"reward component {comp} outside state dimension {n}")
    shapes = {
        "identity": lambda u: u,
        "square": lambda u: u**2,
        "tanh": np.tanh,
        "cos": np.cos,
    }
    if kind == "zero":
        return lambda x, a: np.zeros(np.asarray(x).shape[0])
    if kind == "constant":
        return lambda x, a: np.full(np.asarray(x).shape[0], value)
    if kind == "action_cost":
        return lambda x, a: np.full(np.asarray(x).shape[0], -scale * float(a) ** 2)
    if kind in shapes:
        h = shapes[kind]
        return lambda x, a: scale * h(_component(x, comp))
    raise InvalidArgument(f"unknown reward kind {kind!r}; known: zero, constant, action_cost, {', '.join(shapes)}")


def terminal_from_spec(spec: dict | None, n: int = 1) -> Terminal:
    """Terminal reward ``g(x)``; same catalog as :func:`reward_from_spec`."""
    f = reward_from_spec(spec, n)
    return lambda x: f(x, None)


# problems and policies


@dataclass(frozen=True)
class ControlProblem:
    """Controlled model, finite action set, rewards and horizon."""

    model: JumpDiffusionModel
    actions: tuple
    running: Reward
    terminal: Terminal
    growth: float
    T: float
    name: str = "control"

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if not self.actions:
            raise InvalidArgument("the action set must be nonempty")
        if not np.isfinite(self.T) or self.T <= 0:
            raise InvalidArgument(f"horizon must be positive, got T={self.T}")

    def index(self, a) -> int:
        for i, b in enumerate(self.actions):
            try:
                if a is b or bool(a == b):
                    return i
            except (TypeError, ValueError):
                continue
        raise InvalidArgument(f"action {a!r} is not in the action set {self.actions}")

    def check_grid(self, grid: TimeGrid):
        if not math.isclose(grid.T, self.T, rel_tol=1e-12):
            raise InvalidArgument(f"grid horizon {grid.T} differs from the problem horizon {self.T}")

    def growth_check(self, n_probes: int = 500, seed: int = 0, scale: float = 5.0) -> CheckReport:
        """``|f| + |g| <= C2 (1 + |x|^2)`` on random probes, for every action."""
        rng = generator(derive_seed(seed, "reward-growth-probes"))
        x = scale * rng.standard_normal((n_probes, self.model.n))
        bound = self.growth * (1.0 + np.sum(x**2, axis=1))
        gx = np.abs(np.asarray(self.terminal(x), float))
        worst = 0.0
        for a in self.actions:
            ratio = (np.abs(np.asarray(self.running(x, a), float)) + gx) / bound
            worst = max(worst, float(np.max(ratio)))
        return CheckReport("reward_growth", worst, 1.0, worst <= 1.0, details={"growth": self.growth})


@dataclass(frozen=True)
class FeedbackPolicy:
    """``rule(k, mu)`` returns the action at node ``k`` given the particle cloud ``mu``."""

    rule: Callable[[int, EmpiricalConditionalLaw], object]
    name: str = "policy"

    def __call__(self, k: int, mu: EmpiricalConditionalLaw):
        return self.rule(k, mu)


def constant_policy(a) -> FeedbackPolicy:
    return FeedbackPolicy(lambda k, mu: a, f"constant({a!r})")


def schedule_policy(actions: Sequence, name: str = "schedule") -> FeedbackPolicy:
    """Open-loop action per node; trivially adapted to the common noise."""
    actions = tuple(actions)
    return FeedbackPolicy(lambda k, mu: actions[k], name)


def random_policy(problem: ControlProblem) -> FeedbackPolicy:
    """Uniform action per node drawn from the common seed's stream."""

    def rule(k, mu):
        rng = generator(derive_seed(mu.common_seed, "random-policy", k))
        return problem.actions[int(rng.integers(len(problem.actions)))]

    return FeedbackPolicy(rule, "uniform-random")


def _closed_loop(problem: ControlProblem, policy: FeedbackPolicy, common_seed: int):
    def step(k, x):
        a = policy(k, EmpiricalConditionalLaw.from_particles(x, common_seed, k))
        return problem.actions[problem.index(a)]

    return step


@dataclass(frozen=True)
class ControlledRun:
    """Particle cloud under feedback, its action path and optional tracked paths."""

    flow: MeasureFlow
    actions: tuple
    tracked: PathBatch | None = None


def simulate_controlled(
    problem: ControlProblem,
    policy: FeedbackPolicy,
    grid: TimeGrid,
    common_seed: int,
    M: int,
    seeds: Sequence[int] | None = None,
    *,
    initial: InitialSampler | None = None,
) -> ControlledRun:
    """Run the closed loop on a cloud of ``M`` particles.

    The cloud's idiosyncratic seeds derive from the common seed, so the action
    path is a function of the common noise alone.  ``seeds`` adds further
    paths driven by the recorded actions; they do not influence the actions.
    """
    problem.check_grid(grid)
    if M < 1:
        raise InvalidArgument(f"need M >= 1, got {M}")
    model = problem.model
    ids = particle_seeds(common_seed, M)
    noise = batch_noise(model, grid, common_seed, ids)
    batch = simulate_with_noise(model, noise, draw_initial(initial, ids, model.n), _closed_loop(problem, policy, common_seed))
    tracked = None
    if seeds is not None:
        seeds = [int(s) for s in seeds]
        actions = batch.actions
        extra = batch_noise(model, grid, common_seed, seeds)
        tracked = simulate_with_noise(model, extra, draw_initial(initial, seeds, model.n), lambda k, x: actions[k])
    return ControlledRun(MeasureFlow(grid, batch, int(common_seed)), batch.actions, tracked)


def path_objective(problem: ControlProblem, batch: PathBatch, actions: Sequence, start: int = 0) -> float:
    """``(1/M) sum_j [sum_{k >= start} f(X^j_k, a_k) dt + g(X^j_K)]``."""
    dt = batch.grid.dt
    total = np.zeros(batch.M)
    for k in range(start, batch.grid.K):
        total += np.asarray(problem.running(batch.values[:, k], actions[k]), float).reshape(batch.M) * dt
    total += np.asarray(problem.terminal(batch.values[:, -1]), float).reshape(batch.M)
    if not np.all(np.isfinite(total)):
        raise NumericalFailure("non-finite objective")
    return float(np.mean(total))


@dataclass(frozen=True)
class ObjectiveEstimate:
    value: float
    ci: tuple
    per_seed: tuple

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci[1] - self.ci[0])


def _estimate(values) -> ObjectiveEstimate:
    mean, lo, hi = mean_ci(values)
    return ObjectiveEstimate(mean, (lo, hi), tuple(float(v) for v in values))


def objective_estimate(
    problem: ControlProblem,
    policy: FeedbackPolicy,
    grid: TimeGrid,
    common_seeds: Sequence[int],
    M: int,
    *,
    start: int = 0,
    initial: InitialSampler | None = None,
    threads: int | None = None,
) -> ObjectiveEstimate:
    """Average over common seeds of the per-cloud objective from node ``start``."""
    common_seeds = list(common_seeds)
    if not common_seeds:
        raise InvalidArgument("objective estimate needs at least one common seed")

    def one(c):
        run = simulate_controlled(problem, policy, grid, int(c), M, initial=initial)
        return path_objective(problem, run.flow.paths, run.actions, start)

    return _estimate(parallel_map(one, common_seeds, threads))


# generator operators


def operator_marks(model: JumpDiffusionModel, budget: int = OPERATOR_BUDGET, stream: int = 0) -> np.ndarray:
    """Fixed mark sample for the nu-integrals; antithetic for symmetric marks."""
    if not model.has_jumps:
        return np.zeros((0, 1 if model.levy is None else model.levy.q))
    key = ("operator-marks", int(budget), int(stream))
    if key not in model._cache:
        rng = generator(seed_chain(0, ("operator-marks", stream), (model.name, 0)))
        if model.levy.symmetric:
            half = model.levy.sample_marks(rng, (budget + 1) // 2)
            marks = np.concatenate([half, -half])[:budget]
        else:
            marks = model.levy.sample_marks(rng, budget)
        model._cache[key] = marks
    return model._cache[key]


def _require_cylindrical(phi):
    if not isinstance(phi, CylindricalFunctional):
        raise Unsupported("the generator operators are implemented for cylindrical functionals")


def _points(x, n: int) -> np.ndarray:
    x = np.asarray(x, float)
    return x.reshape(-1, n) if x.ndim != 2 else x


def _jump_increment(phi: CylindricalFunctional, model: JumpDiffusionModel, x, a, marks, chunk: int = 1 << 20):
    """``E_theta[g(x + beta)] - g(x)`` of shape ``(N, m)`` and ``E_theta[beta]`` of shape ``(N, n)``."""
    N, n = x.shape
    B = marks.shape[0]
    dg = np.empty((N, phi.m))
    mb = np.empty((N, n))
    step = max(1, chunk // max(B, 1))
    g0 = phi.test_values(x)
    for s in range(0, N, step):
        xs = x[s : s + step]
        ns = xs.shape[0]
        xr = np.repeat(xs, B, axis=0)
        beta = np.asarray(model.beta(xr, a, np.tile(marks, (ns, 1))), float).reshape(ns * B, n)
        gp = phi.test_values(xr + beta).reshape(ns, B, phi.m)
        dg[s : s + ns] = gp.mean(axis=1) - g0[s : s + ns]
        mb[s : s + ns] = beta.reshape(ns, B, n).mean(axis=1)
    if not (np.all(np.isfinite(dg)) and np.all(np.isfinite(mb))):
        raise NumericalFailure("non-finite jump integrand")
    return dg, mb


def _outer(phi, mu, y):
    return phi.derivatives(mu, phi._y(y))


def L_operator(
    phi: CylindricalFunctional,
    model: JumpDiffusionModel,
    mu,
    a,
    x,
    *,
    y=None,
    budget: int = OPERATOR_BUDGET,
) -> np.ndarray:
    """``(L^{mu,a} Phi)(x)`` at each row of ``x``."""
    _require_cylindrical(phi)
    x = _points(x, model.n)
    od = _outer(phi, mu, y)
    feats = phi.features(x)
    b, sv, sw = model.coefficients(x, a)
    cov = np.einsum("nid,njd->nij", sv, sv) + np.einsum("nid,njd->nij", sw, sw)
    first = np.einsum("nmd,nd->nm", feats.dg, b)
    second = 0.5 * np.einsum("nmij,nij->nm", feats.d2g, cov)
    out = (first + second) @ od.dz
    if model.has_jumps:
        dg, mb = _jump_increment(phi, model, x, a, operator_marks(model, budget))
        comp = dg - np.einsum("nmd,nd->nm", feats.dg, mb)
        out = out + model.levy.intensity * (comp @ od.dz)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite L operator")
    return out


def M_operator(
    phi: CylindricalFunctional,
    model: JumpDiffusionModel,
    mu,
    a,
    x1,
    x2,
    *,
    y=None,
    budget: int = OPERATOR_BUDGET,
    double_jump: bool = True,
) -> np.ndarray:
    """``(M^{mu,a} Phi)(x1, x2)`` row by row.

    The double nu-integral factorises for cylindrical functionals; the two
    mark slots use independent samples.
    """
    _require_cylindrical(phi)
    x1, x2 = _points(x1, model.n), _points(x2, model.n)
    if x1.shape != x2.shape:
        raise InvalidArgument("M operator needs matching point batches")
    od = _outer(phi, mu, y)
    u1 = _common_loadings(phi, model, x1, a)
    u2 = _common_loadings(phi, model, x2, a)
    out = 0.5 * np.einsum("nic,ij,njc->n", u1, od.dzz, u2)
    if double_jump and model.has_jumps:
        lam = model.levy.intensity
        d1, _ = _jump_increment(phi, model, x1, a, operator_marks(model, budget, 0))
        d2, _ = _jump_increment(phi, model, x2, a, operator_marks(model, budget, 1))
        out = out + 0.5 * lam**2 * np.einsum("ni,ij,nj->n", d1, od.dzz, d2)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite M operator")
    return out


def _common_loadings(phi, model, x, a) -> np.ndarray:
    """``grad g_i(x)^T sigma_W(x, a)``, shape ``(N, m, d_c)``."""
    _, _, sw = model.coefficients(x, a)
    return np.einsum("nmd,ndc->nmc", phi.features(x).dg, sw)


def _pair_form(w: np.ndarray, u: np.ndarray, v: np.ndarray, H: np.ndarray) -> float:
    """Weighted distinct-pair average of ``sum_c u_i(x)_c H_ij v_j(x')_c``.

    ``u`` and ``v`` have shape ``(N, m, e)``.
    """
    su = np.einsum("n,nme->me", w, u)
    sv = np.einsum("n,nme->me", w, v)
    full = float(np.einsum("ie,ij,je->", su, H, sv))
    diag = float(np.einsum("n,nie,ij,nje->", w**2, u, H, v))
    norm = 1.0 - float(np.sum(w**2))
    if norm <= 1e-15:
        return float(np.einsum("n,nie,ij,nje->", w, u, H, v))
    return (full - diag) / norm


@dataclass(frozen=True)
class GeneratorTerms:
    """Measure-averaged pieces of ``<mu, L Phi> + <mu (x) mu, M Phi>``."""

    drift_diffusion: float
    jump_compensator: float
    pair_bracket: float
    pair_jump: float

    @property
    def total(self) -> float:
        return math.fsum((self.drift_diffusion, self.jump_compensator, self.pair_bracket, self.pair_jump))


def generator_terms(
    phi: CylindricalFunctional,
    model: JumpDiffusionModel,
    mu,
    a,
    *,
    y=None,
    budget: int = OPERATOR_BUDGET,
    double_jump: bool = True,
) -> GeneratorTerms:
    """``<mu, L^{mu,a} Phi>`` split into parts, and the pair average of ``M^{mu,a} Phi``."""
    _require_cylindrical(phi)
    if not isinstance(mu, EmpiricalConditionalLaw):
        mu = EmpiricalConditionalLaw.from_particles(mu)
    x, w = mu.particles, mu.weights
    od = _outer(phi, mu, y)
    feats = phi.features(x)
    b, sv, sw = model.coefficients(x, a)
    cov = np.einsum("nid,njd->nij", sv, sv) + np.einsum("nid,njd->nij", sw, sw)
    local = np.einsum("nmd,nd->nm", feats.dg, b) + 0.5 * np.einsum("nmij,nij->nm", feats.d2g, cov)
    drift_diffusion = float(w @ (local @ od.dz))
    u = np.einsum("nmd,ndc->nmc", feats.dg, sw)
    pair_bracket = 0.5 * _pair_form(w, u, u, od.dzz)
    jump_comp = pair_jump = 0.0
    if model.has_jumps:
        lam = model.levy.intensity
        d1, mb = _jump_increment(phi, model, x, a, operator_marks(model, budget, 0))
        jump_comp = lam * float(w @ ((d1 - np.einsum("nmd,nd->nm", feats.dg, mb)) @ od.dz))
        if double_jump:
            d2, _ = _jump_increment(phi, model, x, a, operator_marks(model, budget, 1))
            pair_jump = 0.5 * lam**2 * _pair_form(w, d1[:, :, None], d2[:, :, None], od.dzz)
    terms = GeneratorTerms(drift_diffusion, jump_comp, pair_bracket, pair_jump)
    if not math.isfinite(terms.total):
        raise NumericalFailure("non-finite generator terms")
    return terms


# value functions and the Bellman residual


@dataclass(frozen=True)
class ValueFunction:
    """Candidate ``v(t, mu)``: a cylindrical functional per time and its time derivative."""

    at: Callable[[float], CylindricalFunctional]
    time_derivative: Callable[[float, EmpiricalConditionalLaw], float]
    name: str = "v"

    def value(self, t: float, mu) -> float:
        return self.at(t).value(mu)

    def __add__(self, other: "ValueFunction") -> "ValueFunction":
        return ValueFunction(
            lambda t: direct_sum(self.at(t), other.at(t)),
            lambda t, mu: self.time_derivative(t, mu) + other.time_derivative(t, mu),
            f"{self.name}+{other.name}",
        )

    def scaled(self, c: float) -> "ValueFunction":
        return ValueFunction(
            lambda t: cylindrical(self.at(t).f.scaled(c), self.at(t).g, self.at(t).d),
            lambda t, mu: c * self.time_derivative(t, mu),
            f"{c}*{self.name}",
        )


def constant_value_function(c: float = 0.0, d: int = 1) -> ValueFunction:
    phi = cylindrical(linear_outer([0.0], c=c), [identity_fn(d)], d)
    return ValueFunction(lambda t: phi, lambda t, mu: 0.0, f"const({c})")


def linear_drift_value_function(T: float, slope: float = 1.0, d: int = 1) -> ValueFunction:
    """``v(t, mu) = <mu, x_1> + slope (T - t)``."""
    test = identity_fn(d)
    return ValueFunction(
        lambda t: cylindrical(linear_outer([1.0], c=slope * (T - t)), [test], d),
        lambda t, mu: -slope,
        "linear-drift",
    )


def moment_value_function(test: TestFunctionC2b, c: Callable[[float], float] = lambda t: 0.0, dc=lambda t: 0.0) -> ValueFunction:
    """``v(t, mu) = <mu, test> + c(t)``."""
    return ValueFunction(
        lambda t: cylindrical(linear_outer([1.0], c=c(t)), [test], test.d),
        lambda t, mu: dc(t),
        f"moment({test.name})",
    )


@dataclass(frozen=True)
class HJBResult:
    residual: float
    time_derivative: float
    hamiltonians: tuple
    action: object
    action_index: int
    terminal_gap: float


def hamiltonians(
    problem: ControlProblem,
    phi: CylindricalFunctional,
    mu,
    *,
    budget: int = OPERATOR_BUDGET,
    double_jump: bool = True,
) -> np.ndarray:
    """``<mu, f(., a) + L^{mu,a} Phi> + <mu (x) mu, M^{mu,a} Phi>`` for every action."""
    if not isinstance(mu, EmpiricalConditionalLaw):
        mu = EmpiricalConditionalLaw.from_particles(mu)
    out = []
    for a in problem.actions:
        running = pair(mu, lambda x: problem.running(x, a))
        out.append(running + generator_terms(phi, problem.model, mu, a, budget=budget, double_jump=double_jump).total)
    return np.array(out)


def best_action(values: np.ndarray, tie_tol: float = 1e-12) -> int:
    """Index of the maximum; values within ``tie_tol`` (relative) of it tie and the lowest index wins."""
    top = float(np.max(values))
    tol = tie_tol * max(1.0, abs(top))
    return int(np.flatnonzero(values >= top - tol)[0])


def hjb_residual(
    problem: ControlProblem,
    v: ValueFunction,
    t: float,
    mu,
    *,
    budget: int = OPERATOR_BUDGET,
    double_jump: bool = True,
    tie_tol: float = 1e-12,
) -> HJBResult:
    """``d_t v + max_a H(a)`` with the maximiser and the terminal gap ``|v(T, mu) - <mu, g>|``."""
    if not isinstance(mu, EmpiricalConditionalLaw):
        mu = EmpiricalConditionalLaw.from_particles(mu)
    H = hamiltonians(problem, v.at(t), mu, budget=budget, double_jump=double_jump)
    i = best_action(H, tie_tol)
    dtv = float(v.time_derivative(t, mu))
    gap = abs(v.value(problem.T, mu) - pair(mu, problem.terminal))
    return HJBResult(dtv + float(H[i]), dtv, tuple(float(h) for h in H), problem.actions[i], i, gap)


def greedy_policy(problem: ControlProblem, v: ValueFunction, grid: TimeGrid, **kwargs) -> FeedbackPolicy:
    """Feedback maximising the Hamiltonian of ``v`` at each node."""
    problem.check_grid(grid)

    def rule(k, mu):
        H = hamiltonians(problem, v.at(float(grid.nodes[k])), mu, **{k2: kwargs[k2] for k2 in ("budget", "double_jump") if k2 in kwargs})
        return problem.actions[best_action(H, kwargs.get("tie_tol", 1e-12))]

    return FeedbackPolicy(rule, f"greedy({v.name})")


# generator-form Ito ledger along a controlled flow

GENERATOR_TERMS = ("drift_diffusion", "jump_compensator", "pair_bracket", "pair_jump", "common_martingale")


@dataclass(frozen=True)
class GeneratorLedger:
    """``Phi(mu_t) - Phi(mu_0)`` against the generator-form right-hand side."""

    lhs: float
    terms: dict
    common_seed: int
    K: int
    M: int
    t_index: int

    @property
    def residual(self) -> float:
        return self.lhs - math.fsum(self.terms[k] for k in GENERATOR_TERMS)

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.lhs, *self.terms.values()))

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "terms": dict(self.terms),
            "residual": self.residual,
            "common_seed": self.common_seed,
            "K": self.K,
            "M": self.M,
            "t_index": self.t_index,
        }


def controlled_ledger(
    phi: CylindricalFunctional,
    model: JumpDiffusionModel,
    paths: PathBatch,
    actions: Sequence,
    *,
    t_index: int | None = None,
    budget: int = OPERATOR_BUDGET,
    double_jump: bool = True,
) -> GeneratorLedger:
    """Ledger of the controlled Ito formula on one cloud; the cloud is its own copy pool.

    Integrands are frozen at the left node of each step; ``dW0`` is replayed
    from the cloud's common seed.
    """
    _require_cylindrical(phi)
    if model.common_jumps:
        raise Unsupported("the generator form assumes idiosyncratic jumps")
    grid = paths.grid
    K = grid.K if t_index is None else int(t_index)
    if not 0 <= K <= grid.K:
        raise InvalidArgument(f"t_index {K} outside 0..{grid.K}")
    dW0 = common_increments(grid, model.d_c, paths.common_seed)
    acc = {name: [] for name in GENERATOR_TERMS}
    for k in range(K):
        mu = EmpiricalConditionalLaw.from_particles(paths.values[:, k], paths.common_seed, k)
        gt = generator_terms(phi, model, mu, actions[k], budget=budget, double_jump=double_jump)
        dt = grid.dt
        acc["drift_diffusion"].append(gt.drift_diffusion * dt)
        acc["jump_compensator"].append(gt.jump_compensator * dt)
        acc["pair_bracket"].append(gt.pair_bracket * dt)
        acc["pair_jump"].append(gt.pair_jump * dt)
        od = _outer(phi, mu, None)
        u = _common_loadings(phi, model, mu.particles, actions[k])
        acc["common_martingale"].append(float(od.dz @ (np.einsum("n,nmc->mc", mu.weights, u) @ dW0[k])))
    lhs = phi.value(paths.values[:, K]) - phi.value(paths.values[:, 0])
    terms = {name: math.fsum(vals) for name, vals in acc.items()}
    return GeneratorLedger(lhs, terms, paths.common_seed, grid.K, paths.M, K)


def controlled_ledgers(
    phi: CylindricalFunctional,
    problem: ControlProblem,
    policy: FeedbackPolicy,
    grid: TimeGrid,
    common_seeds: Sequence[int],
    M: int,
    *,
    initial: InitialSampler | None = None,
    threads: int | None = None,
    **kwargs,
) -> list[GeneratorLedger]:
    def one(c):
        run = simulate_controlled(problem, policy, grid, int(c), M, initial=initial)
        return controlled_ledger(phi, problem.model, run.flow.paths, run.actions, **kwargs)

    return parallel_map(one, list(common_seeds), threads)


def controlled_pilot_tolerance(
    phi: CylindricalFunctional,
    problem: ControlProblem,
    policy: FeedbackPolicy | Callable[[TimeGrid], FeedbackPolicy],
    K_levels: Sequence[int],
    M_levels: Sequence[int],
    common_seeds: Sequence[int],
    *,
    initial: InitialSampler | None = None,
    threads: int | None = None,
    **kwargs,
) -> ToleranceModel:
    """Fit ``a dt^(1/2) + b M^(-1/2)`` to pilot ledgers along the controlled flow.

    ``policy`` is either a feedback policy or a factory ``grid -> policy`` for
    policies tied to one grid, such as the greedy feedback.
    """
    points = []
    for K in K_levels:
        grid = build_time_grid(problem.T, K)
        pol = policy if isinstance(policy, FeedbackPolicy) else policy(grid)
        for M in M_levels:
            ledgers = controlled_ledgers(phi, problem, pol, grid, common_seeds, M, initial=initial, threads=threads, **kwargs)
            points.append((grid.dt, M, float(np.mean([abs(l.residual) for l in ledgers]))))
    return fit_tolerance(points)


# brute-force verification


def baseline_schedules(actions: Sequence, K: int, switch_nodes: Sequence[int]) -> list[tuple]:
    """All piecewise-constant action paths switching only at ``switch_nodes``."""
    nodes = sorted({int(s) for s in switch_nodes})
    if len(nodes) > MAX_SWITCH_NODES:
        raise InvalidArgument(f"at most {MAX_SWITCH_NODES} switch nodes, got {len(nodes)}")
    if any(not 0 < s < K for s in nodes):
        raise InvalidArgument(f"switch nodes must lie strictly inside 0..{K}")
    count = len(actions) ** (len(nodes) + 1)
    if count > MAX_BASELINE:
        raise InvalidArgument(f"baseline has {count} policies, more than {MAX_BASELINE}")
    bounds = [0] + nodes + [K]
    out = []
    for combo in itertools.product(range(len(actions)), repeat=len(nodes) + 1):
        path = []
        for seg, i in enumerate(combo):
            path += [actions[i]] * (bounds[seg + 1] - bounds[seg])
        out.append(tuple(path))
    return out


def default_switch_nodes(K: int, count: int = 3) -> list[int]:
    return sorted({int(round(K * (i + 1) / (count + 1))) for i in range(count)} - {0, K})


@dataclass(frozen=True)
class _SeedVerification:
    greedy_value: float
    greedy_actions: tuple
    baseline_values: tuple
    ledger: GeneratorLedger | None


def verification_check(
    problem: ControlProblem,
    v: ValueFunction,
    grid: TimeGrid,
    common_seeds: Sequence[int],
    M: int,
    *,
    switch_nodes: Sequence[int] | None = None,
    initial: InitialSampler | None = None,
    ledger_functional: CylindricalFunctional | None = None,
    ledger_tolerance: ToleranceModel | None = None,
    budget: int = OPERATOR_BUDGET,
    double_jump: bool = True,
    ci_factor: float = 3.0,
    require_identical: bool = False,
    threads: int | None = None,
) -> CheckReport:
    """Greedy feedback from ``v`` against every piecewise-constant baseline.

    All policies of one common seed run on the same pre-drawn noise.  The
    comparison uses the paired per-seed differences: the greedy value must
    exceed the best baseline minus ``ci_factor`` times the 95% half-width of
    their mean difference.  The ledger of the controlled Ito formula along
    the greedy flow is reported and, given ``ledger_tolerance``, checked.
    With ``require_identical`` the greedy action path must also coincide
    node-wise with the best baseline on every seed.
    """
    problem.check_grid(grid)
    schedules = baseline_schedules(problem.actions, grid.K, default_switch_nodes(grid.K) if switch_nodes is None else switch_nodes)
    policy = greedy_policy(problem, v, grid, budget=budget, double_jump=double_jump)
    phi_ledger = ledger_functional if ledger_functional is not None else v.at(0.0)
    model = problem.model
    common_seeds = [int(c) for c in common_seeds]
    if not common_seeds:
        raise InsufficientData("verification needs at least one common seed")

    def one(c):
        ids = particle_seeds(c, M)
        noise = batch_noise(model, grid, c, ids)
        x0 = draw_initial(initial, ids, model.n)
        batch = simulate_with_noise(model, noise, x0, _closed_loop(problem, policy, c))
        greedy = path_objective(problem, batch, batch.actions)
        base = []
        for sched in schedules:
            b = simulate_with_noise(model, noise, x0, lambda k, x, s=sched: s[k])
            base.append(path_objective(problem, b, sched))
        ledger = None
        if M >= 2:
            ledger = controlled_ledger(phi_ledger, model, batch, batch.actions, budget=budget, double_jump=double_jump)
        return _SeedVerification(greedy, batch.actions, tuple(base), ledger)

    results = parallel_map(one, common_seeds, threads)
    greedy_vals = np.array([r.greedy_value for r in results])
    base_vals = np.array([r.baseline_values for r in results])
    base_means = base_vals.mean(axis=0)
    best = best_action(base_means)
    diff = greedy_vals - base_vals[:, best]
    d_mean, d_lo, d_hi = mean_ci(diff)
    half = 0.5 * (d_hi - d_lo)
    g_mean, g_lo, g_hi = mean_ci(greedy_vals)
    value_ok = bool(d_mean >= -ci_factor * half)
    identical = [r.greedy_actions == schedules[best] for r in results]
    details = {
        "greedy_value": g_mean,
        "ci": [g_lo, g_hi],
        "baseline_best": float(base_means[best]),
        "baseline_policy_id": int(best),
        "baseline_policy": [problem.index(a) for a in _segments(schedules[best])],
        "baseline_size": len(schedules),
        "paired_difference": d_mean,
        "paired_half_width": half,
        "actions_identical_fraction": float(np.mean(identical)),
        "value_condition": value_ok,
    }
    passed = value_ok
    if require_identical:
        details["actions_condition"] = bool(all(identical))
        passed = passed and details["actions_condition"]
    ledgers = [r.ledger for r in results if r.ledger is not None]
    if ledgers:
        res = np.abs([l.residual for l in ledgers])
        details["ito_residual"] = float(np.mean(res))
        details["ito_residual_max"] = float(np.max(res))
        if ledger_tolerance is not None:
            budget_value = ledger_tolerance.budget(grid.dt, M)
            details["ito_budget"] = budget_value
            ledger_ok = bool(np.mean(res) <= budget_value and all(l.finite() for l in ledgers))
            details["ito_condition"] = ledger_ok
            passed = passed and ledger_ok
    return CheckReport(
        name="verification",
        statistic=d_mean,
        threshold=-ci_factor * half,
        passed=passed,
        n_common=len(common_seeds),
        n_copies=M,
        seeds=common_seeds,
        details=details,
    )


def _segments(path: Sequence) -> list:
    out = []
    for a in path:
        if not out or not (out[-1] is a or out[-1] == a):
            out.append(a)
    return out


# example problems


def drift_control_problem(
    T: float = 1.0, sigma_v: float = 1.0, sigma_w: float = 1.0, actions=(0.0, 1.0), running: dict | None = None, terminal: dict | None = None
) -> ControlProblem:
    """``b(x, a) = a``, constant diffusions, ``f = 0`` and ``g = x`` by default."""
    from .models import model_from_spec

    model = model_from_spec(
        {
            "n": 1,
            "d_i": 1,
            "d_c": 1,
            "drift": {"kind": "action", "scale": 1.0},
            "sigma_v": {"kind": "constant", "value": sigma_v},
            "sigma_w": {"kind": "constant", "value": sigma_w},
            "lipschitz": max(1.0, max(abs(float(a)) for a in actions) + abs(sigma_v) + abs(sigma_w)),
            "name": "drift-control",
        }
    )
    f = reward_from_spec(running or {"kind": "zero"})
    g = terminal_from_spec(terminal or {"kind": "identity"})
    return ControlProblem(model, tuple(actions), f, g, growth=1.0, T=T, name="drift-control")


def symmetric_control_problem(T: float = 1.0, sigma_v: float = 1.0, sigma_w: float = 1.0) -> ControlProblem:
    """Actions ``-1, +1`` enter the drift oddly; ``g = x^2`` is even."""
    return drift_control_problem(T, sigma_v, sigma_w, actions=(-1.0, 1.0), terminal={"kind": "square"})


# backward Kolmogorov oracle


@dataclass(frozen=True)
class KolmogorovSolution:
    """Crank-Nicolson solution ``u(t, x)`` of ``u_t + b u_x + s^2/2 u_xx + f = 0``, ``u(T) = g``."""

    x: np.ndarray
    t: np.ndarray
    u: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def index(self, t: float) -> int:
        j = int(round(t / self.dt))
        if not (0 <= j < self.t.size and math.isclose(self.t[j], t, rel_tol=1e-9, abs_tol=1e-12)):
            raise InvalidArgument(f"time {t} is not a node of the oracle grid")
        return j

    def slice_function(self, j: int) -> TestFunctionC2b:
        sp = CubicSpline(self.x, self.u[j])
        return TestFunctionC2b(
            f"u[{j}]",
            1,
            lambda x: sp(x[:, 0]),
            lambda x: sp(x[:, 0], 1)[:, None],
            lambda x: sp(x[:, 0], 2)[:, None, None],
        )

    def time_slope(self, j: int) -> np.ndarray:
        """``u_t`` on the space grid, central in the interior, one-sided second order at the ends."""
        u, h = self.u, self.dt
        if 0 < j < self.t.size - 1:
            return (u[j + 1] - u[j - 1]) / (2 * h)
        if j == 0:
            return (-3 * u[0] + 4 * u[1] - u[2]) / (2 * h)
        return (3 * u[j] - 4 * u[j - 1] + u[j - 2]) / (2 * h)

    def time_derivative(self, j: int, x) -> np.ndarray:
        sp = CubicSpline(self.x, self.time_slope(j))
        return sp(np.asarray(x, float).reshape(-1))


def solve_backward_kolmogorov(
    drift: Callable[[np.ndarray], np.ndarray],
    variance: Callable[[np.ndarray], np.ndarray],
    running: Callable[[np.ndarray], np.ndarray],
    terminal: Callable[[np.ndarray], np.ndarray],
    T: float,
    *,
    x_max: float = 8.0,
    nx: int = 801,
    nt: int = 800,
) -> KolmogorovSolution:
    """Crank-Nicolson in time, central differences in space.

    ``variance`` is the total ``s^2(x)``.  At the two boundary nodes the
    second derivative is dropped and the first is one-sided towards the
    interior.
    """
    x = np.linspace(-x_max, x_max, nx)
    h = x[1] - x[0]
    tau = T / nt
    b = np.asarray(drift(x), float)
    s2 = np.asarray(variance(x), float)
    lower = -b[1:-1] / (2 * h) + 0.5 * s2[1:-1] / h**2
    diag = -s2[1:-1] / h**2
    upper = b[1:-1] / (2 * h) + 0.5 * s2[1:-1] / h**2
    rows = np.r_[0, 0, np.repeat(np.arange(1, nx - 1), 3), nx - 1, nx - 1]
    cols = np.r_[0, 1, np.column_stack([np.arange(0, nx - 2), np.arange(1, nx - 1), np.arange(2, nx)]).ravel(), nx - 2, nx - 1]
    vals = np.r_[-b[0] / h, b[0] / h, np.column_stack([lower, diag, upper]).ravel(), -b[-1] / h, b[-1] / h]
    A = sparse.csc_matrix((vals, (rows, cols)), shape=(nx, nx))
    eye = sparse.identity(nx, format="csc")
    lu = splu((eye - 0.5 * tau * A).tocsc())
    rhs_op = (eye + 0.5 * tau * A).tocsr()
    f = np.asarray(running(x), float)
    u = np.empty((nt + 1, nx))
    u[nt] = np.asarray(terminal(x), float)
    for j in range(nt, 0, -1):
        u[j - 1] = lu.solve(rhs_op @ u[j] + tau * f)
    if not np.all(np.isfinite(u)):
        raise NumericalFailure("non-finite Kolmogorov solution")
    return KolmogorovSolution(x, np.linspace(0.0, T, nt + 1), u)


def kolmogorov_value_function(sol: KolmogorovSolution) -> ValueFunction:
    """``v(t, mu) = <mu, u(t, .)>`` with ``d_t v`` from the oracle's time differences."""
    cache: dict = {}

    def at(t):
        j = sol.index(t)
        if j not in cache:
            cache[j] = cylindrical(linear_outer([1.0], c=0.0), [sol.slice_function(j)], 1)
        return cache[j]

    def dtv(t, mu):
        j = sol.index(t)
        return pair(mu, lambda x: sol.time_derivative(j, x))

    return ValueFunction(at, dtv, "kolmogorov")


def scalar_pde_data(problem: ControlProblem):
    """Drift, total variance and rewards of a one-dimensional single-action problem."""
    if problem.model.n != 1 or len(problem.actions) != 1:
        raise InvalidArgument("the PDE oracle needs n = 1 and a single action")
    if problem.model.has_jumps:
        raise Unsupported("the PDE oracle covers diffusions only")
    a = problem.actions[0]
    model = problem.model

    def coef(x):
        return model.coefficients(np.asarray(x, float)[:, None], a)

    return (
        lambda x: coef(x)[0][:, 0],
        lambda x: np.sum(coef(x)[1][:, 0] ** 2, axis=1) + np.sum(coef(x)[2][:, 0] ** 2, axis=1),
        lambda x: np.asarray(problem.running(np.asarray(x, float)[:, None], a), float),
        lambda x: np.asarray(problem.terminal(np.asarray(x, float)[:, None]), float),
    )


def kolmogorov_oracle_check(
    problem: ControlProblem,
    grid: TimeGrid,
    common_seeds: Sequence[int],
    M: int,
    *,
    nodes: Sequence[int] | None = None,
    initial: InitialSampler | None = None,
    x_max: float = 8.0,
    nx: int = 801,
    nt_per_step: int = 8,
    value: ValueFunction | None = None,
    threads: int | None = None,
) -> CheckReport:
    """Bellman residual of the PDE-oracle value function on simulated clouds.

    The oracle is solved at two resolutions; at each probed cloud the
    candidate's residual must stay below ``|r_coarse - r_fine|`` (the oracle
    error estimate) plus three standard errors of the particle average.  The
    statistic is the largest ratio of residual to tolerance.  The candidate
    is the fine oracle unless ``value`` is given, which gives negative
    controls.
    """
    problem.check_grid(grid)
    if nt_per_step % 2:
        raise InvalidArgument("nt_per_step must be even so the coarse oracle shares the grid nodes")
    b, s2, f, g = scalar_pde_data(problem)
    fine = solve_backward_kolmogorov(b, s2, f, g, problem.T, x_max=x_max, nx=nx, nt=nt_per_step * grid.K)
    coarse = solve_backward_kolmogorov(b, s2, f, g, problem.T, x_max=x_max, nx=(nx + 1) // 2, nt=nt_per_step * grid.K // 2)
    v_fine = kolmogorov_value_function(fine)
    v_coarse = kolmogorov_value_function(coarse)
    candidate = value if value is not None else v_fine
    a = problem.actions[0]
    nodes = list(range(0, grid.K, max(1, grid.K // 10))) if nodes is None else list(nodes)
    policy = constant_policy(a)

    def pointwise(v, t, x):
        phi = v.at(t)
        mu = EmpiricalConditionalLaw.from_particles(x)
        local = L_operator(phi, problem.model, mu, a, x) + np.asarray(problem.running(x, a), float)
        return local, v.time_derivative(t, mu)

    def one(c):
        run = simulate_controlled(problem, policy, grid, int(c), M, initial=initial)
        rows = []
        for k in nodes:
            t = float(grid.nodes[k])
            mu = run.flow.law(k)
            r = hjb_residual(problem, candidate, t, mu).residual
            rf = r if candidate is v_fine else hjb_residual(problem, v_fine, t, mu).residual
            rc = hjb_residual(problem, v_coarse, t, mu).residual
            local, _ = pointwise(v_fine, t, mu.particles)
            dt_local = fine.time_derivative(fine.index(t), mu.particles[:, 0])
            spread = float(np.std(local + dt_local, ddof=1)) / math.sqrt(M) if M > 1 else 0.0
            tol = abs(rc - rf) + 3.0 * spread
            rows.append((int(c), k, r, rc, tol))
        return rows

    rows = [r for block in parallel_map(one, list(common_seeds), threads) for r in block]
    ratios = np.array([abs(r[2]) / r[4] if r[4] > 0 else (0.0 if r[2] == 0 else math.inf) for r in rows])
    worst = float(np.max(ratios))
    return CheckReport(
        name="hjb_oracle",
        statistic=worst,
        threshold=1.0,
        passed=worst <= 1.0,
        n_common=len(common_seeds),
        n_copies=M,
        seeds=list(common_seeds),
        details={
            "max_abs_residual": float(max(abs(r[2]) for r in rows)),
            "max_tolerance": float(max(r[4] for r in rows)),
            "nodes": nodes,
            "oracle": {"x_max": x_max, "nx": nx, "nt": nt_per_step * grid.K},
        },
    )


def ou_oracle_problem(T: float = 1.0, running: dict | None = None, terminal: dict | None = None) -> ControlProblem:
    """Single-action problem ``b = -x/2``, ``sigma = 1`` with bounded rewards."""
    from .models import model_from_spec

    model = model_from_spec(
        {
            "n": 1,
            "d_i": 1,
            "d_c": 1,
            "drift": {"kind": "linear", "slope": -0.5},
            "sigma_v": {"kind": "constant", "value": 1.0},
            "sigma_w": {"kind": "constant", "value": 0.0},
            "name": "ou-oracle",
        }
    )
    f = reward_from_spec(running or {"kind": "cos"})
    g = terminal_from_spec(terminal or {"kind": "tanh"})
    return ControlProblem(model, (0.0,), f, g, growth=2.0, T=T, name="ou-oracle")
