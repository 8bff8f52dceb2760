"""Conditionally independent copies given the common noise.

A copy shares the common-noise realisation of its ensemble and resamples
the idiosyncratic noise and initial condition.  Conditioning on the common
sigma-algebra therefore means "fix the common seed, vary the idiosyncratic
seeds"; no conditional distribution is ever constructed explicitly.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .core import JumpDiffusionModel, PathBatch, PathRecord, TimeGrid, simulate_batch
from .errors import InsufficientData, InvalidArgument
from .reporting import CheckReport, studentized_mean
from .rng import derive_seed, generator

InitialSampler = Callable[[np.random.Generator, int], np.ndarray]


def constant_initial(x0) -> InitialSampler:
    x0 = np.atleast_1d(np.asarray(x0, float))

    def sampler(rng, size):
        return np.broadcast_to(x0, (size, x0.size)).copy()

    sampler.constant = x0
    return sampler


def gaussian_initial(mean, std) -> InitialSampler:
    mean = np.atleast_1d(np.asarray(mean, float))
    std = np.broadcast_to(np.asarray(std, float), mean.shape)

    def sampler(rng, size):
        return mean + std * rng.standard_normal((size, mean.size))

    return sampler


def draw_initial(sampler: InitialSampler | None, seeds: Sequence[int], n: int) -> np.ndarray:
    """One initial state per member, each from the member's own stream."""
    if sampler is None:
        return np.zeros((len(seeds), n))
    const = getattr(sampler, "constant", None)
    if const is not None:
        return np.broadcast_to(const, (len(seeds), n)).copy()
    out = np.empty((len(seeds), n))
    for j, s in enumerate(seeds):
        out[j] = np.asarray(sampler(generator(derive_seed(s, "initial")), 1), float).reshape(n)
    return out


def copy_seeds(base_seed: int, n: int, tag: str = "copy") -> list[int]:
    return [derive_seed(base_seed, tag, i) for i in range(1, n + 1)]


@dataclass(frozen=True)
class CopyEnsemble:
    """Base path plus ``n`` copies sharing one common-noise realisation."""

    base: PathRecord
    copies: PathBatch
    common_seed: int

    @property
    def n(self) -> int:
        return self.copies.M

    @property
    def idio_seeds(self) -> tuple[int, ...]:
        return (self.base.idio_seed,) + tuple(self.copies.idio_seeds)

    def terminal(self) -> np.ndarray:
        return self.copies.values[:, -1]


def spawn_copies(
    model: JumpDiffusionModel,
    grid: TimeGrid,
    common_seed: int,
    initial: InitialSampler | None,
    n: int,
    base_idio_seed: int,
    *,
    actions: Sequence | None = None,
    seeds: Sequence[int] | None = None,
) -> CopyEnsemble:
    """Simulate a base path and ``n`` conditionally i.i.d. copies.

    ``actions`` is an optional per-node action sequence; it must be a
    function of the common noise only for the copies to stay conditionally
    independent.  ``seeds`` overrides the derived copy seeds (duplicates are
    allowed so that degenerate controls can be built).
    """
    if n < 1:
        raise InvalidArgument(f"copy count must be >= 1, got {n}")
    copy_ids = list(seeds) if seeds is not None else copy_seeds(base_idio_seed, n)
    if len(copy_ids) != n:
        raise InvalidArgument("seed override must have length n")
    members = [int(base_idio_seed)] + [int(s) for s in copy_ids]
    x0 = draw_initial(initial, members, model.n)
    policy = None
    if actions is not None:
        actions = list(actions)
        policy = lambda k, x: actions[k]  # noqa: E731
    batch = simulate_batch(model, grid, common_seed, members, x0, policy=policy)
    return CopyEnsemble(batch.record(0), batch.subset(np.arange(1, n + 1)), int(common_seed))


def scaled_idiosyncratic(model: JumpDiffusionModel, factor: float) -> JumpDiffusionModel:
    """The same model with the idiosyncratic Brownian loading multiplied by ``factor``."""
    sv = model.sigma_v
    return replace(model, sigma_v=lambda x, a: factor * np.asarray(sv(x, a), float), name=f"{model.name}*idio{factor:g}")


def corrupted_copies(
    model: JumpDiffusionModel,
    grid: TimeGrid,
    common_seed: int,
    initial: InitialSampler | None,
    n: int,
    base_idio_seed: int,
    factor: float = 2.0,
) -> CopyEnsemble:
    """Negative control: odd-positioned copies use idiosyncratic noise scaled by ``factor``.

    The odd and even copies then have different conditional laws, which the
    law-equality check compares directly.
    """
    good = spawn_copies(model, grid, common_seed, initial, n, base_idio_seed)
    bad = spawn_copies(scaled_idiosyncratic(model, factor), grid, common_seed, initial, n, base_idio_seed)
    idx = np.arange(n)
    mixed = good.copies.subset(idx)
    values = np.where((idx % 2 == 1)[:, None, None], bad.copies.values, good.copies.values)
    return CopyEnsemble(good.base, replace(mixed, values=values), good.common_seed)


def same_seed_copies(
    model: JumpDiffusionModel, grid: TimeGrid, common_seed: int, initial: InitialSampler | None, n: int, base_idio_seed: int
) -> CopyEnsemble:
    """Negative control: copies ``2i`` and ``2i + 1`` share one idiosyncratic seed."""
    seeds = copy_seeds(base_idio_seed, (n + 1) // 2)
    return spawn_copies(model, grid, common_seed, initial, n, base_idio_seed, seeds=[seeds[i // 2] for i in range(n)])


def conditional_expectation(h: Callable, ensemble: CopyEnsemble, arity: int = 2, vectorized: bool = False) -> float:
    """Estimate ``E[h(X, X', X'') | F]`` with the base path held fixed.

    ``arity`` is the number of copies ``h`` consumes (0, 1 or 2).  With two
    copies the estimate is the U-statistic over ordered pairs of distinct
    copies.  When ``vectorized`` is set, ``h(base, copies)`` returns a
    length-``n`` array (arity 1) or an ``(n, n)`` matrix (arity 2) whose
    diagonal is ignored.
    """
    base = ensemble.base
    if arity == 0:
        return float(h(base))
    n = ensemble.n
    if arity == 1:
        if vectorized:
            return float(np.mean(np.asarray(h(base, ensemble.copies), float)))
        recs = ensemble.copies.records()
        return float(np.mean([h(base, c) for c in recs]))
    if arity == 2:
        if n < 2:
            raise InvalidArgument("two-copy expectation needs at least two copies")
        if vectorized:
            mat = np.asarray(h(base, ensemble.copies), float)
            return float((mat.sum() - np.trace(mat)) / (n * (n - 1)))
        recs = ensemble.copies.records()
        total = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    total += h(base, recs[i], recs[j])
        return total / (n * (n - 1))
    raise InvalidArgument(f"arity must be 0, 1 or 2, got {arity}")


def _group(ensembles: Sequence[CopyEnsemble]) -> dict[int, list[CopyEnsemble]]:
    groups: dict[int, list[CopyEnsemble]] = defaultdict(list)
    for e in ensembles:
        groups[e.common_seed].append(e)
    return dict(sorted(groups.items()))


def _check_sizes(groups, min_common: int):
    if len(groups) < min_common:
        raise InsufficientData(f"need >= {min_common} common seeds, got {len(groups)}")
    for es in groups.values():
        if sum(e.n for e in es) < 2:
            raise InsufficientData("need >= 2 copies per common seed")


def _terminal_stat(phi, values: np.ndarray) -> np.ndarray:
    return np.asarray(phi(values), float).reshape(values.shape[0])


def check_conditional_law_equality(
    ensembles: Sequence[CopyEnsemble],
    statistics: Sequence[Callable],
    *,
    level: float = 0.01,
    confidence: float = 0.99,
    nodes: Sequence[int] | None = None,
    min_common: int = 100,
) -> CheckReport:
    """Two-sample KS test of copy groups within each common seed.

    Odd-positioned and even-positioned copies (pooled over the ensembles of a
    seed) form the two samples.  Under the null every per-seed p-value is
    uniform, so the fraction below ``level`` should lie in the binomial
    ``confidence`` interval around ``level``.
    """
    groups = _group(ensembles)
    _check_sizes(groups, min_common)
    pvalues, distances = [], []
    for seed, es in groups.items():
        for phi in statistics:
            for node in nodes if nodes is not None else (-1,):
                a = np.concatenate([_terminal_stat(phi, e.copies.values[0::2, node]) for e in es])
                b = np.concatenate([_terminal_stat(phi, e.copies.values[1::2, node]) for e in es])
                res = stats.ks_2samp(a, b)
                distances.append(float(res.statistic))
                pvalues.append(float(res.pvalue))
    pvalues = np.asarray(pvalues)
    n_tests = pvalues.size
    rejections = int(np.sum(pvalues < level))
    lo = int(stats.binom.ppf((1 - confidence) / 2, n_tests, level))
    hi = int(stats.binom.ppf(1 - (1 - confidence) / 2, n_tests, level))
    frac = rejections / n_tests
    return CheckReport(
        name="conditional_law_equality",
        statistic=frac,
        threshold=hi / n_tests,
        passed=lo <= rejections <= hi,
        n_common=len(groups),
        n_copies=min(sum(e.n for e in es) for es in groups.values()),
        seeds=list(groups),
        details={
            "rejections": rejections,
            "n_tests": n_tests,
            "binomial_interval": [lo, hi],
            "level": level,
            "max_ks_distance": float(np.max(distances)),
            "pvalues": pvalues,
        },
    )


def check_conditional_independence(
    ensembles: Sequence[CopyEnsemble],
    phi: Callable,
    psi: Callable,
    *,
    threshold: float = 4.0,
    min_common: int = 100,
) -> CheckReport:
    """Studentised mean over seeds of the within-seed covariance of ``phi(X')``, ``psi(X'')``.

    Copies are paired as (1, 2), (3, 4), ...; each pair contributes one
    draw of ``(X', X'')``.
    """
    groups = _group(ensembles)
    _check_sizes(groups, min_common)
    covs = []
    for seed, es in groups.items():
        first = np.concatenate([_terminal_stat(phi, e.copies.values[0::2, -1][: e.n // 2]) for e in es])
        second = np.concatenate([_terminal_stat(psi, e.copies.values[1::2, -1][: e.n // 2]) for e in es])
        covs.append(float(np.mean(first * second) - np.mean(first) * np.mean(second)))
    covs = np.asarray(covs)
    t = studentized_mean(covs)
    return CheckReport(
        name="conditional_independence",
        statistic=t,
        threshold=threshold,
        passed=bool(abs(t) < threshold),
        n_common=len(groups),
        n_copies=min(sum(e.n for e in es) for es in groups.values()),
        seeds=list(groups),
        details={"mean_covariance": float(np.mean(covs)), "max_abs_covariance": float(np.max(np.abs(covs)))},
    )
