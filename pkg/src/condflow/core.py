"""Time grids, noise, Euler-Maruyama jump-diffusion paths and path diagnostics.

Conventions
-----------
* Grid node ``k`` carries the right-continuous value ``X_{t_k}`` and the
  left limit ``X_{t_k-}``; they differ only when a jump is assigned to ``k``.
* A jump at time ``s`` in ``(t_k, t_{k+1}]`` is applied at node ``k + 1``
  after the continuous Euler step.
* Coefficients are vectorised over a batch of states: ``drift(x, a)`` maps
  ``(M, n)`` to ``(M, n)``, ``sigma_v`` to ``(M, n, d_i)``, ``sigma_w`` to
  ``(M, n, d_c)`` and ``beta(x, a, theta)`` with ``theta`` of shape ``(M, q)``
  to ``(M, n)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, NumericalFailure
from .rng import derive_seed, generator, scratch_generator, seed_chain

Coefficient = Callable[[np.ndarray, object], np.ndarray]
JumpCoefficient = Callable[[np.ndarray, object, np.ndarray], np.ndarray]
MarkSampler = Callable[[np.random.Generator, int], np.ndarray]
Policy = Callable[[int, np.ndarray], object]

COMPENSATOR_BUDGET = 10_000


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: int
    nodes: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.T / self.K

    def same_as(self, other: "TimeGrid") -> bool:
        return self.K == other.K and self.T == other.T


def build_time_grid(T: float, K: int) -> TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_K = T``."""
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgument(f"horizon must be positive, got T={T}")
    if int(K) != K or K < 1:
        raise InvalidArgument(f"step count must be a positive integer, got K={K}")
    K = int(K)
    nodes = np.arange(K + 1, dtype=float) * (T / K)
    nodes[-1] = T
    nodes.setflags(write=False)
    return TimeGrid(float(T), K, nodes)


@dataclass(frozen=True)
class LevySpec:
    """Finite-intensity compound Poisson driver.

    ``sampler(rng, size)`` returns marks of shape ``(size, q)``.  When
    ``common`` is true the jump times and marks come from the common-noise
    stream and every particle jumps together.  ``symmetric`` declares that
    ``theta`` and ``-theta`` have the same law.
    """

    intensity: float
    sampler: MarkSampler
    q: int = 1
    p_max: float = 2.0
    common: bool = False
    name: str = "levy"
    symmetric: bool = False

    def __post_init__(self):
        if not np.isfinite(self.intensity) or self.intensity < 0:
            raise InvalidArgument("Levy intensity must be finite and nonnegative")

    def sample_marks(self, rng: np.random.Generator, size: int) -> np.ndarray:
        marks = np.asarray(self.sampler(rng, size), dtype=float)
        return marks.reshape(size, self.q)

    def moment_check(self, p: float, n_draws: int = 10_000, seed: int = 0) -> float:
        """Empirical ``E|theta|^p``; raises if ``p`` exceeds the declared bound."""
        if p > self.p_max:
            raise InvalidArgument(f"p={p} exceeds declared mark moment bound {self.p_max}")
        marks = self.sample_marks(generator(derive_seed(seed, "mark-moments")), n_draws)
        value = float(np.mean(np.linalg.norm(marks, axis=1) ** p))
        if not np.isfinite(value):
            raise NumericalFailure(f"mark moment of order {p} is not finite")
        return value


def gaussian_marks(mean: float = 0.0, variance: float = 1.0) -> MarkSampler:
    std = float(np.sqrt(variance))

    def sampler(rng: np.random.Generator, size: int) -> np.ndarray:
        return mean + std * rng.standard_normal((size, 1))

    return sampler


@dataclass(frozen=True)
class NoiseBundle:
    grid: TimeGrid
    dW0: np.ndarray
    dW: np.ndarray
    jump_times: np.ndarray
    jump_marks: np.ndarray
    jump_nodes: np.ndarray
    common_seed: int
    idio_seed: int
    common_jumps: bool = False


def _jump_stream(grid: TimeGrid, levy: LevySpec | None, seed: int):
    if levy is None or levy.intensity == 0:
        q = 1 if levy is None else levy.q
        return np.empty(0), np.empty((0, q)), np.empty(0, dtype=np.int64)
    rng = scratch_generator(derive_seed(seed, "jumps"))
    count = rng.poisson(levy.intensity * grid.T)
    times = np.sort(rng.uniform(0.0, grid.T, size=count))
    times = times[times > 0]
    marks = levy.sample_marks(rng, times.size)
    nodes = np.clip(np.ceil(times / grid.dt).astype(np.int64), 1, grid.K)
    return times, marks, nodes


def common_increments(grid: TimeGrid, d_c: int, common_seed: int) -> np.ndarray:
    rng = scratch_generator(derive_seed(common_seed, "common-brownian"))
    return np.sqrt(grid.dt) * rng.standard_normal((grid.K, d_c))


def idio_increments(grid: TimeGrid, d_i: int, idio_seed: int) -> np.ndarray:
    rng = scratch_generator(derive_seed(idio_seed, "idio-brownian"))
    return np.sqrt(grid.dt) * rng.standard_normal((grid.K, d_i))


def sample_noise(
    grid: TimeGrid,
    d_i: int,
    d_c: int,
    levy: LevySpec | None,
    common_seed: int,
    idio_seed: int,
) -> NoiseBundle:
    """Draw one noise realisation.

    The common Brownian increments depend on ``common_seed`` only, so two
    bundles with the same common seed share ``dW0`` bit for bit.
    """
    if d_i < 0 or d_c < 0 or int(d_i) != d_i or int(d_c) != d_c:
        raise InvalidArgument(f"noise dimensions must be nonnegative integers, got {d_i}, {d_c}")
    dW0 = common_increments(grid, int(d_c), common_seed)
    dW = idio_increments(grid, int(d_i), idio_seed)
    common = bool(levy is not None and levy.common)
    jump_seed = derive_seed(common_seed, "common") if common else derive_seed(idio_seed, "idio")
    times, marks, nodes = _jump_stream(grid, levy, jump_seed)
    return NoiseBundle(grid, dW0, dW, times, marks, nodes, int(common_seed), int(idio_seed), common)


@dataclass(frozen=True)
class JumpDiffusionModel:
    """``dX = b dt + sigma_v dW + sigma_w dW0 + int beta dN~``."""

    n: int
    d_i: int
    d_c: int
    drift: Coefficient
    sigma_v: Coefficient
    sigma_w: Coefficient
    beta: JumpCoefficient | None = None
    levy: LevySpec | None = None
    lipschitz: float = 1.0
    beta_state_independent: bool = True
    compensator_budget: int = COMPENSATOR_BUDGET
    name: str = "model"
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def has_jumps(self) -> bool:
        return self.levy is not None and self.beta is not None and self.levy.intensity > 0

    @property
    def common_jumps(self) -> bool:
        return self.has_jumps and self.levy.common

    def compensator_marks(self) -> np.ndarray:
        if "marks" not in self._cache:
            rng = generator(seed_chain(0, ("compensator", 0), (self.name, 0)))
            self._cache["marks"] = self.levy.sample_marks(rng, self.compensator_budget)
        return self._cache["marks"]

    def compensator(self, x: np.ndarray, a) -> np.ndarray:
        """``intensity * E_theta[beta(x, a, theta)]`` over a fixed mark sample."""
        if not self.has_jumps:
            return np.zeros_like(x)
        marks = self.compensator_marks()
        lam = self.levy.intensity
        if self.beta_state_independent:
            key = ("mean", repr(a))
            if key not in self._cache:
                probe = np.zeros((marks.shape[0], self.n))
                self._cache[key] = np.asarray(self.beta(probe, a, marks), float).mean(axis=0)
            return np.broadcast_to(lam * self._cache[key], x.shape).copy()
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            xi = np.broadcast_to(x[i], (marks.shape[0], self.n))
            out[i] = lam * np.asarray(self.beta(xi, a, marks), float).mean(axis=0)
        return out

    def coefficients(self, x: np.ndarray, a):
        b = np.asarray(self.drift(x, a), float).reshape(x.shape[0], self.n)
        sv = np.asarray(self.sigma_v(x, a), float).reshape(x.shape[0], self.n, self.d_i)
        sw = np.asarray(self.sigma_w(x, a), float).reshape(x.shape[0], self.n, self.d_c)
        return b, sv, sw

    def lipschitz_ratio(self, n_probes: int = 200, seed: int = 0, scale: float = 3.0, actions=(None,)):
        """Largest observed ``|coef(x) - coef(y)| / |x - y|`` over random probe pairs."""
        rng = generator(derive_seed(seed, "lipschitz-probes"))
        x = scale * rng.standard_normal((n_probes, self.n))
        y = x + rng.standard_normal((n_probes, self.n)) * rng.uniform(1e-3, 1.0, (n_probes, 1))
        worst = 0.0
        for a in actions:
            bx, svx, swx = self.coefficients(x, a)
            by, svy, swy = self.coefficients(y, a)
            num = (
                np.linalg.norm(bx - by, axis=1)
                + np.linalg.norm((svx - svy).reshape(n_probes, -1), axis=1)
                + np.linalg.norm((swx - swy).reshape(n_probes, -1), axis=1)
            )
            if self.has_jumps:
                marks = self.compensator_marks()[:256]
                lam = self.levy.intensity
                for i in range(n_probes):
                    xi = np.broadcast_to(x[i], (marks.shape[0], self.n))
                    yi = np.broadcast_to(y[i], (marks.shape[0], self.n))
                    diff = np.asarray(self.beta(xi, a, marks)) - np.asarray(self.beta(yi, a, marks))
                    num[i] += lam * np.linalg.norm(diff, axis=1).mean()
            ratio = num / np.linalg.norm(x - y, axis=1)
            worst = max(worst, float(np.max(ratio)))
        return worst

    def origin_bound(self, actions=(None,)) -> float:
        zero = np.zeros((1, self.n))
        worst = 0.0
        for a in actions:
            b, sv, sw = self.coefficients(zero, a)
            val = np.linalg.norm(b) + np.linalg.norm(sv) + np.linalg.norm(sw)
            if self.has_jumps:
                marks = self.compensator_marks()
                z = np.zeros((marks.shape[0], self.n))
                val += self.levy.intensity * np.linalg.norm(np.asarray(self.beta(z, a, marks)), axis=1).mean()
            worst = max(worst, float(val))
        return worst

    def check_declared_constants(self, actions=(None,), factor: float = 1.05) -> bool:
        return (
            self.origin_bound(actions) <= self.lipschitz
            and self.lipschitz_ratio(actions=actions) <= factor * self.lipschitz
        )


@dataclass(frozen=True)
class PathBatch:
    """``M`` paths on one grid, stored as arrays.

    ``values[:, k]`` is ``X_{t_k}``, ``left[:, k]`` is ``X_{t_k-}``; per-step
    arrays are indexed by the interval ``(t_k, t_{k+1}]``.
    """

    grid: TimeGrid
    values: np.ndarray
    left: np.ndarray
    drift_inc: np.ndarray
    comp_inc: np.ndarray
    diff_inc: np.ndarray
    sig_v: np.ndarray
    sig_w: np.ndarray
    common_seed: int
    idio_seeds: tuple
    actions: tuple | None = None
    common_jumps: bool = False

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[2]

    @property
    def jumps(self) -> np.ndarray:
        return self.values - self.left

    @property
    def cont_increments(self) -> np.ndarray:
        """``X_{t_{k+1}-} - X_{t_k}``: increments of the continuous part."""
        return self.left[:, 1:] - self.values[:, :-1]

    def cont_bracket(self) -> np.ndarray:
        """Model-implied ``d[X, X]^c`` per step, shape ``(M, K, n, n)``."""
        dt = self.grid.dt
        return (
            np.einsum("mkid,mkjd->mkij", self.sig_v, self.sig_v)
            + np.einsum("mkid,mkjd->mkij", self.sig_w, self.sig_w)
        ) * dt

    def record(self, j: int) -> "PathRecord":
        jumps = self.jumps[j]
        nz = np.flatnonzero(np.any(jumps != 0.0, axis=1))
        return PathRecord(
            grid=self.grid,
            values=self.values[j],
            left=self.left[j],
            jump_list=tuple((int(k), jumps[k].copy()) for k in nz),
            cont_bracket=_single_bracket(self, j),
            common_seed=self.common_seed,
            idio_seed=int(self.idio_seeds[j]),
            drift_inc=self.drift_inc[j],
            comp_inc=self.comp_inc[j],
            diff_inc=self.diff_inc[j],
            sig_v=self.sig_v[j],
            sig_w=self.sig_w[j],
        )

    def records(self) -> list["PathRecord"]:
        return [self.record(j) for j in range(self.M)]

    def subset(self, idx) -> "PathBatch":
        idx = np.asarray(idx)
        return PathBatch(
            self.grid,
            self.values[idx],
            self.left[idx],
            self.drift_inc[idx],
            self.comp_inc[idx],
            self.diff_inc[idx],
            self.sig_v[idx],
            self.sig_w[idx],
            self.common_seed,
            tuple(self.idio_seeds[i] for i in np.atleast_1d(idx)),
            self.actions,
            self.common_jumps,
        )


def _single_bracket(batch: PathBatch, j: int) -> np.ndarray:
    sv, sw = batch.sig_v[j], batch.sig_w[j]
    return (np.einsum("kid,kjd->kij", sv, sv) + np.einsum("kid,kjd->kij", sw, sw)) * batch.grid.dt


@dataclass(frozen=True)
class PathRecord:
    grid: TimeGrid
    values: np.ndarray
    left: np.ndarray
    jump_list: tuple
    cont_bracket: np.ndarray
    common_seed: int
    idio_seed: int
    drift_inc: np.ndarray = field(repr=False, default=None)
    comp_inc: np.ndarray = field(repr=False, default=None)
    diff_inc: np.ndarray = field(repr=False, default=None)
    sig_v: np.ndarray = field(repr=False, default=None)
    sig_w: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def jumps(self) -> np.ndarray:
        return self.values - self.left

    def to_csv(self, dest=None) -> str:
        """Write ``t, x_1..x_n, is_jump, dx_1..dx_n`` rows; returns the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.n
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + ["is_jump"] + [f"dx_{i + 1}" for i in range(n)])
        jumps = self.jumps
        for k, t in enumerate(self.grid.nodes):
            is_jump = int(np.any(jumps[k] != 0.0))
            w.writerow([fmt(t)] + [fmt(v) for v in self.values[k]] + [is_jump] + [fmt(v) for v in jumps[k]])
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def fmt(x: float) -> str:
    """17-significant-digit rendering used for every numeric CSV cell."""
    return format(float(x), ".17g")


class _EventTable:
    """Jump events grouped by node and by order of occurrence within a node."""

    def __init__(self, K: int, nodes, particles, marks, times):
        self.by_node: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
        if len(nodes) == 0:
            return
        order = np.lexsort((times, particles, nodes))
        nodes, particles, marks = nodes[order], particles[order], marks[order]
        rank = np.zeros(len(nodes), dtype=np.int64)
        for i in range(1, len(nodes)):
            if nodes[i] == nodes[i - 1] and particles[i] == particles[i - 1]:
                rank[i] = rank[i - 1] + 1
        for node in np.unique(nodes):
            sel = nodes == node
            groups = []
            for r in range(int(rank[sel].max()) + 1):
                s = sel & (rank == r)
                groups.append((particles[s], marks[s]))
            self.by_node[int(node)] = groups


def _check_finite(arr: np.ndarray, what: str, step: int):
    if not np.all(np.isfinite(arr)):
        raise NumericalFailure(f"non-finite {what}", step=step)


def euler_maruyama(
    model: JumpDiffusionModel,
    grid: TimeGrid,
    x0: np.ndarray,
    dW0: np.ndarray,
    dW: np.ndarray,
    events: _EventTable,
    *,
    common_events: tuple | None = None,
    policy: Policy | None = None,
    common_seed: int = 0,
    idio_seeds: Sequence[int] = (0,),
) -> PathBatch:
    """Euler-Maruyama with end-of-interval jumps for a batch of paths.

    ``dW0`` has shape ``(K, d_c)`` and is shared; ``dW`` has shape
    ``(M, K, d_i)``.  ``common_events`` is ``(nodes, marks)`` for jumps every
    path experiences.  ``policy(k, X_k)`` returns one action for all paths.
    """
    x0 = np.asarray(x0, float)
    M, n = x0.shape
    K, dt = grid.K, grid.dt
    values = np.empty((M, K + 1, n))
    left = np.empty((M, K + 1, n))
    drift_inc = np.empty((M, K, n))
    comp_inc = np.zeros((M, K, n))
    diff_inc = np.empty((M, K, n))
    sig_v = np.empty((M, K, n, model.d_i))
    sig_w = np.empty((M, K, n, model.d_c))
    values[:, 0] = left[:, 0] = x0
    actions = [] if policy is not None else None
    common_by_node: dict[int, list[np.ndarray]] = {}
    if common_events is not None:
        for node, mark in zip(*common_events):
            common_by_node.setdefault(int(node), []).append(mark)
    x = x0.copy()
    for k in range(K):
        a = policy(k, x) if policy is not None else None
        if actions is not None:
            actions.append(a)
        b, sv, sw = model.coefficients(x, a)
        _check_finite(b, "drift", k)
        _check_finite(sv, "idiosyncratic diffusion", k)
        _check_finite(sw, "common diffusion", k)
        diff = np.einsum("mnd,md->mn", sv, dW[:, k]) + sw @ dW0[k]
        step = b * dt + diff
        if model.has_jumps:
            comp = -model.compensator(x, a) * dt
            comp_inc[:, k] = comp
            step = step + comp
        drift_inc[:, k] = b * dt
        diff_inc[:, k] = diff
        sig_v[:, k] = sv
        sig_w[:, k] = sw
        x = x + step
        left[:, k + 1] = x
        if model.has_jumps:
            for particles, marks in events.by_node.get(k + 1, ()):
                jump = np.asarray(model.beta(x[particles], a, marks), float).reshape(len(particles), n)
                _check_finite(jump, "jump coefficient", k)
                x[particles] = x[particles] + jump
            for mark in common_by_node.get(k + 1, ()):
                marks = np.broadcast_to(mark, (M, mark.shape[-1]))
                jump = np.asarray(model.beta(x, a, marks), float).reshape(M, n)
                _check_finite(jump, "jump coefficient", k)
                x = x + jump
        _check_finite(x, "state", k)
        values[:, k + 1] = x
    return PathBatch(
        grid,
        values,
        left,
        drift_inc,
        comp_inc,
        diff_inc,
        sig_v,
        sig_w,
        int(common_seed),
        tuple(int(s) for s in idio_seeds),
        tuple(actions) if actions is not None else None,
        model.common_jumps,
    )


def _check_dims(model: JumpDiffusionModel, noise: NoiseBundle):
    if noise.dW0.shape[1] != model.d_c or noise.dW.shape[1] != model.d_i:
        raise InvalidArgument(
            f"noise dimensions (d_i={noise.dW.shape[1]}, d_c={noise.dW0.shape[1]}) "
            f"do not match model (d_i={model.d_i}, d_c={model.d_c})"
        )


def simulate_path(
    model: JumpDiffusionModel,
    noise: NoiseBundle,
    x0,
    policy: Policy | None = None,
) -> PathRecord:
    """Simulate one path driven by ``noise``."""
    _check_dims(model, noise)
    x0 = np.asarray(x0, float).reshape(1, model.n)
    grid = noise.grid
    if noise.common_jumps:
        events = _EventTable(grid.K, [], [], [], [])
        common = (noise.jump_nodes, noise.jump_marks)
    else:
        events = _EventTable(
            grid.K, noise.jump_nodes, np.zeros(noise.jump_nodes.size, dtype=np.int64), noise.jump_marks, noise.jump_times
        )
        common = None
    batch = euler_maruyama(
        model,
        grid,
        x0,
        noise.dW0,
        noise.dW[None],
        events,
        common_events=common,
        policy=policy,
        common_seed=noise.common_seed,
        idio_seeds=[noise.idio_seed],
    )
    return batch.record(0)


@dataclass(frozen=True)
class BatchNoise:
    """All noise driving a batch: shared ``dW0``, per-path ``dW`` and jump events."""

    grid: TimeGrid
    dW0: np.ndarray
    dW: np.ndarray
    events: _EventTable
    common: tuple | None
    common_seed: int
    idio_seeds: tuple


def batch_noise(model: JumpDiffusionModel, grid: TimeGrid, common_seed: int, idio_seeds: Sequence[int]) -> BatchNoise:
    """Draw the noise of ``len(idio_seeds)`` paths sharing ``common_seed``."""
    idio_seeds = [int(s) for s in idio_seeds]
    M = len(idio_seeds)
    dW0 = common_increments(grid, model.d_c, common_seed)
    dW = np.empty((M, grid.K, model.d_i))
    levy = model.levy if model.has_jumps else None
    common = None
    nodes, parts, marks, times = [], [], [], []
    if levy is not None and levy.common:
        t, m, nd = _jump_stream(grid, levy, derive_seed(common_seed, "common"))
        common = (nd, m)
    for j, s in enumerate(idio_seeds):
        dW[j] = idio_increments(grid, model.d_i, s)
        if levy is not None and not levy.common:
            t, m, nd = _jump_stream(grid, levy, derive_seed(s, "idio"))
            nodes.append(nd)
            parts.append(np.full(nd.size, j, dtype=np.int64))
            marks.append(m)
            times.append(t)
    if nodes:
        events = _EventTable(
            grid.K, np.concatenate(nodes), np.concatenate(parts), np.concatenate(marks), np.concatenate(times)
        )
    else:
        events = _EventTable(grid.K, [], [], [], [])
    return BatchNoise(grid, dW0, dW, events, common, int(common_seed), tuple(idio_seeds))


def simulate_with_noise(
    model: JumpDiffusionModel, noise: BatchNoise, x0: np.ndarray, policy: Policy | None = None
) -> PathBatch:
    """Integrate a batch on pre-drawn noise, so several policies can share it."""
    x0 = np.asarray(x0, float).reshape(len(noise.idio_seeds), model.n)
    return euler_maruyama(
        model,
        noise.grid,
        x0,
        noise.dW0,
        noise.dW,
        noise.events,
        common_events=noise.common,
        policy=policy,
        common_seed=noise.common_seed,
        idio_seeds=noise.idio_seeds,
    )


def simulate_batch(
    model: JumpDiffusionModel,
    grid: TimeGrid,
    common_seed: int,
    idio_seeds: Sequence[int],
    x0: np.ndarray,
    policy: Policy | None = None,
) -> PathBatch:
    """Simulate ``len(idio_seeds)`` paths sharing the common noise of ``common_seed``.

    Path ``j`` is bit-identical to ``simulate_path`` on
    ``sample_noise(grid, ..., common_seed, idio_seeds[j])`` when no policy
    couples the paths.
    """
    return simulate_with_noise(model, batch_noise(model, grid, common_seed, idio_seeds), x0, policy)


def common_jump_nodes(model: JumpDiffusionModel, grid: TimeGrid, common_seed: int) -> np.ndarray:
    """Boolean mask over nodes ``0..K`` marking events of the common jump stream."""
    mask = np.zeros(grid.K + 1, dtype=bool)
    if model.common_jumps:
        _, _, nodes = _jump_stream(grid, model.levy, derive_seed(common_seed, "common"))
        mask[nodes] = True
    return mask


def _as_batch_arrays(paths) -> tuple[TimeGrid, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(paths, PathBatch):
        return (
            paths.grid,
            paths.values,
            paths.jumps,
            paths.cont_bracket(),
            paths.drift_inc + paths.comp_inc,
            paths.diff_inc,
        )
    paths = list(paths)
    if not paths:
        raise InvalidArgument("no paths supplied")
    grid = paths[0].grid
    for p in paths[1:]:
        if not p.grid.same_as(grid):
            raise InvalidArgument("paths live on different grids")
    values = np.stack([p.values for p in paths])
    jumps = np.stack([p.jumps for p in paths])
    brk = np.stack([p.cont_bracket for p in paths])
    fv = np.stack([p.drift_inc + p.comp_inc for p in paths])
    mart = np.stack([p.diff_inc for p in paths])
    return grid, values, jumps, brk, fv, mart


def _lp(samples: np.ndarray, p: float) -> float:
    if np.isinf(p):
        return float(np.max(samples))
    return float(np.mean(samples**p) ** (1.0 / p))


def hp_norm_estimate(paths, p: float) -> float:
    """Monte Carlo ``|| |X_0| + sqrt([M,M]_T) + int |dV| ||_{L^p}``.

    Uses the model decomposition: ``M`` = diffusion plus compensated jumps,
    ``V`` = drift plus compensator.  This bounds the infimum over
    decompositions from above.
    """
    if p < 1:
        raise InvalidArgument(f"p must be >= 1, got {p}")
    grid, values, jumps, brk, fv, _ = _as_batch_arrays(paths)
    x0 = np.linalg.norm(values[:, 0], axis=1)
    qv = np.trace(brk, axis1=2, axis2=3).sum(axis=1) + (jumps**2).sum(axis=(1, 2))
    tv = np.linalg.norm(fv, axis=2).sum(axis=1)
    return _lp(x0 + np.sqrt(qv) + tv, p)


def jump_sum_estimate(paths, p: float) -> float:
    """``E[(sum |dX|)^p]^(1/p)`` over the jump nodes."""
    if p < 1:
        raise InvalidArgument(f"p must be >= 1, got {p}")
    _, _, jumps, _, _, _ = _as_batch_arrays(paths)
    return _lp(np.linalg.norm(jumps, axis=2).sum(axis=1), p)


def realized_bracket(a: PathRecord, b: PathRecord, kind: str = "realized") -> np.ndarray:
    """Cumulative bracket ``[a, b]`` on the grid, shape ``(K + 1, n_a, n_b)``.

    ``kind="realized"`` sums products of grid increments.  ``kind="model"``
    uses coefficient products for the continuous part (common driver always
    shared; idiosyncratic driver shared only when the idiosyncratic seeds
    agree) plus ``sum da db`` over jump nodes.
    """
    if not a.grid.same_as(b.grid):
        raise InvalidArgument("paths live on different grids")
    K = a.grid.K
    if kind == "realized":
        da = np.diff(a.values, axis=0)
        db = np.diff(b.values, axis=0)
        inc = np.einsum("ki,kj->kij", da, db)
    elif kind == "model":
        inc = np.zeros((K, a.n, b.n))
        if a.common_seed == b.common_seed:
            inc += np.einsum("kid,kjd->kij", a.sig_w, b.sig_w) * a.grid.dt
            if a.idio_seed == b.idio_seed and a.sig_v.shape[2] == b.sig_v.shape[2]:
                inc += np.einsum("kid,kjd->kij", a.sig_v, b.sig_v) * a.grid.dt
        inc += np.einsum("ki,kj->kij", a.jumps[1:], b.jumps[1:])
    else:
        raise InvalidArgument(f"unknown bracket kind {kind!r}")
    out = np.zeros((K + 1, a.n, b.n))
    out[1:] = np.cumsum(inc, axis=0)
    return out


def jump_part(a: PathRecord, b: PathRecord) -> np.ndarray:
    if not a.grid.same_as(b.grid):
        raise InvalidArgument("paths live on different grids")
    inc = np.einsum("ki,kj->kij", a.jumps, b.jumps)
    return np.cumsum(inc, axis=0)


def strong_error_order(
    model: JumpDiffusionModel,
    T: float,
    K_levels: Iterable[int],
    x0,
    n_paths: int = 400,
    seed: int = 0,
) -> float:
    """Empirical strong order from ``E|X_T^h - X_T^{h/2}|`` over refinements.

    Coarse paths reuse the fine Brownian increments summed pairwise.
    """
    K_levels = list(K_levels)
    errs = []
    for K in K_levels:
        fine = build_time_grid(T, 2 * K)
        coarse = build_time_grid(T, K)
        total = 0.0
        for i in range(n_paths):
            cs = seed_chain(seed, ("strong-common", i))
            s = seed_chain(seed, ("strong-idio", i))
            dW0f = common_increments(fine, model.d_c, cs)
            dWf = idio_increments(fine, model.d_i, s)
            empty = _EventTable(fine.K, [], [], [], [])
            xf = euler_maruyama(model, fine, np.atleast_2d(x0), dW0f, dWf[None], empty).values[0, -1]
            dW0c = dW0f.reshape(K, 2, -1).sum(axis=1)
            dWc = dWf.reshape(K, 2, -1).sum(axis=1)
            xc = euler_maruyama(model, coarse, np.atleast_2d(x0), dW0c, dWc[None], empty).values[0, -1]
            total += np.linalg.norm(xf - xc)
        errs.append(total / n_paths)
    dts = np.array([T / K for K in K_levels])
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    return float(slope)
