"""Term-by-term ledger of Ito's formula for ``Phi(mu_t, Y_t)`` along a particle flow.

One ledger belongs to one common seed.  ``mu_t`` is the particle measure of
``M`` paths sharing that seed; conditional expectations over the copies
``X'``, ``X''`` are averages (single copy) or distinct-pair U-statistics (two
copies) over a copy pool.  The pool is either the particles themselves
(``"shared"``) or a separate set of paths (``"disjoint"``).

Discretisation, on the interval ``(t_k, t_{k+1}]``:

* continuous integrands are frozen at ``(mu_k, Y_k, X'_k)``;
* ``d(X')^c`` is the copy's increment up to the pre-jump value at ``k + 1``;
* ``[X', X']^c`` and ``[Y, Y]^c`` are model-implied, ``[X', X'']^c`` and
  ``[X', Y]^c`` use the common-noise coefficient products;
* jump integrands are frozen at ``(mu_{k+1-}, Y_{k+1-})`` and the copy jump
  block is switched off at nodes carrying a common-stream jump;
* in the jump sum ``Phi(mu_s, Y_s) - Phi(mu_{s-}, Y_{s-})``, ``mu_s`` is the
  post-jump particle measure at common-jump nodes and ``mu_{s-}`` elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import nnls

from .copies import InitialSampler, draw_initial
from .core import (
    JumpDiffusionModel,
    PathBatch,
    TimeGrid,
    build_time_grid,
    common_jump_nodes,
    fmt,
    simulate_batch,
)
from .cylindrical import CylindricalFunctional
from .errors import InsufficientData, InvalidArgument
from .flow import empirical_conditional_law
from .parallel import parallel_map
from .reporting import CheckReport, mean_ci, write_csv
from .rng import derive_seed, generator

TERM_NAMES = (
    "x_continuous",
    "xx_bracket",
    "x1x2_bracket",
    "xy_bracket",
    "jump_block",
    "y_continuous",
    "yy_bracket",
    "jump_sum",
)


@dataclass(frozen=True)
class ItoLedger:
    """LHS and named RHS terms; ``residual`` is recomputed from the stored terms."""

    lhs: float
    terms: dict
    subterms: dict
    common_seed: int
    K: int
    M: int
    n_copies: int
    t_index: int
    pool: str

    @property
    def residual(self) -> float:
        return self.lhs - math.fsum(self.terms[k] for k in TERM_NAMES)

    def finite(self) -> bool:
        vals = [self.lhs, *self.terms.values(), *self.subterms.values()]
        return all(math.isfinite(v) for v in vals)

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "terms": dict(self.terms),
            "subterms": dict(self.subterms),
            "residual": self.residual,
            "common_seed": self.common_seed,
            "K": self.K,
            "M": self.M,
            "n_copies": self.n_copies,
            "t_index": self.t_index,
            "pool": self.pool,
        }


@dataclass(frozen=True)
class YPath:
    """Grid values of ``Y`` with the coefficients needed for its brackets."""

    values: np.ndarray
    left: np.ndarray
    sig_v: np.ndarray
    sig_w: np.ndarray

    @classmethod
    def constant(cls, grid: TimeGrid, y0, d_i: int, d_c: int) -> "YPath":
        y0 = np.atleast_1d(np.asarray(y0, float))
        vals = np.broadcast_to(y0, (grid.K + 1, y0.size)).copy()
        return cls(vals, vals.copy(), np.zeros((grid.K, y0.size, d_i)), np.zeros((grid.K, y0.size, d_c)))

    @classmethod
    def from_batch(cls, batch: PathBatch, j: int = 0) -> "YPath":
        return cls(batch.values[j], batch.left[j], batch.sig_v[j], batch.sig_w[j])


def _stack_outer(phi: CylindricalFunctional, Z: np.ndarray, Y: np.ndarray):
    ods = [phi.outer_at(z, y) for z, y in zip(Z, Y)]
    return (
        np.array([o.value for o in ods]),
        np.stack([o.dz for o in ods]),
        np.stack([o.dy for o in ods]),
        np.stack([o.dzz for o in ods]),
        np.stack([o.dzy for o in ods]),
        np.stack([o.dyy for o in ods]),
    )


def _pair_average(A: np.ndarray) -> np.ndarray:
    """Distinct-pair average of ``A[c, ..., i, :] . A[c', ..., j, :]`` over ``c != c'``.

    ``A`` has shape ``(n, L, m, e)``; the result has shape ``(L, m, m)``.
    """
    n = A.shape[0]
    if n < 2:
        return np.zeros(A.shape[1:3] + (A.shape[2],))
    S = A.sum(axis=0)
    total = np.einsum("lie,lje->lij", S, S)
    diag = np.einsum("clie,clje->lij", A, A)
    return (total - diag) / (n * (n - 1))


def ledger_from_paths(
    phi: CylindricalFunctional,
    particles: PathBatch,
    copies: PathBatch,
    Y: YPath,
    common_mask: np.ndarray,
    t_index: int | None = None,
    *,
    pool: str = "shared",
    classical: bool = False,
    shares_idio: bool = False,
) -> ItoLedger:
    """Assemble the ledger from simulated arrays.

    ``classical`` treats the single particle as its own copy: the pair
    bracket uses the full model bracket and every jump counts as a jump of
    the measure, which is the classical Ito formula for ``f(g(X), Y)``.
    ``shares_idio`` adds the idiosyncratic part to ``[X', Y]^c``; it is only
    meaningful in classical mode where the copy is the base path.
    """
    grid = particles.grid
    t = grid.K if t_index is None else int(t_index)
    if not 0 <= t <= grid.K:
        raise InvalidArgument(f"t_index {t} outside 0..{grid.K}")
    if phi.d != particles.n or Y.values.shape[1] != phi.dy:
        raise InvalidArgument(
            f"functional dimensions (d={phi.d}, dy={phi.dy}) do not match paths (n={particles.n}, dy={Y.values.shape[1]})"
        )
    n = copies.M
    if n < 2 and not classical:
        raise InsufficientData("the ledger needs at least two copies")
    d, m = phi.d, phi.m
    dt = grid.dt

    # measure flow: Z_k = <mu_k, g> and its left limits
    Pv = phi.test_values(particles.values.reshape(-1, d)).reshape(particles.M, grid.K + 1, m)
    Pl = phi.test_values(particles.left.reshape(-1, d)).reshape(particles.M, grid.K + 1, m)
    Z, ZL = Pv.mean(axis=0), Pl.mean(axis=0)

    val, dz, dyv, dzz, dzy, dyy = _stack_outer(phi, Z[: t + 1], Y.values[: t + 1])
    lhs = float(val[t] - val[0])
    terms = dict.fromkeys(TERM_NAMES, 0.0)
    subs = {
        "jump_first_order": 0.0,
        "jump_second_order": 0.0,
        "jump_y": 0.0,
        "jump_sum_common": 0.0,
        "jump_sum_idiosyncratic": 0.0,
    }
    if t == 0:
        return ItoLedger(lhs, terms, subs, particles.common_seed, grid.K, particles.M, n, t, pool)

    # copy features on the continuous intervals
    cf = phi.features(copies.values[:, :t].reshape(-1, d))
    dg = cf.dg.reshape(n, t, m, d)
    d2g = cf.d2g.reshape(n, t, m, d, d)
    dXc = copies.left[:, 1 : t + 1] - copies.values[:, :t]
    B = copies.cont_bracket()[:, :t]
    sw = copies.sig_w[:, :t]

    terms["x_continuous"] = float(np.einsum("ki,ckia,cka->", dz[:t], dg, dXc) / n)
    terms["xx_bracket"] = float(0.5 * np.einsum("ki,ckiab,ckab->", dz[:t], d2g, B) / n)
    if classical:
        full = np.einsum("ckia,ckab,ckjb->kij", dg, B, dg) / n
        terms["x1x2_bracket"] = float(0.5 * np.einsum("kij,kij->", dzz[:t], full))
    else:
        A = np.einsum("ckia,ckae->ckie", dg, sw)
        terms["x1x2_bracket"] = float(0.5 * dt * np.einsum("kij,kij->", dzz[:t], _pair_average(A)))
    cross = np.einsum("ckae,kle->ckal", sw, Y.sig_w[:t]) * dt
    if shares_idio and copies.sig_v.shape[3] == Y.sig_v.shape[2]:
        cross = cross + np.einsum("ckae,kle->ckal", copies.sig_v[:, :t], Y.sig_v[:t]) * dt
    terms["xy_bracket"] = float(np.einsum("kil,ckia,ckal->", dzy[:t], dg, cross) / n)
    terms["y_continuous"] = float(np.einsum("kl,kl->", dyv[:t], Y.left[1 : t + 1] - Y.values[:t]))
    BY = (np.einsum("kle,kre->klr", Y.sig_v[:t], Y.sig_v[:t]) + np.einsum("kle,kre->klr", Y.sig_w[:t], Y.sig_w[:t])) * dt
    terms["yy_bracket"] = float(0.5 * np.einsum("klr,klr->", dyy[:t], BY))

    # jumps at nodes 1..t
    nodes = np.arange(1, t + 1)
    cj = copies.jumps
    cjump = np.any(cj[:, 1 : t + 1] != 0.0, axis=(0, 2))
    pjump = np.any(particles.jumps[:, 1 : t + 1] != 0.0, axis=(0, 2))
    dY = Y.values[1 : t + 1] - Y.left[1 : t + 1]
    yjump = np.any(dY != 0.0, axis=1)
    common = np.asarray(common_mask[1 : t + 1], bool)
    measure_jump = common | (pjump if classical else False)
    gate = ~measure_jump if not classical else np.zeros_like(common)
    active = nodes[(cjump & gate) | measure_jump | yjump]
    jf = js = jy = s_common = s_idio = 0.0
    if active.size:
        valL, dzL, _, dzzL, dzyL, _ = _stack_outer(phi, ZL[active], Y.left[active])
        for r, s in enumerate(active):
            i = s - 1
            if gate[i] and cjump[i]:
                hit = np.flatnonzero(np.any(cj[:, s] != 0.0, axis=1))
                dG = np.zeros((n, m))
                dG[hit] = phi.test_values(copies.values[hit, s]) - phi.test_values(copies.left[hit, s])
                jf += float(dzL[r] @ dG.sum(axis=0)) / n
                js += 0.5 * float(np.einsum("ij,ij->", dzzL[r], _pair_average(dG[:, None, :, None])[0]))
                jy += float(np.einsum("il,ci,l->", dzyL[r], dG, dY[i])) / n
            if measure_jump[i]:
                after = phi.outer_at(Z[s], Y.values[s]).value
                s_common += after - valL[r]
            elif yjump[i]:
                after = phi.outer_at(ZL[s], Y.values[s]).value
                s_idio += after - valL[r]
    subs.update(
        jump_first_order=jf,
        jump_second_order=js,
        jump_y=jy,
        jump_sum_common=s_common,
        jump_sum_idiosyncratic=s_idio,
    )
    terms["jump_block"] = math.fsum([jf, js, jy])
    terms["jump_sum"] = math.fsum([s_common, s_idio])
    return ItoLedger(lhs, terms, subs, particles.common_seed, grid.K, particles.M, n, t, pool)


def _simulate_y(y_source, model, grid, common_seed, base_seed, y0, dy, initial):
    if y_source is None:
        y0 = np.zeros(dy) if y0 is None else y0
        return YPath.constant(grid, y0, model.d_i, model.d_c), None
    if isinstance(y_source, str):
        if y_source != "base":
            raise InvalidArgument(f"unknown Y source {y_source!r}")
        x0 = draw_initial(initial, [base_seed], model.n)
        batch = simulate_batch(model, grid, common_seed, [base_seed], x0)
        return YPath.from_batch(batch), batch
    ymodel: JumpDiffusionModel = y_source
    if (ymodel.d_i, ymodel.d_c) != (model.d_i, model.d_c):
        raise InvalidArgument("the Y model must share the noise dimensions of the X model")
    y0 = np.zeros(ymodel.n) if y0 is None else np.asarray(y0, float)
    batch = simulate_batch(ymodel, grid, common_seed, [base_seed], y0.reshape(1, ymodel.n))
    return YPath.from_batch(batch), batch


def evaluate_identity(
    phi: CylindricalFunctional,
    model: JumpDiffusionModel,
    grid: TimeGrid,
    common_seed: int,
    M: int,
    n_copies: int | None = None,
    *,
    pool: str = "shared",
    y_source=None,
    y0=None,
    initial: InitialSampler | None = None,
    t_index: int | None = None,
) -> ItoLedger:
    """Simulate one common-noise realisation and return its ledger.

    ``y_source`` is ``None`` (constant ``Y = y0``), ``"base"`` (``Y`` is a
    further path of the ``X`` model driven by the base seed) or a model for
    ``Y`` driven by the common seed and the base idiosyncratic seed.
    """
    if pool not in ("shared", "disjoint"):
        raise InvalidArgument(f"pool must be 'shared' or 'disjoint', got {pool!r}")
    if phi.d != model.n:
        raise InvalidArgument(f"functional acts on R^{phi.d}, model state is R^{model.n}")
    flow = empirical_conditional_law(model, grid, common_seed, M, initial=initial)
    if pool == "shared":
        if M < 2:
            raise InsufficientData("the shared pool needs M >= 2 particles")
        copies, n = flow.paths, M
    else:
        n = M if n_copies is None else int(n_copies)
        if n < 2:
            raise InsufficientData("the ledger needs n_copies >= 2")
        root = derive_seed(common_seed, "ledger-copies")
        seeds = [derive_seed(root, "copy", i) for i in range(n)]
        copies = simulate_batch(model, grid, common_seed, seeds, draw_initial(initial, seeds, model.n))
    Y, _ = _simulate_y(y_source, model, grid, common_seed, derive_seed(common_seed, "base"), y0, phi.dy, initial)
    mask = common_jump_nodes(model, grid, common_seed)
    return ledger_from_paths(phi, flow.paths, copies, Y, mask, t_index, pool=pool)


def run_ledgers(
    phi: CylindricalFunctional,
    model: JumpDiffusionModel,
    grid: TimeGrid,
    common_seeds: Sequence[int],
    M: int,
    n_copies: int | None = None,
    *,
    threads: int | None = None,
    **kwargs,
) -> list[ItoLedger]:
    return parallel_map(
        lambda c: evaluate_identity(phi, model, grid, int(c), M, n_copies, **kwargs), list(common_seeds), threads
    )


def residual_summary(ledgers: Sequence[ItoLedger]) -> dict:
    r = np.array([l.residual for l in ledgers])
    abs_mean, lo, hi = mean_ci(np.abs(r))
    per_term = {}
    for name in TERM_NAMES:
        mean, tlo, thi = mean_ci([l.terms[name] for l in ledgers])
        per_term[name] = {"mean": mean, "ci": [tlo, thi]}
    for name in ledgers[0].subterms:
        mean, tlo, thi = mean_ci([l.subterms[name] for l in ledgers])
        per_term[name] = {"mean": mean, "ci": [tlo, thi]}
    lmean, llo, lhi = mean_ci([l.lhs for l in ledgers])
    return {
        "mean_abs_residual": abs_mean,
        "ci": [lo, hi],
        "mean_residual": float(math.fsum(r) / r.size),
        "max_abs_residual": float(np.max(np.abs(r))),
        "lhs": {"mean": lmean, "ci": [llo, lhi]},
        "terms": per_term,
        "n_seeds": len(ledgers),
    }


@dataclass(frozen=True)
class ToleranceModel:
    """``3 (a dt^(1/2) + b M^(-1/2) + c n_seeds^(-1/2))``."""

    a: float
    b: float
    c: float = 0.0
    factor: float = 3.0
    pilot: tuple = field(default=(), compare=False)

    def budget(self, dt: float, M: int, n_seeds: int | None = None) -> float:
        core = self.a * math.sqrt(dt) + self.b / math.sqrt(M)
        if n_seeds:
            core += self.c / math.sqrt(n_seeds)
        return self.factor * core

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "factor": self.factor, "pilot": [list(p) for p in self.pilot]}


def fit_tolerance(points: Sequence[tuple[float, int, float]], c: float = 0.0) -> ToleranceModel:
    """Nonnegative least-squares fit of ``mean |residual| ~ a dt^(1/2) + b M^(-1/2)``.

    ``points`` holds ``(dt, M, mean_abs_residual)`` triples.
    """
    pts = np.asarray(points, float)
    if pts.shape[0] < 2:
        raise InsufficientData("tolerance fit needs at least two pilot points")
    X = np.column_stack([np.sqrt(pts[:, 0]), 1.0 / np.sqrt(pts[:, 1])])
    coef, _ = nnls(X, pts[:, 2])
    return ToleranceModel(float(coef[0]), float(coef[1]), float(c), pilot=tuple(map(tuple, pts.tolist())))


def pilot_tolerance(
    phi: CylindricalFunctional,
    model: JumpDiffusionModel,
    T: float,
    K_levels: Sequence[int],
    M_levels: Sequence[int],
    common_seeds: Sequence[int],
    *,
    threads: int | None = None,
    **kwargs,
) -> ToleranceModel:
    """Fit the tolerance model from coarse pilot runs over every ``(K, M)`` pair."""
    points = []
    spread = 0.0
    for K in K_levels:
        grid = build_time_grid(T, K)
        for M in M_levels:
            ledgers = run_ledgers(phi, model, grid, common_seeds, M, M, threads=threads, **kwargs)
            r = np.abs([l.residual for l in ledgers])
            points.append((grid.dt, M, float(np.mean(r))))
            spread = max(spread, float(np.std(r, ddof=1)) if r.size > 1 else 0.0)
    return fit_tolerance(points, c=spread)


def identity_check(
    ledgers: Sequence[ItoLedger],
    tolerance: ToleranceModel,
    grid: TimeGrid,
    M: int,
    *,
    include_seed_term: bool = False,
    name: str = "ito_identity",
) -> CheckReport:
    summary = residual_summary(ledgers)
    budget = tolerance.budget(grid.dt, M, len(ledgers) if include_seed_term else None)
    stat = summary["mean_abs_residual"]
    return CheckReport(
        name=name,
        statistic=stat,
        threshold=budget,
        passed=bool(stat <= budget and all(l.finite() for l in ledgers)),
        n_common=len(ledgers),
        n_copies=ledgers[0].n_copies,
        seeds=[l.common_seed for l in ledgers],
        details={"summary": summary, "tolerance": tolerance.to_dict(), "K": grid.K, "M": M},
    )


def _loglog_slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 2 or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@dataclass(frozen=True)
class ConvergenceResult:
    rows: tuple
    slope_dt: float
    slope_M: float
    pool: str

    def to_csv(self, path) -> None:
        write_csv(
            path,
            ["K", "M", "mean_abs_residual", "ci_low", "ci_high", "slope_dt", "slope_M"],
            [(r["K"], r["M"], r["mean_abs_residual"], r["ci_low"], r["ci_high"], self.slope_dt, self.slope_M) for r in self.rows],
        )


def convergence_study(
    phi: CylindricalFunctional,
    model: JumpDiffusionModel,
    T: float,
    K_levels: Sequence[int],
    M_levels: Sequence[int],
    common_seeds: Sequence[int],
    *,
    pool: str = "shared",
    threads: int | None = None,
    **kwargs,
) -> ConvergenceResult:
    """Mean ``|residual|`` on every ``(K, M)`` pair.

    ``slope_dt`` is the log-log slope against ``dt`` at the largest ``M``;
    ``slope_M`` is ``-d log|r| / d log M`` at the largest ``K``, so the CLT rate
    gives ``0.5``.
    """
    K_levels, M_levels = sorted(int(k) for k in K_levels), sorted(int(m) for m in M_levels)
    if not K_levels or not M_levels:
        raise InvalidArgument("K and M level lists must be nonempty")
    rows = []
    for K in K_levels:
        grid = build_time_grid(T, K)
        for M in M_levels:
            ledgers = run_ledgers(phi, model, grid, common_seeds, M, M, pool=pool, threads=threads, **kwargs)
            mean, lo, hi = mean_ci(np.abs([l.residual for l in ledgers]))
            rows.append({"K": K, "M": M, "dt": grid.dt, "mean_abs_residual": mean, "ci_low": lo, "ci_high": hi})
    at_M = [r for r in rows if r["M"] == M_levels[-1]]
    at_K = [r for r in rows if r["K"] == K_levels[-1]]
    slope_dt = _loglog_slope([r["dt"] for r in at_M], [r["mean_abs_residual"] for r in at_M])
    slope_M = -_loglog_slope([r["M"] for r in at_K], [r["mean_abs_residual"] for r in at_K])
    return ConvergenceResult(tuple(rows), slope_dt, slope_M, pool)


def has_common_drivers(model: JumpDiffusionModel, n_probes: int = 64, seed: int = 0, actions=(None,)) -> bool:
    if model.common_jumps:
        return True
    rng = generator(derive_seed(seed, "common-driver-probes"))
    x = 3.0 * rng.standard_normal((n_probes, model.n))
    return any(np.any(model.coefficients(x, a)[2] != 0.0) for a in actions)


def trivial_sigma_reduction(
    phi: CylindricalFunctional,
    model: JumpDiffusionModel,
    grid: TimeGrid,
    seeds: Sequence[int],
    M: int,
    *,
    tolerance: ToleranceModel | float,
    y_source=None,
    y0=None,
    initial: InitialSampler | None = None,
    threads: int | None = None,
) -> CheckReport:
    """Ledger with ``G`` trivial: ``mu_t`` is the unconditional particle law.

    With ``M = 1`` the particle is its own copy and the ledger is the
    classical Ito formula for ``f(g(X), Y)``.  Otherwise the particles form the
    copy pool.
    """
    if has_common_drivers(model):
        raise InvalidArgument("trivial reduction requires sigma_W = 0 and no common jumps")
    if M < 1:
        raise InvalidArgument("need M >= 1")

    def one(seed):
        root = derive_seed(int(seed), "unconditional")
        ids = [derive_seed(root, "particle", j) for j in range(M)]
        batch = simulate_batch(model, grid, int(seed), ids, draw_initial(initial, ids, model.n))
        mask = np.zeros(grid.K + 1, dtype=bool)
        if M == 1:
            if y_source == "base":
                Y = YPath.from_batch(batch)
            else:
                Y, _ = _simulate_y(y_source, model, grid, int(seed), ids[0], y0, phi.dy, initial)
            return ledger_from_paths(phi, batch, batch, Y, mask, pool="single", classical=True, shares_idio=True)
        Y, _ = _simulate_y(y_source, model, grid, int(seed), derive_seed(root, "base"), y0, phi.dy, initial)
        return ledger_from_paths(phi, batch, batch, Y, mask, pool="shared")

    ledgers = parallel_map(one, list(seeds), threads)
    summary = residual_summary(ledgers)
    budget = tolerance.budget(grid.dt, max(M, 1)) if isinstance(tolerance, ToleranceModel) else float(tolerance)
    stat = summary["mean_abs_residual"]
    return CheckReport(
        name="trivial_sigma_reduction",
        statistic=stat,
        threshold=budget,
        passed=bool(stat <= budget),
        n_common=len(ledgers),
        n_copies=M,
        seeds=list(seeds),
        details={"summary": summary, "K": grid.K, "M": M},
    )


def ledger_rows(ledger: ItoLedger) -> list[tuple[str, str]]:
    """``(term, value)`` rows with 17-digit rendering, main terms then sub-terms."""
    rows = [("lhs", fmt(ledger.lhs))]
    rows += [(k, fmt(ledger.terms[k])) for k in TERM_NAMES]
    rows += [(k, fmt(v)) for k, v in ledger.subterms.items()]
    rows.append(("residual", fmt(ledger.residual)))
    return rows
