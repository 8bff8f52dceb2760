"""Cylindrical functionals ``Phi(mu, y) = f(<mu, g_1>, ..., <mu, g_m>, y)``.

Every linear derivative is assembled from the outer function's gradient and
Hessian in ``w = (z, y)`` and the test functions' values, gradients and
Hessians.  The first linear derivative is the chain-rule representative
``sum_i d_{z_i} f(Z, y) g_i(x)``; no centring constant is subtracted.

Points are batched: ``x`` has shape ``(N, d)`` and per-point results lead
with ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, NumericalFailure, Unsupported
from .flow import EmpiricalConditionalLaw
from .reporting import CheckReport
from .rng import derive_seed, generator


def _pts(x, d: int) -> np.ndarray:
    x = np.asarray(x, float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, d) if d > 1 else x[:, None]
    if x.shape[1] != d:
        raise InvalidArgument(f"expected points of dimension {d}, got {x.shape[1]}")
    return x


@dataclass(frozen=True)
class TestFunctionC2b:
    """A test function on ``R^d`` with gradient, Hessian and declared sup-bounds."""

    __test__ = False

    name: str
    d: int
    g: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    bounds: tuple[float, float, float] = (np.inf, np.inf, np.inf)
    lipschitz: float = np.inf

    def value(self, x) -> np.ndarray:
        return np.asarray(self.g(_pts(x, self.d)), float).reshape(-1)

    def gradient(self, x) -> np.ndarray:
        x = _pts(x, self.d)
        return np.asarray(self.grad(x), float).reshape(x.shape[0], self.d)

    def hessian(self, x) -> np.ndarray:
        x = _pts(x, self.d)
        return np.asarray(self.hess(x), float).reshape(x.shape[0], self.d, self.d)

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.bounds)))


def _axis_function(name, d, comp, scale, h, dh, d2h, bounds, lip) -> TestFunctionC2b:
    """``g(x) = h(scale * x[comp])``."""

    def g(x):
        return h(scale * x[:, comp])

    def grad(x):
        out = np.zeros_like(x)
        out[:, comp] = scale * dh(scale * x[:, comp])
        return out

    def hess(x):
        out = np.zeros((x.shape[0], d, d))
        out[:, comp, comp] = scale**2 * d2h(scale * x[:, comp])
        return out

    return TestFunctionC2b(name, d, g, grad, hess, bounds, lip)


def tanh_fn(d: int = 1, component: int = 0, scale: float = 1.0) -> TestFunctionC2b:
    s = abs(scale)
    return _axis_function(
        "tanh",
        d,
        component,
        scale,
        np.tanh,
        lambda u: 1.0 - np.tanh(u) ** 2,
        lambda u: -2.0 * np.tanh(u) * (1.0 - np.tanh(u) ** 2),
        # sup |tanh''| = 4 / (3 sqrt 3)
        (1.0, s, s**2 * 4.0 / (3.0 * np.sqrt(3.0))),
        s,
    )


def sin_fn(d: int = 1, component: int = 0, scale: float = 1.0) -> TestFunctionC2b:
    s = abs(scale)
    return _axis_function("sin", d, component, scale, np.sin, np.cos, lambda u: -np.sin(u), (1.0, s, s**2), s)


def cos_fn(d: int = 1, component: int = 0, scale: float = 1.0) -> TestFunctionC2b:
    s = abs(scale)
    return _axis_function(
        "cos", d, component, scale, np.cos, lambda u: -np.sin(u), lambda u: -np.cos(u), (1.0, s, s**2), s
    )


def gaussian_bump(d: int = 1, center=0.0, width: float = 1.0) -> TestFunctionC2b:
    """``exp(-|x - c|^2 / (2 w^2))``."""
    c = np.broadcast_to(np.asarray(center, float), (d,)).copy()
    w2 = float(width) ** 2

    def g(x):
        return np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * w2))

    def grad(x):
        return -(x - c) / w2 * g(x)[:, None]

    def hess(x):
        u = (x - c) / w2
        return (np.einsum("ni,nj->nij", u, u) - np.eye(d) / w2) * g(x)[:, None, None]

    # sup |grad| = e^{-1/2} / w; sup |hess| (operator norm) = 1 / w^2
    return TestFunctionC2b("gaussian_bump", d, g, grad, hess, (1.0, np.exp(-0.5) / width, 1.0 / w2), np.exp(-0.5) / width)


def _clip_parts(radius: float, width: float):
    """``h(u) = u`` on ``|u| <= R`` and ``sign(u) (R + w tanh((|u| - R) / w))`` beyond; C^2."""

    def h(u):
        a = np.abs(u)
        out = np.where(a <= radius, u, np.sign(u) * (radius + width * np.tanh((a - radius) / width)))
        return out

    def dh(u):
        a = np.abs(u)
        t = np.tanh(np.maximum(a - radius, 0.0) / width)
        return np.where(a <= radius, 1.0, 1.0 - t**2)

    def d2h(u):
        a = np.abs(u)
        t = np.tanh(np.maximum(a - radius, 0.0) / width)
        return np.where(a <= radius, 0.0, -2.0 * np.sign(u) * t * (1.0 - t**2) / width)

    return h, dh, d2h


def clipped_polynomial(
    coeffs: Sequence[float], d: int = 1, component: int = 0, radius: float = 10.0, width: float = 1.0
) -> TestFunctionC2b:
    """``h(p(x[comp]))`` with ``p`` the polynomial ``sum c_k u^k`` and ``h`` a smooth clip.

    ``g`` equals ``p`` wherever ``|p| <= radius``.  Boundedness of ``g`` is
    guaranteed.  The declared derivative bounds are maxima over a dense grid
    of ``[-50, 50]``; past the clip the derivatives decay, so for polynomials
    that saturate well inside that window they are global.
    """
    poly = np.polynomial.Polynomial(np.asarray(coeffs, float))
    dpoly, d2poly = poly.deriv(1), poly.deriv(2)
    h, dh, d2h = _clip_parts(radius, width)

    def g(x):
        return h(poly(x[:, component]))

    def grad(x):
        out = np.zeros_like(x)
        u = x[:, component]
        out[:, component] = dh(poly(u)) * dpoly(u)
        return out

    def hess(x):
        out = np.zeros((x.shape[0], d, d))
        u = x[:, component]
        p = poly(u)
        out[:, component, component] = d2h(p) * dpoly(u) ** 2 + dh(p) * d2poly(u)
        return out

    grid = np.linspace(-50, 50, 200_001)
    probe = np.zeros((grid.size, d))
    probe[:, component] = grid
    b1 = float(np.max(np.abs(grad(probe))))
    b2 = float(np.max(np.abs(hess(probe)[:, component, component])))
    return TestFunctionC2b("clipped_polynomial", d, g, grad, hess, (radius + width, b1, b2), b1)


def identity_fn(d: int = 1, component: int = 0) -> TestFunctionC2b:
    """``x[comp]``; unbounded, so not in ``C^2_b`` (declared bounds are infinite)."""
    return _axis_function(
        "identity", d, component, 1.0, lambda u: u, np.ones_like, np.zeros_like, (np.inf, 1.0, 0.0), 1.0
    )


def square_fn(d: int = 1, component: int = 0) -> TestFunctionC2b:
    """``x[comp]^2``; unbounded."""
    return _axis_function(
        "square", d, component, 1.0, lambda u: u * u, lambda u: 2 * u, lambda u: 2 * np.ones_like(u), (np.inf, np.inf, 2.0), np.inf
    )


TEST_FUNCTIONS = {
    "tanh": tanh_fn,
    "sin": sin_fn,
    "cos": cos_fn,
    "gaussian_bump": gaussian_bump,
    "clipped_polynomial": clipped_polynomial,
    "identity": identity_fn,
    "square": square_fn,
}


def make_test_function(name: str, **params) -> TestFunctionC2b:
    try:
        build = TEST_FUNCTIONS[name]
    except KeyError:
        raise InvalidArgument(f"unknown test function {name!r}; known: {sorted(TEST_FUNCTIONS)}") from None
    return build(**params)


@dataclass(frozen=True)
class OuterFunction:
    """``f(w)`` with ``w = (z_1..z_m, y_1..y_dy)``, plus gradient and Hessian in ``w``."""

    name: str
    m: int
    dy: int
    f: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    linear_in_z: bool = False
    finite_difference: bool = False

    def split(self, z, y) -> np.ndarray:
        w = np.concatenate([np.asarray(z, float).reshape(self.m), np.asarray(y, float).reshape(self.dy)])
        return w

    def __add__(self, other: "OuterFunction") -> "OuterFunction":
        if (self.m, self.dy) != (other.m, other.dy):
            raise InvalidArgument("outer functions must share dimensions to be added")
        return OuterFunction(
            f"{self.name}+{other.name}",
            self.m,
            self.dy,
            lambda w: self.f(w) + other.f(w),
            lambda w: self.grad(w) + other.grad(w),
            lambda w: self.hess(w) + other.hess(w),
            self.linear_in_z and other.linear_in_z,
            self.finite_difference or other.finite_difference,
        )

    def scaled(self, c: float) -> "OuterFunction":
        return OuterFunction(
            f"{c}*{self.name}",
            self.m,
            self.dy,
            lambda w: c * self.f(w),
            lambda w: c * self.grad(w),
            lambda w: c * self.hess(w),
            self.linear_in_z,
            self.finite_difference,
        )


def linear_outer(a_z, a_y=None, c: float = 0.0, dy: int = 1) -> OuterFunction:
    """``a_z . z + a_y . y + c``."""
    a_z = np.atleast_1d(np.asarray(a_z, float))
    a_y = np.zeros(dy) if a_y is None else np.atleast_1d(np.asarray(a_y, float))
    a = np.concatenate([a_z, a_y])
    n = a.size
    return OuterFunction("linear", a_z.size, a_y.size, lambda w: float(a @ w + c), lambda w: a.copy(), lambda w: np.zeros((n, n)), True)


def constant_outer(c: float = 0.0, m: int = 1, dy: int = 1) -> OuterFunction:
    return linear_outer(np.zeros(m), np.zeros(dy), c, dy)


def power_outer(k: int, m: int = 1, dy: int = 1, index: int = 0) -> OuterFunction:
    """``z_index ** k``."""
    n = m + dy

    def f(w):
        return float(w[index] ** k)

    def grad(w):
        out = np.zeros(n)
        out[index] = k * w[index] ** (k - 1) if k >= 1 else 0.0
        return out

    def hess(w):
        out = np.zeros((n, n))
        out[index, index] = k * (k - 1) * w[index] ** (k - 2) if k >= 2 else 0.0
        return out

    return OuterFunction(f"z{index}^{k}", m, dy, f, grad, hess, k <= 1)


def product_outer(i: int = 0, j: int = 1, m: int = 2, dy: int = 1) -> OuterFunction:
    """``z_i z_j``."""
    n = m + dy

    def grad(w):
        out = np.zeros(n)
        out[i] += w[j]
        out[j] += w[i]
        return out

    def hess(w):
        out = np.zeros((n, n))
        out[i, j] += 1.0
        out[j, i] += 1.0
        return out

    return OuterFunction(f"z{i}*z{j}", m, dy, lambda w: float(w[i] * w[j]), grad, hess)


def sin_y_outer(m: int = 1, dy: int = 1, index: int = 0) -> OuterFunction:
    """``sin(y_index)``: a measure-independent functional."""
    n = m + dy
    k = m + index

    def grad(w):
        out = np.zeros(n)
        out[k] = np.cos(w[k])
        return out

    def hess(w):
        out = np.zeros((n, n))
        out[k, k] = -np.sin(w[k])
        return out

    return OuterFunction(f"sin(y{index})", m, dy, lambda w: float(np.sin(w[k])), grad, hess, True)


def quartic_y_outer(m: int = 1, dy: int = 1) -> OuterFunction:
    """``|y|^4``."""
    n = m + dy

    def f(w):
        return float(np.sum(w[m:] ** 2) ** 2)

    def grad(w):
        out = np.zeros(n)
        out[m:] = 4.0 * np.sum(w[m:] ** 2) * w[m:]
        return out

    def hess(w):
        y = w[m:]
        out = np.zeros((n, n))
        out[m:, m:] = 8.0 * np.outer(y, y) + 4.0 * np.sum(y**2) * np.eye(dy)
        return out

    return OuterFunction("|y|^4", m, dy, f, grad, hess, True)


def z_sin_y_outer(m: int = 1, dy: int = 1, i: int = 0, k: int = 0) -> OuterFunction:
    """``z_i sin(y_k)``: couples the measure and the state variable."""
    n = m + dy
    ky = m + k

    def grad(w):
        out = np.zeros(n)
        out[i] = np.sin(w[ky])
        out[ky] = w[i] * np.cos(w[ky])
        return out

    def hess(w):
        out = np.zeros((n, n))
        out[i, ky] = out[ky, i] = np.cos(w[ky])
        out[ky, ky] = -w[i] * np.sin(w[ky])
        return out

    return OuterFunction(f"z{i}*sin(y{k})", m, dy, lambda w: float(w[i] * np.sin(w[ky])), grad, hess, True)


def finite_difference_outer(f: Callable[[np.ndarray], float], m: int, dy: int, h: float = 1e-4) -> OuterFunction:
    """Outer function with central-difference derivatives; flagged in reports."""
    n = m + dy

    def grad(w):
        e = np.eye(n) * h
        return np.array([(f(w + e[i]) - f(w - e[i])) / (2 * h) for i in range(n)])

    def hess(w):
        e = np.eye(n) * h
        return np.array([(grad(w + e[i]) - grad(w - e[i])) / (2 * h) for i in range(n)])

    return OuterFunction("finite_difference", m, dy, f, grad, hess, False, True)


OUTER_FUNCTIONS = {
    "linear": linear_outer,
    "constant": constant_outer,
    "power": power_outer,
    "product": product_outer,
    "sin_y": sin_y_outer,
    "quartic_y": quartic_y_outer,
    "z_sin_y": z_sin_y_outer,
}


def outer_function(name: str, **params) -> OuterFunction:
    try:
        build = OUTER_FUNCTIONS[name]
    except KeyError:
        raise InvalidArgument(f"unknown outer function {name!r}; known: {sorted(OUTER_FUNCTIONS)}") from None
    return build(**params)


@dataclass(frozen=True)
class OuterDerivatives:
    """Derivatives of ``f`` at a frozen ``(Z, y)``; the measure enters only through ``Z``."""

    value: float
    dz: np.ndarray
    dy: np.ndarray
    dzz: np.ndarray
    dzy: np.ndarray
    dyy: np.ndarray


@dataclass(frozen=True)
class Features:
    """Test-function values, gradients and Hessians at a batch of points."""

    g: np.ndarray
    dg: np.ndarray
    d2g: np.ndarray


def _measure_parts(mu) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(mu, EmpiricalConditionalLaw):
        return mu.particles, mu.weights
    p = np.asarray(mu, float)
    if p.ndim == 1:
        p = p[:, None]
    return p, np.full(p.shape[0], 1.0 / p.shape[0])


@dataclass(frozen=True)
class CylindricalFunctional:
    """``Phi(mu, y) = f(<mu, g_1>, ..., <mu, g_m>, y)`` with chain-rule derivatives."""

    f: OuterFunction
    g: tuple[TestFunctionC2b, ...]
    d: int = 1
    name: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(self.g))
        if len(self.g) != self.f.m:
            raise InvalidArgument(f"outer function expects {self.f.m} test functions, got {len(self.g)}")
        for gi in self.g:
            if gi.d != self.d:
                raise InvalidArgument(f"test function {gi.name} has dimension {gi.d}, expected {self.d}")

    @property
    def m(self) -> int:
        return self.f.m

    @property
    def dy(self) -> int:
        return self.f.dy

    def features(self, x) -> Features:
        x = _pts(x, self.d)
        return Features(
            np.stack([gi.value(x) for gi in self.g], axis=1),
            np.stack([gi.gradient(x) for gi in self.g], axis=1),
            np.stack([gi.hessian(x) for gi in self.g], axis=1),
        )

    def test_values(self, x) -> np.ndarray:
        """``g_i(x)`` only, shape ``(N, m)``."""
        x = _pts(x, self.d)
        return np.stack([gi.value(x) for gi in self.g], axis=1)

    def moments(self, mu) -> np.ndarray:
        """``Z = (<mu, g_i>)_i``."""
        p, w = _measure_parts(mu)
        vals = np.stack([gi.value(p) for gi in self.g], axis=1)
        z = w @ vals
        if not np.all(np.isfinite(z)):
            raise NumericalFailure("non-finite test-function moment")
        return z

    def outer_at(self, z, y) -> OuterDerivatives:
        w = self.f.split(z, y)
        m = self.m
        val = float(self.f.f(w))
        gr = np.asarray(self.f.grad(w), float)
        he = np.asarray(self.f.hess(w), float)
        if not (np.isfinite(val) and np.all(np.isfinite(gr)) and np.all(np.isfinite(he))):
            raise NumericalFailure("non-finite outer-function evaluation")
        return OuterDerivatives(val, gr[:m], gr[m:], he[:m, :m], he[:m, m:], he[m:, m:])

    def derivatives(self, mu, y) -> OuterDerivatives:
        return self.outer_at(self.moments(mu), y)

    # values and y-derivatives
    def value(self, mu, y=None) -> float:
        return self.derivatives(mu, self._y(y)).value

    def __call__(self, mu, y=None) -> float:
        return self.value(mu, y)

    def grad_y(self, mu, y=None) -> np.ndarray:
        return self.derivatives(mu, self._y(y)).dy

    def hess_y(self, mu, y=None) -> np.ndarray:
        return self.derivatives(mu, self._y(y)).dyy

    def _y(self, y):
        return np.zeros(self.dy) if y is None else np.asarray(y, float).reshape(self.dy)

    # first linear derivative and its gradients
    def linear_derivative(self, mu, y, x) -> np.ndarray:
        od = self.derivatives(mu, self._y(y))
        return self.features(x).g @ od.dz

    def grad_x_linear(self, mu, y, x) -> np.ndarray:
        od = self.derivatives(mu, self._y(y))
        return np.einsum("nid,i->nd", self.features(x).dg, od.dz)

    def hess_x_linear(self, mu, y, x) -> np.ndarray:
        od = self.derivatives(mu, self._y(y))
        return np.einsum("nide,i->nde", self.features(x).d2g, od.dz)

    def grad_y_linear(self, mu, y, x) -> np.ndarray:
        od = self.derivatives(mu, self._y(y))
        return self.features(x).g @ od.dzy

    def grad_xy_linear(self, mu, y, x) -> np.ndarray:
        """``nabla_x nabla_y dPhi/dmu``, shape ``(N, d, dy)``."""
        od = self.derivatives(mu, self._y(y))
        return np.einsum("nid,ik->ndk", self.features(x).dg, od.dzy)

    # second linear derivative
    def second_linear_derivative(self, mu, y, x1, x2) -> np.ndarray:
        od = self.derivatives(mu, self._y(y))
        a, b = self.features(x1).g, self.features(x2).g
        # summing both orders makes the result bitwise symmetric in (x1, x2)
        return 0.5 * (np.einsum("ni,ij,nj->n", a, od.dzz, b) + np.einsum("ni,ij,nj->n", b, od.dzz, a))

    def grad_x1x2_second(self, mu, y, x1, x2) -> np.ndarray:
        """``nabla_{x1} nabla_{x2} d^2 Phi / dmu^2``, shape ``(N, d, d)``."""
        od = self.derivatives(mu, self._y(y))
        return np.einsum("nia,ij,njb->nab", self.features(x1).dg, od.dzz, self.features(x2).dg)

    def growth_constant(self, n_probes: int = 2000, seed: int = 0) -> float:
        """Candidate constant for the polynomial-growth bounds.

        Sup of the outer-function derivatives over the box ``|z_i| <= sup|g_i|``
        and ``|y| <= 1``, multiplied by ``(1 + B1 + B2)^2`` with ``B1``, ``B2``
        the largest declared gradient and Hessian bounds of the test functions.
        Unbounded test functions give an infinite constant.
        """
        b0 = np.array([gi.bounds[0] for gi in self.g])
        b12 = max([max(gi.bounds[1], gi.bounds[2]) for gi in self.g] + [0.0])
        if not (np.all(np.isfinite(b0)) and np.isfinite(b12)):
            return float("inf")
        rng = generator(derive_seed(seed, "growth-box"))
        worst = 0.0
        for _ in range(n_probes):
            z = rng.uniform(-b0, b0)
            y = rng.uniform(-1.0, 1.0, self.dy)
            od = self.outer_at(z, y)
            worst = max(
                worst,
                float(np.max(np.abs(np.concatenate([od.dz, od.dy, od.dzz.ravel(), od.dzy.ravel(), od.dyy.ravel(), [0.0]])))),
            )
        return worst * (1.0 + 2.0 * b12) ** 2 * max(1, self.m) ** 2


def cylindrical(outer: OuterFunction, tests: Sequence[TestFunctionC2b], d: int = 1, name: str = "") -> CylindricalFunctional:
    return CylindricalFunctional(outer, tuple(tests), d, name or outer.name)


def direct_sum(a: CylindricalFunctional, b: CylindricalFunctional) -> CylindricalFunctional:
    """``Phi_a + Phi_b`` as one cylindrical functional over the concatenated test functions."""
    if (a.d, a.dy) != (b.d, b.dy):
        raise InvalidArgument("summands must share the state and y dimensions")
    ma, mb, dy = a.m, b.m, a.dy

    def parts(w):
        return np.concatenate([w[:ma], w[ma + mb :]]), w[ma:]

    def f(w):
        wa, wb = parts(w)
        return a.f.f(wa) + b.f.f(wb)

    def grad(w):
        wa, wb = parts(w)
        ga, gb = np.asarray(a.f.grad(wa), float), np.asarray(b.f.grad(wb), float)
        out = np.zeros(ma + mb + dy)
        out[:ma] += ga[:ma]
        out[ma + mb :] += ga[ma:]
        out[ma:] += gb
        return out

    def hess(w):
        wa, wb = parts(w)
        ha, hb = np.asarray(a.f.hess(wa), float), np.asarray(b.f.hess(wb), float)
        ia = np.r_[np.arange(ma), np.arange(ma + mb, ma + mb + dy)]
        out = np.zeros((ma + mb + dy,) * 2)
        out[np.ix_(ia, ia)] += ha
        out[ma:, ma:] += hb
        return out

    outer = OuterFunction(
        f"{a.f.name}+{b.f.name}",
        ma + mb,
        dy,
        f,
        grad,
        hess,
        a.f.linear_in_z and b.f.linear_in_z,
        a.f.finite_difference or b.f.finite_difference,
    )
    return CylindricalFunctional(outer, a.g + b.g, a.d, f"{a.name}+{b.name}")


def eval_functional(phi: CylindricalFunctional, mu, y=None) -> float:
    return phi.value(mu, y)


def perturbation_derivative(phi: CylindricalFunctional, mu: EmpiricalConditionalLaw, y, x, eps: float) -> float:
    """``[Phi((1 - eps) mu + eps delta_x, y) - Phi(mu, y)] / eps``."""
    x = np.asarray(x, float).reshape(1, phi.d)
    dirac = EmpiricalConditionalLaw(x, np.ones(1))
    mixed = dirac.mix(mu, eps)
    return (phi.value(mixed, y) - phi.value(mu, y)) / eps


def ftc_check(
    phi: CylindricalFunctional, mu: EmpiricalConditionalLaw, nu: EmpiricalConditionalLaw, y=None, nodes: int = 32
) -> float:
    """``|Phi(mu) - Phi(nu) - int_0^1 <mu - nu, dPhi/dmu(l mu + (1 - l) nu)> dl|`` by Gauss-Legendre."""
    lam, wts = np.polynomial.legendre.leggauss(nodes)
    lam, wts = 0.5 * (lam + 1.0), 0.5 * wts
    atoms, signed = mu.signed_difference(nu)
    integral = 0.0
    for l, w in zip(lam, wts):
        mix = mu.mix(nu, float(l))
        integral += w * float(signed @ phi.linear_derivative(mix, y, atoms))
    return abs(phi.value(mu, y) - phi.value(nu, y) - integral)


def _growth_probes(rng, n_probes: int, d: int, dy: int, max_radius: float):
    radii = np.exp(rng.uniform(0.0, np.log(max_radius), (n_probes, 3)))
    def direction(k):
        u = rng.standard_normal((n_probes, k))
        return u / np.linalg.norm(u, axis=1, keepdims=True)
    return radii[:, :1] * direction(d), radii[:, 1:2] * direction(d), radii[:, 2:3] * direction(dy)


def growth_bound_check(
    phi: CylindricalFunctional,
    p: float = 2.0,
    n_probes: int = 500,
    seed: int = 0,
    max_radius: float = 1e3,
    particles: int = 8,
    constant: float | None = None,
) -> CheckReport:
    """Probe the uniform polynomial-growth bounds with radii up to ``max_radius``.

    Reports the largest observed ratio of each derivative to its polynomial
    weight and passes when all ratios stay below the candidate constant.
    """
    if p < 2:
        raise InvalidArgument(f"growth check needs p >= 2, got {p}")
    c = phi.growth_constant(seed=seed) if constant is None else float(constant)
    rng = generator(derive_seed(seed, "growth-probes"))
    x1, x2, ys = _growth_probes(rng, n_probes, phi.d, phi.dy, max_radius)
    clouds = rng.standard_normal((n_probes, particles, phi.d)) * np.exp(rng.uniform(0, np.log(max_radius), (n_probes, 1, 1)))
    names = ("grad_y", "hess_y", "first_order_x_y", "second_order_x_y", "cross_second")
    ratios = {k: 0.0 for k in names}
    for i in range(n_probes):
        mu = EmpiricalConditionalLaw.from_particles(clouds[i])
        y = ys[i]
        a, b, ny = np.linalg.norm(x1[i]), np.linalg.norm(x2[i]), np.linalg.norm(y)
        xi, xj = x1[i : i + 1], x2[i : i + 1]
        terms = {
            "grad_y": (np.linalg.norm(phi.grad_y(mu, y)), 1 + ny ** (p - 1)),
            "hess_y": (np.linalg.norm(phi.hess_y(mu, y), 2), 1 + ny ** (p - 2)),
            "first_order_x_y": (
                np.linalg.norm(phi.grad_x_linear(mu, y, xi)) + np.linalg.norm(phi.grad_y_linear(mu, y, xi)),
                1 + a ** (p - 1) + ny ** (p - 1),
            ),
            "second_order_x_y": (
                np.linalg.norm(phi.hess_x_linear(mu, y, xi)[0], 2) + np.linalg.norm(phi.grad_xy_linear(mu, y, xi)[0], 2),
                1 + a ** (p - 2) + ny ** (p - 2),
            ),
            "cross_second": (
                np.linalg.norm(phi.grad_x1x2_second(mu, y, xi, xj)[0], 2),
                1 + a ** (p - 2) + b ** (p - 2) + ny ** (p - 2),
            ),
        }
        for k, (num, den) in terms.items():
            ratios[k] = max(ratios[k], float(num / den))
    worst = max(ratios.values())
    return CheckReport(
        name="growth_bound",
        statistic=worst,
        threshold=c,
        passed=bool(worst <= c),
        details={"ratios": ratios, "p": p, "max_radius": max_radius, "finite_difference_outer": phi.f.finite_difference},
    )


def derivative_consistency(
    phi: CylindricalFunctional, n_probes: int = 100, seed: int = 0, h: float = 1e-5, particles: int = 6, scale: float = 1.5
) -> dict:
    """Largest relative mismatch between each analytic derivative and central differences of the level below.

    The mismatch is measured as ``|a - fd| / max(|a|, |fd|, 1)`` so that
    derivatives near zero are compared absolutely.
    """
    rng = generator(derive_seed(seed, "fd-probes"))
    d, dy = phi.d, phi.dy
    worst: dict[str, float] = {}

    def rel(a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)))

    def upd(key, val):
        worst[key] = max(worst.get(key, 0.0), val)

    E, Ey = np.eye(d) * h, np.eye(dy) * h
    for _ in range(n_probes):
        mu = EmpiricalConditionalLaw.from_particles(scale * rng.standard_normal((particles, d)))
        y = scale * rng.standard_normal(dy)
        x1 = scale * rng.standard_normal((1, d))
        x2 = scale * rng.standard_normal((1, d))
        fd_gy = [(phi.value(mu, y + Ey[k]) - phi.value(mu, y - Ey[k])) / (2 * h) for k in range(dy)]
        upd("grad_y", rel(phi.grad_y(mu, y), fd_gy))
        fd_hy = np.array([(phi.grad_y(mu, y + Ey[k]) - phi.grad_y(mu, y - Ey[k])) / (2 * h) for k in range(dy)])
        upd("hess_y", rel(phi.hess_y(mu, y), fd_hy))
        L = lambda x: phi.linear_derivative(mu, y, x)  # noqa: E731
        fd_gx = [(L(x1 + E[k]) - L(x1 - E[k]))[0] / (2 * h) for k in range(d)]
        upd("grad_x_linear", rel(phi.grad_x_linear(mu, y, x1)[0], fd_gx))
        G = lambda x: phi.grad_x_linear(mu, y, x)[0]  # noqa: E731
        fd_hx = np.array([(G(x1 + E[k]) - G(x1 - E[k])) / (2 * h) for k in range(d)])
        upd("hess_x_linear", rel(phi.hess_x_linear(mu, y, x1)[0], fd_hx))
        fd_ly = [(phi.linear_derivative(mu, y + Ey[k], x1) - phi.linear_derivative(mu, y - Ey[k], x1))[0] / (2 * h) for k in range(dy)]
        upd("grad_y_linear", rel(phi.grad_y_linear(mu, y, x1)[0], fd_ly))
        fd_xy = np.array(
            [(phi.grad_x_linear(mu, y + Ey[k], x1) - phi.grad_x_linear(mu, y - Ey[k], x1))[0] / (2 * h) for k in range(dy)]
        ).T
        upd("grad_xy_linear", rel(phi.grad_xy_linear(mu, y, x1)[0], fd_xy))
        # second linear derivative from perturbing mu inside the first one
        S = lambda a, b: phi.second_linear_derivative(mu, y, a, b)[0]  # noqa: E731
        # a coarser step for the double difference keeps round-off below 1e-7
        E2 = np.eye(d) * 1e-4
        fd_cross = np.array(
            [[(S(x1 + E2[a], x2 + E2[b]) - S(x1 + E2[a], x2 - E2[b]) - S(x1 - E2[a], x2 + E2[b]) + S(x1 - E2[a], x2 - E2[b])) / 4e-8
              for b in range(d)] for a in range(d)]
        )
        upd("grad_x1x2_second", rel(phi.grad_x1x2_second(mu, y, x1, x2)[0], fd_cross))
        eps = 1e-5
        dirac = EmpiricalConditionalLaw(x2, np.ones(1))
        up, down = dirac.mix(mu, eps), dirac.mix(mu, -eps)
        fd_second = (phi.linear_derivative(up, y, x1) - phi.linear_derivative(down, y, x1))[0] / (2 * eps)
        centred = S(x1, x2) - float(mu.weights @ phi.second_linear_derivative(mu, y, np.repeat(x1, mu.M, 0), mu.particles))
        upd("second_linear", rel(centred, fd_second))
    return worst


def perturbation_consistency(phi: CylindricalFunctional, n_probes: int = 100, seed: int = 0, particles: int = 6) -> float:
    """Largest relative gap between the centred linear derivative and its epsilon-limit.

    The limit is taken by Richardson extrapolation over ``eps, eps / 2``.
    """
    rng = generator(derive_seed(seed, "perturbation-probes"))
    worst = 0.0
    for _ in range(n_probes):
        mu = EmpiricalConditionalLaw.from_particles(1.5 * rng.standard_normal((particles, phi.d)))
        y = 1.5 * rng.standard_normal(phi.dy)
        x = 1.5 * rng.standard_normal((1, phi.d))
        eps = 1e-4
        r1 = perturbation_derivative(phi, mu, y, x, eps)
        r2 = perturbation_derivative(phi, mu, y, x, eps / 2)
        limit = 2 * r2 - r1
        exact = phi.linear_derivative(mu, y, x)[0] - float(mu.weights @ phi.linear_derivative(mu, y, mu.particles))
        worst = max(worst, abs(limit - exact) / max(abs(exact), 1.0))
    return worst


# T_n projection (d = 1)


@dataclass(frozen=True)
class HatPartition:
    """Hat functions on the uniform mesh of ``[-n, n]`` with spacing ``<= 1/n``.

    The two end hats are extended flat beyond ``+-n``; their anchors ``+-n``
    are the minimal-norm points of the closure of the exterior set.
    """

    n: int
    anchors: np.ndarray

    @classmethod
    def build(cls, n: int) -> "HatPartition":
        if n < 1:
            raise InvalidArgument(f"projection level must be >= 1, got {n}")
        cells = 2 * n * n
        return cls(n, np.linspace(-n, n, cells + 1))

    @property
    def h(self) -> float:
        return float(self.anchors[1] - self.anchors[0])

    def weights(self, x) -> np.ndarray:
        """``psi_i(x)``, shape ``(N, n_anchors)``; rows sum to 1."""
        x = np.clip(np.asarray(x, float).reshape(-1), self.anchors[0], self.anchors[-1])
        pos = (x - self.anchors[0]) / self.h
        i = np.clip(np.floor(pos).astype(int), 0, self.anchors.size - 2)
        frac = pos - i
        out = np.zeros((x.size, self.anchors.size))
        rows = np.arange(x.size)
        out[rows, i] = 1.0 - frac
        out[rows, i + 1] += frac
        return out

    def slopes(self, x) -> np.ndarray:
        """``psi_i'(x)`` (right derivative; zero outside ``[-n, n]``)."""
        x = np.asarray(x, float).reshape(-1)
        inside = (x >= self.anchors[0]) & (x < self.anchors[-1])
        pos = (np.clip(x, self.anchors[0], self.anchors[-1]) - self.anchors[0]) / self.h
        i = np.clip(np.floor(pos).astype(int), 0, self.anchors.size - 2)
        out = np.zeros((x.size, self.anchors.size))
        rows = np.flatnonzero(inside)
        out[rows, i[rows]] = -1.0 / self.h
        out[rows, i[rows] + 1] = 1.0 / self.h
        return out

    def apply(self, phi: Callable, x) -> np.ndarray:
        """``T_n phi(x) = sum_i phi(x_i) psi_i(x)``."""
        return self.weights(x) @ np.asarray(phi(self.anchors[:, None]), float).reshape(-1)

    def push(self, mu: EmpiricalConditionalLaw) -> EmpiricalConditionalLaw:
        """``T_n^* mu``: each atom's mass spread over the anchors by ``psi_i``."""
        if mu.dim != 1:
            raise Unsupported("T_n is implemented for d = 1 only")
        w = mu.weights @ self.weights(mu.particles[:, 0])
        keep = np.flatnonzero(w != 0.0)
        return EmpiricalConditionalLaw(self.anchors[keep, None], w[keep], mu.common_seed, mu.node)


@dataclass(frozen=True)
class ProjectedFunctional:
    """``f_n(mu, y) = Phi(T_n^* mu, y)`` with ``df_n/dmu = T_n(dPhi/dmu(T_n^* mu, y, .))``."""

    base: object
    partition: HatPartition

    @property
    def n(self) -> int:
        return self.partition.n

    def value(self, mu, y=None) -> float:
        return float(self.base.value(self.partition.push(mu), y))

    def linear_derivative(self, mu, y, x) -> np.ndarray:
        pushed = self.partition.push(mu)
        return self.partition.apply(lambda a: self.base.linear_derivative(pushed, y, a), x)

    def grad_x_linear(self, mu, y, x) -> np.ndarray:
        pushed = self.partition.push(mu)
        vals = np.asarray(self.base.linear_derivative(pushed, y, self.partition.anchors[:, None]), float)
        return (self.partition.slopes(x) @ vals)[:, None]

    def second_linear_derivative(self, mu, y, x1, x2) -> np.ndarray:
        pushed = self.partition.push(mu)
        a = self.partition.anchors[:, None]
        na = a.shape[0]
        grid = np.asarray(
            self.base.second_linear_derivative(pushed, y, np.repeat(a, na, 0), np.tile(a, (na, 1))), float
        ).reshape(na, na)
        return np.einsum("ni,ij,nj->n", self.partition.weights(x1), grid, self.partition.weights(x2))


def project_functional(phi, n: int) -> ProjectedFunctional:
    """Build the ``T_n`` approximant of a functional on measures over ``R``."""
    if getattr(phi, "d", 1) != 1:
        raise Unsupported("T_n is implemented for d = 1 only")
    return ProjectedFunctional(phi, HatPartition.build(n))
