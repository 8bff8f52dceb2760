"""Catalog of coefficient builders addressable by name from scenario files."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import JumpDiffusionModel, LevySpec, gaussian_marks
from .errors import InvalidArgument


def _const_matrix(value, n: int, d: int) -> Callable:
    mat = np.broadcast_to(np.asarray(value, float), (n, d)).copy() if d else np.zeros((n, 0))

    def coef(x, a):
        return np.broadcast_to(mat, (x.shape[0], n, d))

    return coef


def _vector(value, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, float), (n,)).copy()


def drift_from_spec(spec: dict, n: int) -> Callable:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        c = _vector(spec.get("value", 0.0), n)
        return lambda x, a: np.broadcast_to(c, x.shape)
    if kind == "linear":
        # b(x) = slope * x + intercept, componentwise
        slope = _vector(spec.get("slope", 0.0), n)
        icpt = _vector(spec.get("intercept", 0.0), n)
        return lambda x, a: x * slope + icpt
    if kind == "sine":
        amp = _vector(spec.get("amplitude", 1.0), n)
        return lambda x, a: amp * np.sin(x)
    if kind == "action":
        # b(x, a) = scale * a, the control enters as an additive drift
        scale = _vector(spec.get("scale", 1.0), n)
        return lambda x, a: np.broadcast_to(scale * float(a), x.shape)
    raise InvalidArgument(f"unknown drift kind {kind!r}")


def diffusion_from_spec(spec: dict, n: int, d: int) -> Callable:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return _const_matrix(spec.get("value", 0.0), n, d)
    if kind == "state_component":
        # sigma[row, col] = scale * x[source]; other entries from ``base``
        row, col, src = int(spec.get("row", 0)), int(spec.get("col", 0)), int(spec.get("source", 0))
        scale = float(spec.get("scale", 1.0))
        base = np.broadcast_to(np.asarray(spec.get("base", 0.0), float), (n, d)).copy()

        def coef(x, a):
            out = np.broadcast_to(base, (x.shape[0], n, d)).copy()
            out[:, row, col] = scale * x[:, src]
            return out

        return coef
    if kind == "bounded":
        # sigma(x) = level + amplitude * tanh(x), diagonal n == d
        level = float(spec.get("level", 1.0))
        amp = float(spec.get("amplitude", 0.5))

        def coef(x, a):
            out = np.zeros((x.shape[0], n, d))
            for i in range(min(n, d)):
                out[:, i, i] = level + amp * np.tanh(x[:, i])
            return out

        return coef
    raise InvalidArgument(f"unknown diffusion kind {kind!r}")


def levy_from_spec(spec: dict | None) -> tuple[LevySpec | None, Callable | None]:
    if not spec or float(spec.get("intensity", 0.0)) == 0.0:
        return None, None
    marks = spec.get("marks", "gaussian")
    if marks != "gaussian":
        raise InvalidArgument(f"unknown mark distribution {marks!r}")
    levy = LevySpec(
        intensity=float(spec["intensity"]),
        sampler=gaussian_marks(float(spec.get("mean", 0.0)), float(spec.get("variance", 1.0))),
        q=1,
        p_max=float(spec.get("p_max", 8.0)),
        common=bool(spec.get("common", False)),
        name=f"gaussian({spec.get('mean', 0.0)},{spec.get('variance', 1.0)})",
        symmetric=float(spec.get("mean", 0.0)) == 0.0,
    )
    scale = float(spec.get("scale", 1.0))

    def beta(x, a, theta):
        # beta(x, a, theta) = scale * theta in every state component
        return np.broadcast_to(scale * theta[:, :1], x.shape)

    return levy, beta


def model_from_spec(spec: dict) -> JumpDiffusionModel:
    n = int(spec.get("n", 1))
    d_i = int(spec.get("d_i", 1))
    d_c = int(spec.get("d_c", 1))
    levy, beta = levy_from_spec(spec.get("jumps"))
    return JumpDiffusionModel(
        n=n,
        d_i=d_i,
        d_c=d_c,
        drift=drift_from_spec(spec.get("drift", {}), n),
        sigma_v=diffusion_from_spec(spec.get("sigma_v", {}), n, d_i),
        sigma_w=diffusion_from_spec(spec.get("sigma_w", {}), n, d_c),
        beta=beta,
        levy=levy,
        lipschitz=float(spec.get("lipschitz", 1.0)),
        name=spec.get("name", "model"),
    )


def scalar_model(
    b: float = 0.0,
    sigma_v: float = 0.0,
    sigma_w: float = 0.0,
    intensity: float = 0.0,
    mark_variance: float = 1.0,
    mark_mean: float = 0.0,
    common_jumps: bool = False,
    name: str = "scalar",
) -> JumpDiffusionModel:
    """One-dimensional constant-coefficient model, ``beta = theta``."""
    spec = {
        "n": 1,
        "d_i": 1,
        "d_c": 1,
        "drift": {"kind": "constant", "value": b},
        "sigma_v": {"kind": "constant", "value": sigma_v},
        "sigma_w": {"kind": "constant", "value": sigma_w},
        "name": name,
        "lipschitz": max(1.0, abs(b) + abs(sigma_v) + abs(sigma_w) + intensity * (abs(mark_mean) + np.sqrt(mark_variance))),
    }
    if intensity:
        spec["jumps"] = {"intensity": intensity, "variance": mark_variance, "mean": mark_mean, "common": common_jumps}
    return model_from_spec(spec)


def counterexample_model(sigma: float = 1.0) -> JumpDiffusionModel:
    """State ``(B, X)`` with ``dB = dW`` and ``dX = sigma dW + B dW0``."""
    return model_from_spec(
        {
            "n": 2,
            "d_i": 1,
            "d_c": 1,
            "sigma_v": {"kind": "constant", "value": [[1.0], [sigma]]},
            "sigma_w": {"kind": "state_component", "row": 1, "col": 0, "source": 0, "scale": 1.0},
            "lipschitz": 1.0 + abs(sigma),
            "name": "counterexample",
        }
    )
