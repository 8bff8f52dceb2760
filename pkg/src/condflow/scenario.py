"""Scenario files: YAML schema, validation with line context, and builders.

A scenario has the sections ``name``, ``model``, ``grid``, ``particles``,
``functional``, ``experiment`` and ``seeds``; ``docs/scenario_schema.md``
documents every key.  Validation rejects unknown keys, unresolvable catalog
names and type mismatches, naming the section and the source line.  After
validation every default is filled in, so the resolved dictionary is a
complete description of the run and its hash identifies it.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .control import (
    ControlProblem,
    ValueFunction,
    constant_value_function,
    linear_drift_value_function,
    moment_value_function,
    reward_from_spec,
    terminal_from_spec,
)
from .copies import InitialSampler, constant_initial, gaussian_initial
from .core import JumpDiffusionModel, TimeGrid, build_time_grid
from .cylindrical import OUTER_FUNCTIONS, TEST_FUNCTIONS, CylindricalFunctional, cylindrical, make_test_function, outer_function
from .errors import InvalidArgument
from .models import model_from_spec
from .rng import derive_seed

NUMBER = (int, float)


class ScenarioError(InvalidArgument):
    """Invalid scenario; the message carries the section path and line."""


@dataclass(frozen=True)
class Key:
    types: tuple
    required: bool = False
    default: Any = None
    choices: tuple | None = None
    element: tuple | None = None
    nonempty: bool = False
    positive: bool = False


@dataclass(frozen=True)
class Catalog:
    """A ``{kind: ..., params}`` mapping; ``kinds`` maps each kind to its parameter keys."""

    kinds: dict
    default_kind: str | None = None
    name_key: str = "kind"
    defaults: dict | None = None


@dataclass(frozen=True)
class ListOf:
    item: Any
    default: Any = None


F = Key((int, float))
VEC = Key((int, float, list))

DRIFT = Catalog(
    {
        "constant": {"value": VEC},
        "linear": {"slope": VEC, "intercept": VEC},
        "sine": {"amplitude": VEC},
        "action": {"scale": VEC},
    },
    "constant",
)
DIFFUSION = Catalog(
    {
        "constant": {"value": VEC},
        "state_component": {
            "row": Key((int,)),
            "col": Key((int,)),
            "source": Key((int,)),
            "scale": F,
            "base": VEC,
        },
        "bounded": {"level": F, "amplitude": F},
    },
    "constant",
)
INITIAL = Catalog({"constant": {"value": VEC}, "gaussian": {"mean": VEC, "std": VEC}}, "constant")
REWARD = Catalog(
    {
        "zero": {},
        "constant": {"value": F},
        "action_cost": {"scale": F},
        **{k: {"scale": F, "component": Key((int,))} for k in ("identity", "square", "tanh", "cos")},
    },
    "zero",
)
JUMPS = {
    "intensity": Key(NUMBER, default=0.0),
    "marks": Key((str,), default="gaussian", choices=("gaussian",)),
    "mean": Key(NUMBER, default=0.0),
    "variance": Key(NUMBER, default=1.0),
    "scale": Key(NUMBER, default=1.0),
    "common": Key((bool,), default=False),
    "p_max": Key(NUMBER, default=8.0),
}
PROCESS = Catalog({"none": {}, "one": {}, "component": {"component": Key((int,))}}, "one")
ETA = Catalog(PROCESS.kinds, "none")
VALUE = Catalog(
    {
        "linear_drift": {"slope": F},
        "moment": {"test": Key((str,)), "c": F},
        "constant": {"c": F},
        "kolmogorov": {},
    },
    "linear_drift",
)

SCHEMA = {
    "name": Key((str,), required=True),
    "description": Key((str,), default=""),
    "model": {
        "name": Key((str,), default="model"),
        "n": Key((int,), default=1, positive=True),
        "d_i": Key((int,), default=1),
        "d_c": Key((int,), default=1),
        "drift": DRIFT,
        "sigma_v": DIFFUSION,
        "sigma_w": DIFFUSION,
        "jumps": JUMPS,
        "lipschitz": Key(NUMBER, default=1.0),
        "initial": INITIAL,
        "actions": Key((list,), default=None, element=(int, float)),
    },
    "grid": {
        "T": Key(NUMBER, default=1.0, positive=True),
        "K": Key((list,), required=True, element=(int,), nonempty=True, positive=True),
    },
    "particles": {
        "M": Key((list,), required=True, element=(int,), nonempty=True, positive=True),
        "n_copies": Key((int,), default=None, positive=True),
    },
    "functional": {
        "outer": Catalog({k: None for k in OUTER_FUNCTIONS}, "power", "name", {"k": 2}),
        "tests": ListOf(Catalog({k: None for k in TEST_FUNCTIONS}, "tanh", "name"), default=[{"name": "tanh"}]),
        "f": REWARD,
        "g": REWARD,
        "growth": Key(NUMBER, default=1.0),
    },
    "experiment": {
        "pool": Key((str,), default="shared", choices=("shared", "disjoint")),
        "tolerance": {"a": Key(NUMBER), "b": Key(NUMBER), "c": Key(NUMBER, default=0.0), "factor": Key(NUMBER, default=3.0)},
        "pilot": {
            "K": Key((list,), default=None, element=(int,), positive=True),
            "M": Key((list,), default=None, element=(int,), positive=True),
            "n_common": Key((int,), default=20, positive=True),
        },
        "y_source": Key((str,), default="none", choices=("none", "base")),
        "y0": Key((list,), default=None, element=(int, float)),
        "t_index": Key((int,), default=None),
        "level": Key(NUMBER, default=0.01),
        "confidence": Key(NUMBER, default=0.99),
        "min_common": Key((int,), default=100),
        "t_threshold": Key(NUMBER, default=4.0),
        "z_threshold": Key(NUMBER, default=3.0),
        "violation_threshold": Key(NUMBER, default=5.0),
        "relative_tolerance": Key(NUMBER, default=0.05),
        "integrand": PROCESS,
        "eta": ETA,
        "statistics": ListOf(Catalog({k: None for k in TEST_FUNCTIONS}, "identity", "name"), default=[{"name": "identity"}]),
        "negative_controls": Key((bool,), default=False),
        "analytic": Key((str,), default="none", choices=("none", "counterexample")),
        "x_component": Key((int,), default=0),
        "y_component": Key((int,), default=1),
        "value": VALUE,
        "switch_nodes": Key((list,), default=None, element=(int,)),
        "oracle": {
            "x_max": Key(NUMBER, default=8.0),
            "nx": Key((int,), default=801),
            "nt_per_step": Key((int,), default=8),
        },
        "budget": Key((int,), default=10_000, positive=True),
        "double_jump": Key((bool,), default=True),
        "slope_dt": Key((list,), default=[0.35, 1.1], element=(int, float)),
        "slope_M": Key((list,), default=[0.35, 0.65], element=(int, float)),
        "export_paths": Key((int,), default=2),
    },
    "seeds": {
        "master": Key((int,), required=True),
        "n_common": Key((int,), default=10, positive=True),
        "n_repeats": Key((int,), default=1, positive=True),
    },
}


# line bookkeeping


def _line_index(text: str) -> dict:
    """Map key paths (tuples) to 1-based source lines."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from None
    lines: dict = {}

    def walk(node, path):
        lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = (*path, k.value)
                lines[key] = k.start_mark.line + 1
                walk(v, key)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, (*path, i))

    if root is not None:
        walk(root, ())
    return lines


class _Ctx:
    def __init__(self, lines: dict):
        self.lines = lines

    def where(self, path) -> str:
        section = ".".join(str(p) for p in path) or "<root>"
        probe = tuple(path)
        while probe and probe not in self.lines:
            probe = probe[:-1]
        line = self.lines.get(probe)
        return f"section '{section}'" + (f" (line {line})" if line else "")

    def fail(self, path, message):
        raise ScenarioError(f"{self.where(path)}: {message}")


# validation


def _check_type(ctx, path, value, key: Key):
    if value is None:
        return value
    if key.types == NUMBER or set(key.types) <= {int, float, list}:
        if isinstance(value, bool) and bool not in key.types:
            ctx.fail(path, f"expected {_names(key.types)}, got bool")
    if int in key.types and float not in key.types and isinstance(value, float) and value.is_integer():
        value = int(value)
    if float in key.types and isinstance(value, int) and not isinstance(value, bool):
        value = value if int in key.types else float(value)
    if list in key.types and key.element and not isinstance(value, list) and isinstance(value, key.element):
        value = [value]
    if not isinstance(value, key.types):
        ctx.fail(path, f"expected {_names(key.types)}, got {type(value).__name__}")
    if key.choices is not None and value not in key.choices:
        ctx.fail(path, f"value {value!r} not in {list(key.choices)}")
    if isinstance(value, list):
        if key.nonempty and not value:
            ctx.fail(path, "list must be nonempty")
        if key.element:
            for i, item in enumerate(value):
                if isinstance(item, bool) or not isinstance(item, key.element):
                    ctx.fail((*path, i), f"expected {_names(key.element)} entries, got {type(item).__name__}")
        if key.positive and any(v <= 0 for v in value):
            ctx.fail(path, "entries must be positive")
    elif key.positive and isinstance(value, NUMBER) and value <= 0:
        ctx.fail(path, f"must be positive, got {value}")
    return value


def _names(types) -> str:
    return " or ".join(t.__name__ for t in types)


def _validate_mapping(ctx, path, data, schema: dict) -> dict:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        ctx.fail(path, f"expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(schema), key=str)
    if unknown:
        ctx.fail(path, f"unknown key(s) {', '.join(map(str, unknown))}; allowed: {', '.join(sorted(schema))}")
    out = {}
    for name, spec in schema.items():
        sub = (*path, name)
        present = name in data
        value = data.get(name)
        if isinstance(spec, Key):
            if not present:
                if spec.required:
                    ctx.fail(sub, "missing required key")
                out[name] = copy.deepcopy(spec.default)
                continue
            out[name] = _check_type(ctx, sub, value, spec)
        elif isinstance(spec, Catalog):
            out[name] = _validate_catalog(ctx, sub, value, spec)
        elif isinstance(spec, ListOf):
            items = copy.deepcopy(spec.default) if not present else value
            if not isinstance(items, list):
                ctx.fail(sub, f"expected a list, got {type(items).__name__}")
            out[name] = [_validate_catalog(ctx, (*sub, i), item, spec.item) for i, item in enumerate(items)]
        else:
            out[name] = _validate_mapping(ctx, sub, value, spec)
    return out


def _validate_catalog(ctx, path, data, cat: Catalog) -> dict:
    if data is None:
        data = {cat.name_key: cat.default_kind, **(cat.defaults or {})}
    if isinstance(data, str):
        data = {cat.name_key: data}
    if not isinstance(data, dict):
        ctx.fail(path, f"expected a catalog mapping, got {type(data).__name__}")
    kind = data.get(cat.name_key, cat.default_kind)
    if kind not in cat.kinds:
        ctx.fail(path, f"unknown {cat.name_key} {kind!r}; known: {', '.join(sorted(cat.kinds))}")
    params = cat.kinds[kind]
    rest = {k: v for k, v in data.items() if k != cat.name_key}
    if params is None:
        # free parameters, checked when the catalog entry is built
        out = {cat.name_key: kind}
        out.update(rest)
        return out
    out = {cat.name_key: kind}
    out.update(_validate_mapping(ctx, path, rest, params))
    return {k: v for k, v in out.items() if v is not None}


# scenario object


@dataclass(frozen=True)
class Scenario:
    """Validated scenario with all defaults filled in."""

    data: dict
    source: str = ""

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def model_spec(self) -> dict:
        return self.data["model"]

    @property
    def T(self) -> float:
        return float(self.data["grid"]["T"])

    @property
    def K_list(self) -> list[int]:
        return list(self.data["grid"]["K"])

    @property
    def M_list(self) -> list[int]:
        return list(self.data["particles"]["M"])

    @property
    def n_copies(self) -> int:
        n = self.data["particles"]["n_copies"]
        return int(n) if n is not None else self.M_list[-1]

    @property
    def experiment(self) -> dict:
        return self.data["experiment"]

    @property
    def seeds(self) -> dict:
        return self.data["seeds"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def hash(self) -> str:
        return scenario_hash(self.data)

    def with_master_seed(self, seed: int) -> "Scenario":
        data = self.to_dict()
        data["seeds"]["master"] = int(seed)
        return Scenario(data, self.source)

    # builders

    def build_model(self) -> JumpDiffusionModel:
        return build_model(self.data["model"])

    def build_initial(self) -> InitialSampler:
        return build_initial(self.data["model"]["initial"])

    def build_grid(self, K: int | None = None) -> TimeGrid:
        return build_time_grid(self.T, self.K_list[-1] if K is None else K)

    def build_functional(self) -> CylindricalFunctional:
        return build_functional(self.data["functional"], self.data["model"]["n"])

    def build_statistics(self) -> list:
        return build_tests(self.experiment["statistics"], self.data["model"]["n"], ("experiment", "statistics"))

    def build_control_problem(self):
        return build_control_problem(self.data, self.T)

    def build_value_function(self):
        return build_value_function(self.experiment["value"], self.T, self.data["model"]["n"])

    def common_seeds(self, n: int | None = None, stream: str = "common") -> list[int]:
        master = int(self.seeds["master"])
        count = int(self.seeds["n_common"]) if n is None else int(n)
        return [derive_seed(master, stream, i) for i in range(count)]


def build_model(spec: dict) -> JumpDiffusionModel:
    spec = dict(spec)
    spec.pop("initial", None)
    spec.pop("actions", None)
    jumps = spec.get("jumps") or {}
    if not jumps.get("intensity"):
        spec.pop("jumps", None)
    return model_from_spec(spec)


def build_initial(spec: dict) -> InitialSampler:
    if spec["kind"] == "gaussian":
        return gaussian_initial(spec.get("mean", 0.0), spec.get("std", 1.0))
    return constant_initial(spec.get("value", 0.0))


def _located(path: tuple, message: str) -> ScenarioError:
    exc = ScenarioError(f"section '{'.'.join(map(str, path))}': {message}")
    exc.path = path
    return exc


def build_tests(specs: list, d: int, path: tuple = ("tests",)) -> list:
    out = []
    for i, t in enumerate(specs):
        t = dict(t)
        name = t.pop("name")
        t.setdefault("d", d)
        try:
            out.append(make_test_function(name, **t))
        except (TypeError, InvalidArgument) as exc:
            raise _located((*path, i), f"bad parameters for {name!r}: {exc}") from None
    return out


def build_functional(spec: dict, d: int) -> CylindricalFunctional:
    outer = dict(spec["outer"])
    name = outer.pop("name")
    try:
        f = outer_function(name, **outer)
    except TypeError as exc:
        raise _located(("functional", "outer"), f"bad parameters for {name!r}: {exc}") from None
    tests = build_tests(spec["tests"], d, ("functional", "tests"))
    try:
        return cylindrical(f, tests, d)
    except InvalidArgument as exc:
        raise _located(("functional",), str(exc)) from None


def build_control_problem(data: dict, T: float) -> ControlProblem:
    model_spec = data["model"]
    n = model_spec["n"]
    actions = model_spec["actions"] if model_spec["actions"] is not None else [0.0]
    fn = data["functional"]
    try:
        f = reward_from_spec(fn["f"], n)
        g = terminal_from_spec(fn["g"], n)
    except InvalidArgument as exc:
        raise _located(("functional",), str(exc)) from None
    return ControlProblem(build_model(model_spec), tuple(float(a) for a in actions), f, g, float(fn["growth"]), T, data["name"])


def build_value_function(spec: dict, T: float, d: int) -> ValueFunction | None:
    """Candidate value function; ``None`` for the PDE oracle (``kolmogorov``)."""
    kind = spec["kind"]
    if kind == "linear_drift":
        return linear_drift_value_function(T, float(spec.get("slope", 1.0)), d)
    if kind == "constant":
        return constant_value_function(float(spec.get("c", 0.0)), d)
    if kind == "moment":
        c = float(spec.get("c", 0.0))
        return moment_value_function(make_test_function(spec.get("test", "tanh"), d=d), lambda t: c, lambda t: 0.0)
    return None


def scenario_hash(data: dict) -> str:
    """SHA-256 of the canonical JSON rendering; independent of key order."""
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _trial_build(ctx: _Ctx, data: dict):
    try:
        build_model(data["model"])
    except InvalidArgument as exc:
        ctx.fail(("model",), str(exc))
    model = data["model"]
    for key in ("drift", "sigma_v", "sigma_w", "initial"):
        spec = model[key]
        for field_name in ("value", "slope", "intercept", "amplitude", "scale", "mean", "std", "base"):
            v = spec.get(field_name)
            if isinstance(v, list) and not all(isinstance(x, (int, float, list)) for x in v):
                ctx.fail(("model", key, field_name), "expected numeric entries")
    try:
        build_functional(data["functional"], model["n"])
    except ScenarioError as exc:
        path = getattr(exc, "path", ("functional",))
        ctx.fail(path, str(exc).split(": ", 1)[-1])
    try:
        build_tests(data["experiment"]["statistics"], model["n"], ("experiment", "statistics"))
    except ScenarioError as exc:
        ctx.fail(exc.path, str(exc).split(": ", 1)[-1])
    try:
        build_control_problem(data, float(data["grid"]["T"]))
    except ScenarioError as exc:
        ctx.fail(exc.path, str(exc).split(": ", 1)[-1])
    if data["experiment"]["value"]["kind"] == "moment":
        test = data["experiment"]["value"].get("test", "tanh")
        if test not in TEST_FUNCTIONS:
            ctx.fail(("experiment", "value", "test"), f"unknown test function {test!r}")


def validate_scenario(raw: Any, lines: dict | None = None, source: str = "") -> Scenario:
    ctx = _Ctx(lines or {})
    data = _validate_mapping(ctx, (), raw, SCHEMA)
    if data["model"]["n"] < 1:
        ctx.fail(("model", "n"), "state dimension must be >= 1")
    _trial_build(ctx, data)
    return Scenario(data, source)


def parse_scenario_text(text: str, source: str = "<string>") -> Scenario:
    lines = _line_index(text)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"malformed scenario {source}: {exc}") from None
    return validate_scenario(raw, lines, source)


def parse_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return parse_scenario_text(text, str(path))


def dump_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.to_dict(), sort_keys=True, default_flow_style=None)


