"""Scenario configuration: YAML parsing, validation and canonical serialisation.

Numeric fields accept plain numbers or short arithmetic expressions such as
``0.7/pi`` or ``1/sqrt(2)``.  Inside a sweep, expressions may also refer to
the swept variable (``w`` or ``gamma``).  Expressions are kept verbatim so
that ``serialize(parse(text))`` is a fixed point.
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

__all__ = [
    "ScenarioConfig",
    "parse_number",
    "evaluate",
    "parse_config",
    "load_config",
    "serialize",
    "NOISE_KINDS",
]

NOISE_KINDS = ("quantum", "classical", "lindblad")

_FUNCS = {"sqrt": math.sqrt, "min": min, "max": max, "log": math.log, "exp": math.exp}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}


def evaluate(expr, variables: dict | None = None) -> float:
    """Evaluate a numeric literal or a restricted arithmetic expression."""
    if isinstance(expr, bool):
        raise ConfigError(f"expected a number, got {expr!r}")
    if isinstance(expr, (int, float)):
        return float(expr)
    if not isinstance(expr, str):
        raise ConfigError(f"expected a number or expression, got {expr!r}")
    names = {**_CONSTS, **(variables or {})}
    try:
        tree = ast.parse(expr.strip(), mode="eval")
    except SyntaxError as err:
        raise ConfigError(f"cannot parse expression {expr!r}") from err

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id not in names:
                raise ConfigError(f"unknown name {node.id!r} in {expr!r}")
            return float(names[node.id])
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](walk(node.left), walk(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            value = walk(node.operand)
            return -value if isinstance(node.op, ast.USub) else value
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            return float(_FUNCS[node.func.id](*[walk(a) for a in node.args]))
        raise ConfigError(f"unsupported syntax in expression {expr!r}")

    try:
        return walk(tree)
    except (ZeroDivisionError, ValueError, OverflowError) as err:
        raise ConfigError(f"cannot evaluate {expr!r}: {err}") from err


def parse_number(expr) -> float:
    return evaluate(expr)


# ----------------------------------------------------------------------------
# schema

_SCHEMA = {
    "name": str,
    "description": str,
    "model": {"N": int, "J": "num", "h": "num", "gamma": "num", "measured_site": int},
    "initial": {"kind": str, "terms": list},
    "noise_kind": str,
    "integrator": {
        "dt": "num",
        "t_final": "num",
        "scheme": str,
        "renormalize_every_step": bool,
        "seed": int,
        "sample_stride": "num",
        "lindblad_dt": "num?",
        "trap_epsilon": "num",
        "dwell": "num",
        "max_halvings": int,
    },
    "ensemble": {"size": int, "chunk_size": int, "workers": int, "reduce": bool},
    "outputs": {"directory": str, "trajectories": list, "lindblad": bool},
    "analysis": {
        "sync_sites": "sites",
        "tail_window": "num",
        "average_fraction": "num?",
        "steady_fraction": "num",
        "frequencies": "freqs",
        "histogram_bins": int,
        "thresholds": {
            "frequency_rel_tol": "num",
            "residual_max": "num",
            "drift_max": "num",
            "phase_tol": "num",
            "amplitude_floor": "num",
            "min_periods": "num",
        },
        "tolerances": {
            "hermitian": "num",
            "unitary": "num",
            "norm": "num",
            "trace": "num",
            "min_eigenvalue": "num",
            "eigh_residual": "num",
            "fidelity_clamp": "num",
            "imag_residue": "num",
        },
    },
    "sweep": {"w_values": list, "noise_kinds": list, "gammas": list},
}

_DEFAULTS = {
    "description": "",
    "model": {"J": 1.0, "h": 1.0},
    "noise_kind": "quantum",
    "integrator": {
        "dt": 1e-3,
        "scheme": "euler-maruyama",
        "renormalize_every_step": True,
        "seed": 0,
        "sample_stride": 0.05,
        "lindblad_dt": None,
        "trap_epsilon": 1e-3,
        "dwell": 1.0,
        "max_halvings": 3,
    },
    "ensemble": {"size": 500, "chunk_size": 250, "workers": 1, "reduce": True},
    "outputs": {"directory": "results", "trajectories": [0], "lindblad": True},
    "analysis": {
        "sync_sites": [1, "N"],
        "tail_window": 20.0,
        "average_fraction": None,
        "steady_fraction": 0.2,
        "frequencies": "auto",
        "histogram_bins": 30,
        "thresholds": {},
        "tolerances": {},
    },
}

_REQUIRED = {"name": None, "model": ["N", "gamma", "measured_site"], "initial": ["kind", "terms"], "integrator": ["t_final"]}


def _check(section: dict, schema: dict, path: str, sweep_vars: tuple) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    unknown = set(section) - set(schema)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {sorted(unknown)}")
    for key, value in section.items():
        kind = schema[key]
        where = f"{path}.{key}" if path else key
        if isinstance(kind, dict):
            _check(value, kind, where, sweep_vars)
        elif kind in ("num", "num?"):
            if value is None and kind == "num?":
                continue
            _check_number(value, where, sweep_vars)
        elif kind == "sites":
            if value != "auto" and not (isinstance(value, list) and len(value) == 2):
                raise ConfigError(f"{where} must be 'auto' or a pair of sites")
        elif kind == "freqs":
            if value != "auto" and value is not None and not isinstance(value, list):
                raise ConfigError(f"{where} must be 'auto', null or a list")
        elif kind is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{where} must be true or false")
        elif kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where} must be an integer, got {value!r}")
        elif not isinstance(value, kind):
            raise ConfigError(f"{where} must be of type {kind.__name__}")


def _check_number(value, where, sweep_vars):
    try:
        evaluate(value, {v: 1.0 for v in sweep_vars})
    except ConfigError as err:
        raise ConfigError(f"{where}: {err}") from err


def _merge(defaults: dict, given: dict) -> dict:
    out = {}
    for key in list(defaults) + [k for k in given if k not in defaults]:
        if key in given and isinstance(defaults.get(key), dict) and isinstance(given[key], dict):
            out[key] = _merge(defaults[key], given[key])
        elif key in given:
            out[key] = given[key]
        else:
            out[key] = defaults[key]
    return out


@dataclass
class ScenarioConfig:
    """Validated scenario description; ``data`` is the canonical nested mapping."""

    data: dict = field(default_factory=dict)
    source: str | None = None

    def __getitem__(self, key):
        return self.data[key]

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def sweep(self) -> dict:
        return self.data.get("sweep") or {}

    def number(self, section: str, key: str, variables: dict | None = None) -> float | None:
        value = self.data[section][key]
        return None if value is None else evaluate(value, variables)

    def with_updates(self, updates: dict) -> "ScenarioConfig":
        """Return a new config with nested ``updates`` merged in and revalidated."""
        merged = _merge(self.data, updates)
        return parse_config(merged)


def parse_config(source) -> ScenarioConfig:
    """Parse YAML text or a mapping into a validated :class:`ScenarioConfig`."""
    text = None
    if isinstance(source, str):
        text = source
        try:
            raw = yaml.safe_load(source)
        except yaml.YAMLError as err:
            raise ConfigError(f"invalid YAML: {err}") from err
    else:
        raw = source
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    sweep_vars = tuple(v for v, k in (("w", "w_values"), ("gamma", "gammas")) if k in (raw.get("sweep") or {}))
    _check(raw, _SCHEMA, "", sweep_vars)
    for section, keys in _REQUIRED.items():
        if section not in raw:
            raise ConfigError(f"missing required section {section!r}")
        for key in keys or []:
            if key not in raw[section]:
                raise ConfigError(f"missing required key {section}.{key}")
    data = _merge(_DEFAULTS, raw)
    if data["noise_kind"] not in NOISE_KINDS:
        raise ConfigError(f"noise_kind must be one of {NOISE_KINDS}")
    model = data["model"]
    if not 2 <= model["N"] <= 10:
        raise ConfigError(f"model.N must lie in 2..10, got {model['N']}")
    if not 1 <= model["measured_site"] <= model["N"]:
        raise ConfigError("model.measured_site must lie in 1..N")
    for term in data["initial"]["terms"]:
        if not (isinstance(term, list) and len(term) == 2 and isinstance(term[0], str)):
            raise ConfigError(f"initial.terms entries must be [label, value], got {term!r}")
    for kind in data.get("sweep", {}).get("noise_kinds", []) or []:
        if kind not in NOISE_KINDS:
            raise ConfigError(f"sweep.noise_kinds entry {kind!r} not in {NOISE_KINDS}")
    if data["ensemble"]["size"] < 1 or data["ensemble"]["chunk_size"] < 1 or data["ensemble"]["workers"] < 1:
        raise ConfigError("ensemble size, chunk_size and workers must be positive")
    return ScenarioConfig(data=data, source=text)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text)


def serialize(config: ScenarioConfig) -> str:
    """Canonical YAML text of a config (all defaults made explicit)."""
    return yaml.safe_dump(config.data, sort_keys=False, default_flow_style=None, width=100)
