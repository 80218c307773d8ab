"""Run configuration: schema, loading, resolution and round-trip emission.

Configs are nested key/value documents (YAML). Scalars given where a
per-bus vector is expected broadcast over the device buses. ``load_config``
reports syntax errors with the parser's line/column mark and semantic
errors with the offending key path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .controller import CapacityLimits, ControllerParams, CostModel
from .network import load_network
from .sim import Profiles, Scenario, read_profiles_csv, synth_profiles

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """A configuration document is syntactically or semantically invalid."""


def _require(mapping, key, path):
    if key not in mapping:
        raise ConfigError(f"missing required key '{path}{key}'")
    return mapping[key]


def _as_float(value, path):
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{path}' must be a number, got {value!r}") from exc


def _as_vector(value, n, path):
    if isinstance(value, (int, float)):
        return float(value) * np.ones(n)
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{path}' must be a number or list of numbers") from exc
    if arr.shape != (n,):
        raise ConfigError(f"'{path}' must have {n} entries, got shape {arr.shape}")
    return arr


@dataclass
class RunConfig:
    """Fully resolved run description."""

    network_path: str
    net: object
    params: ControllerParams
    cost: CostModel
    limits: CapacityLimits
    scenario: Scenario
    output_dir: str
    seed: int
    raw: dict = field(default_factory=dict)


def _resolve_profiles(block, net, seed, limits, path):
    kind = block.get("kind", "static")
    if kind == "static":
        p = _as_vector(block.get("p", 0.0), net.n, path + "p")
        q_exo = _as_vector(block.get("q_exo", 0.0), net.n, path + "q_exo")
        return Profiles(p=p, q_exo=q_exo)
    if kind == "csv":
        csv_path = _require(block, "path", path)
        if not os.path.exists(csv_path):
            raise ConfigError(f"profile file '{csv_path}' does not exist")
        return read_profiles_csv(csv_path, net.n)
    if kind in ("static-heavy", "daily"):
        kwargs = {k: v for k, v in block.items() if k not in ("kind",)}
        return synth_profiles(kind, net, seed, limits=limits, **kwargs)
    raise ConfigError(f"'{path}kind' must be one of static, csv, static-heavy, daily; got {kind!r}")


def resolve_config(data, base_dir="."):
    """Turn a parsed config mapping into a ``RunConfig``."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {version}, expected {CONFIG_SCHEMA_VERSION}"
        )
    seed = int(data.get("seed", 0))

    network_path = _require(data, "network", "")
    if not os.path.isabs(network_path):
        network_path = os.path.join(base_dir, network_path)
    if not os.path.exists(network_path):
        raise ConfigError(f"network file '{network_path}' does not exist")
    net = load_network(network_path)
    n = net.n

    cblock = _require(data, "controller", "")
    params = ControllerParams(
        alpha=_as_float(_require(cblock, "alpha", "controller."), "controller.alpha"),
        beta=_as_float(_require(cblock, "beta", "controller."), "controller.beta"),
        gamma=_as_float(_require(cblock, "gamma", "controller."), "controller.gamma"),
        c=_as_float(_require(cblock, "c", "controller."), "controller.c"),
        d=_as_float(cblock.get("d", 0.0), "controller.d"),
    )
    cost_block = cblock.get("cost", {})
    cost = CostModel(
        a=_as_vector(cost_block.get("a", 0.0), n, "controller.cost.a"),
        b=_as_vector(cost_block.get("b", 0.0), n, "controller.cost.b"),
    )

    lblock = _require(data, "limits", "")
    try:
        limits = CapacityLimits(
            q_low=_as_vector(_require(lblock, "q_low", "limits."), n, "limits.q_low"),
            q_high=_as_vector(_require(lblock, "q_high", "limits."), n, "limits.q_high"),
            v_low=_as_vector(_require(lblock, "v_low", "limits."), n, "limits.v_low"),
            v_high=_as_vector(_require(lblock, "v_high", "limits."), n, "limits.v_high"),
        )
    except ValueError as exc:
        raise ConfigError(f"limits: {exc}") from exc

    sblock = _require(data, "scenario", "")
    profiles = _resolve_profiles(sblock.get("profiles", {}), net, seed, limits, "scenario.profiles.")
    controllable = sblock.get("controllable")
    try:
        scenario = Scenario(
            profiles=profiles,
            horizon=int(_require(sblock, "horizon", "scenario.")),
            plant=sblock.get("plant", "linearized"),
            tick_seconds=_as_float(sblock.get("tick_seconds", 6.0), "scenario.tick_seconds"),
            noise_sigma=_as_float(sblock.get("noise_sigma", 0.0), "scenario.noise_sigma"),
            meas_delay=int(sblock.get("meas_delay", 0)),
            comm_delay_max=int(sblock.get("comm_delay_max", 0)),
            model_error_pct=_as_float(sblock.get("model_error_pct", 0.0), "scenario.model_error_pct"),
            seed=seed,
            controllable=tuple(controllable) if controllable else None,
            include_coupling_cost=bool(sblock.get("include_coupling_cost", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from exc

    try:
        from .controller import check_strong_convexity
        from .network import sensitivity_matrices

        mats = sensitivity_matrices(net)
        if scenario.controllable is not None:
            idx = np.asarray(scenario.controllable, dtype=int) - 1
            d_eff = params.d if scenario.include_coupling_cost else 0.0
            check_strong_convexity(cost.restrict(np.asarray(scenario.controllable)), d_eff, mats.X[np.ix_(idx, idx)])
        else:
            check_strong_convexity(cost, params.d, mats.X)
    except ValueError as exc:
        raise ConfigError(f"controller.cost: {exc}") from exc

    # network paths resolve against the config file, output paths against
    # the working directory (override with --output-dir)
    return RunConfig(
        network_path=network_path,
        net=net,
        params=params,
        cost=cost,
        limits=limits,
        scenario=scenario,
        output_dir=data.get("output_dir", "out"),
        seed=seed,
        raw=data,
    )


def load_config(path, overrides=None):
    """Parse and resolve a config file; ``overrides`` maps dotted keys to values."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file '{path}' does not exist") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse '{path}'{where}: {getattr(exc, 'problem', exc)}") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    return resolve_config(data, base_dir=os.path.dirname(os.path.abspath(path)))


def apply_overrides(data, overrides):
    out = yaml.safe_load(yaml.safe_dump(data))  # deep copy via round trip
    for dotted, value in overrides.items():
        keys = dotted.split(".")
        node = out
        for key in keys[:-1]:
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override '{dotted}': '{key}' is not a mapping")
            node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override '{dotted}'")
        node[keys[-1]] = yaml.safe_load(str(value))
    return out


def emit_config(data):
    """Canonical text form; ``parse(emit(x))`` equals ``x``."""
    return yaml.safe_dump(data, sort_keys=False)


def parse_config_text(text):
    return yaml.safe_load(text)
