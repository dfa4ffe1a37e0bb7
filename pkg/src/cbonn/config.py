"""Experiment configuration: defaults per experiment/method, YAML round-trip,
dotted-key overrides, and schema validation.

The resolved config is a plain nested dict with a fixed schema so it can be
echoed to stdout, hashed into run metadata, and fed back through --config to
reproduce a run byte for byte.
"""

from __future__ import annotations

import copy
import hashlib
import math
import os

import yaml

EXPERIMENTS = ("sine", "mnist", "multitask", "square_ot")

METHODS_BY_EXPERIMENT = {
    "sine": ("cbo", "adam", "hybrid"),
    "mnist": ("cbo", "adam", "hybrid"),
    "multitask": ("multitask_cbo",),
    "square_ot": ("ot_cbo",),
}

OUT_DIR_ENV = "CBONN_OUT_DIR"


class ConfigError(ValueError):
    """Invalid experiment configuration or override."""


# type spec: (python types accepted, allow None)
_SCHEMA = {
    "experiment": (str, False),
    "method": (str, False),
    "epochs": (int, False),
    "seeds": (list, False),
    "out_dir": (str, False),
    "workers": (int, False),
    "network.width": (int, False),
    "network.reduction": (str, False),
    "data.size": (int, False),
    "data.noise_std": (float, False),
    "data.batch_size": (int, False),
    "data.tasks": (int, True),
    "data.subset": (int, True),
    "data.images": (str, True),
    "data.labels": (str, True),
    "optimizer.particles": (int, False),
    "optimizer.lam": (float, False),
    "optimizer.sigma": (float, False),
    "optimizer.alpha": (float, False),
    "optimizer.dt": (float, False),
    "optimizer.gamma": (float, True),
    "optimizer.beta1": (float, False),
    "optimizer.beta2": (float, False),
    "optimizer.delta": (float, False),
    "optimizer.init_low": (float, False),
    "optimizer.init_high": (float, False),
    "schedule.alpha_enabled": (bool, False),
    "schedule.alpha_factor": (float, False),
    "schedule.alpha_every": (int, False),
    "schedule.alpha_cap": (float, False),
    "schedule.sigma_enabled": (bool, False),
    "schedule.sigma_factor": (float, False),
    "schedule.sigma_every": (int, False),
}

_COMMON = {
    "out_dir": None,  # filled from env or ./runs at resolve time
    "workers": 1,
    "optimizer.beta1": 0.9,
    "optimizer.beta2": 0.999,
    "optimizer.delta": 1e-8,
    "optimizer.init_low": -1.0,
    "optimizer.init_high": 1.0,
    "schedule.alpha_enabled": False,
    "schedule.alpha_factor": 10.0,
    "schedule.alpha_every": 100,
    "schedule.alpha_cap": 1e7,
    "schedule.sigma_enabled": False,
    "schedule.sigma_factor": 0.9,
    "schedule.sigma_every": 100,
    "data.tasks": None,
    "data.subset": None,
    "data.images": None,
    "data.labels": None,
    "optimizer.gamma": None,
}

# Experiment blocks at published scale; desk-scale runs override size/width/
# epochs/particles.  Epoch counts are our defaults (unstated at source).
_DEFAULTS = {
    ("sine", "cbo"): {
        "epochs": 500,
        "network.width": 100,
        "network.reduction": "sum",
        "data.size": 8000,
        "data.noise_std": 0.01,
        "data.batch_size": 800,
        "optimizer.particles": 200,
        "optimizer.lam": 1.0,
        "optimizer.sigma": math.sqrt(1.6),
        "optimizer.alpha": 1e5,
        "optimizer.dt": 0.1,
        "schedule.alpha_enabled": True,
    },
    ("sine", "adam"): {
        "epochs": 500,
        "network.width": 100,
        "network.reduction": "sum",
        "data.size": 8000,
        "data.noise_std": 0.01,
        "data.batch_size": 800,
        "optimizer.particles": 2,
        "optimizer.lam": 1.0,
        "optimizer.sigma": math.sqrt(1.6),
        "optimizer.alpha": 1e5,
        "optimizer.dt": 0.1,
    },
    ("sine", "hybrid"): {
        "epochs": 500,
        "network.width": 100,
        "network.reduction": "sum",
        "data.size": 8000,
        "data.noise_std": 0.01,
        "data.batch_size": 800,
        "optimizer.particles": 200,
        "optimizer.lam": 1.0,
        "optimizer.sigma": math.sqrt(1.2),
        "optimizer.alpha": 1e4,
        "optimizer.dt": 0.1,
        "optimizer.gamma": 0.7,
        "schedule.alpha_enabled": True,
    },
    ("mnist", "cbo"): {
        "epochs": 50,
        "network.width": 20,
        "network.reduction": "sum",
        "data.size": 10000,
        "data.noise_std": 0.0,
        "data.batch_size": 1000,
        "data.subset": 10000,
        "optimizer.particles": 1000,
        "optimizer.lam": 1.0,
        "optimizer.sigma": math.sqrt(1.4),
        "optimizer.alpha": 1e5,
        "optimizer.dt": 0.1,
    },
    ("mnist", "adam"): {
        "epochs": 50,
        "network.width": 20,
        "network.reduction": "sum",
        "data.size": 10000,
        "data.noise_std": 0.0,
        "data.batch_size": 1000,
        "data.subset": 10000,
        "optimizer.particles": 2,
        "optimizer.lam": 1.0,
        "optimizer.sigma": math.sqrt(1.4),
        "optimizer.alpha": 1e5,
        "optimizer.dt": 0.1,
    },
    ("mnist", "hybrid"): {
        "epochs": 50,
        "network.width": 20,
        "network.reduction": "sum",
        "data.size": 10000,
        "data.noise_std": 0.0,
        "data.batch_size": 1000,
        "data.subset": 10000,
        "optimizer.particles": 1000,
        "optimizer.lam": 1.0,
        "optimizer.sigma": math.sqrt(1.2),
        "optimizer.alpha": 1e4,
        "optimizer.dt": 0.1,
        "optimizer.gamma": 0.7,
    },
    ("multitask", "multitask_cbo"): {
        "epochs": 500,
        "network.width": 100,
        "network.reduction": "sum",
        "data.size": 8000,
        "data.noise_std": 0.0,
        "data.batch_size": 800,
        "data.tasks": 100,
        "optimizer.particles": 200,
        "optimizer.lam": 1.0,
        "optimizer.sigma": math.sqrt(1.8),
        "optimizer.alpha": 1e4,
        "optimizer.dt": 0.2,
        "schedule.alpha_enabled": True,
    },
    ("square_ot", "ot_cbo"): {
        "epochs": 500,
        "network.width": 20,
        "network.reduction": "mean",
        "data.size": 5000,
        "data.noise_std": 0.01,
        "data.batch_size": 2500,
        "optimizer.particles": 100,
        "optimizer.lam": 1.0,
        "optimizer.sigma": math.sqrt(1.2),
        "optimizer.alpha": 1e4,
        "optimizer.dt": 0.1,
        "optimizer.init_low": -2.0,
        "optimizer.init_high": 2.0,
        "schedule.alpha_enabled": True,
        "schedule.sigma_enabled": True,
    },
}


def _nest(flat: dict) -> dict:
    out: dict = {}
    for key, value in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def _flatten(nested: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in nested.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, full + "."))
        else:
            out[full] = value
    return out


def default_config(experiment: str, method: str) -> dict:
    """Resolved default config (nested dict) for an experiment/method pair."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    if method not in METHODS_BY_EXPERIMENT[experiment]:
        raise ConfigError(
            f"method {method!r} is not available for {experiment!r}; "
            f"choose from {METHODS_BY_EXPERIMENT[experiment]}"
        )
    flat = dict(_COMMON)
    flat.update(_DEFAULTS[(experiment, method)])
    flat["experiment"] = experiment
    flat["method"] = method
    flat["seeds"] = [0]
    if flat["out_dir"] is None:
        flat["out_dir"] = os.environ.get(OUT_DIR_ENV, "runs")
    return _nest(flat)


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """New config with dotted-key overrides applied; keys must be in-schema."""
    flat = _flatten(cfg)
    for key, value in overrides.items():
        if key == "seeds":
            flat[key] = _coerce_seeds(value)
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = _coerce(key, value)
    return _nest(flat)


def _coerce_seeds(value) -> list[int]:
    if isinstance(value, int):
        return [value]
    if isinstance(value, (list, tuple)) and all(isinstance(v, int) for v in value):
        return list(value)
    raise ConfigError(f"seeds must be an int or list of ints, got {value!r}")


def _coerce(key: str, value):
    want, nullable = _SCHEMA[key]
    if value is None:
        if nullable:
            return None
        raise ConfigError(f"{key} may not be null")
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, bool):
        raise ConfigError(f"{key} expects int, got bool")
    if not isinstance(value, want):
        raise ConfigError(f"{key} expects {want.__name__}, got {value!r}")
    return value


def validate(cfg: dict) -> dict:
    """Check every key against the schema and cross-field invariants."""
    flat = _flatten(cfg)
    seeds = flat.pop("seeds", None)
    if seeds is None:
        raise ConfigError("missing required key 'seeds'")
    for key in flat:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
    missing = [k for k in _SCHEMA if k != "seeds" and k not in flat]
    if missing:
        raise ConfigError(f"missing config keys: {missing}")
    out = {key: _coerce(key, value) for key, value in flat.items()}
    out["seeds"] = _coerce_seeds(seeds)

    if out["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {out['experiment']!r}")
    if out["method"] not in METHODS_BY_EXPERIMENT[out["experiment"]]:
        raise ConfigError(
            f"method {out['method']!r} is not available for {out['experiment']!r}"
        )
    if out["epochs"] < 0:
        raise ConfigError("epochs must be >= 0")
    if not 1 <= out["data.batch_size"] <= out["data.size"]:
        raise ConfigError("data.batch_size must be in [1, data.size]")
    if out["method"] == "hybrid" and out["optimizer.gamma"] is None:
        raise ConfigError("hybrid method requires optimizer.gamma")
    if out["method"] == "multitask_cbo":
        if not out["data.tasks"] or out["data.tasks"] < 2:
            raise ConfigError("multitask_cbo requires data.tasks >= 2")
        if out["optimizer.particles"] % out["data.tasks"] != 0:
            raise ConfigError("optimizer.particles must be a multiple of data.tasks")
    return _nest(out)


def check_shared_parameters(cfgs: list[dict]) -> None:
    """Methods compared within one experiment must share batch size and dt."""
    if len(cfgs) < 2:
        return
    first = _flatten(cfgs[0])
    for other in cfgs[1:]:
        flat = _flatten(other)
        if flat["experiment"] != first["experiment"]:
            raise ConfigError("cannot compare runs of different experiments")
        for key in ("data.batch_size", "optimizer.dt"):
            if flat[key] != first[key]:
                raise ConfigError(
                    f"{key} differs across compared methods "
                    f"({first[key]} vs {flat[key]}); shared parameters must be equal"
                )


def consensus_margin(cfg: dict) -> float:
    """2*lam - sigma^2; positive values are required for consensus formation."""
    flat = _flatten(cfg)
    return 2.0 * flat["optimizer.lam"] - flat["optimizer.sigma"] ** 2


def to_yaml(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def from_yaml(text: str) -> dict:
    loaded = yaml.safe_load(text)
    if not isinstance(loaded, dict):
        raise ConfigError("config file must hold a mapping")
    return validate(loaded)


def load(path: str) -> dict:
    with open(path) as f:
        return from_yaml(f.read())


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(to_yaml(cfg).encode()).hexdigest()[:16]
