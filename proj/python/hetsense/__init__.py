"""Python bindings for the hetsense simulator.

Configuration is passed as a flat mapping of dotted keys, the same keys the
CLI config files use (``model.d``, ``optimizer.eta``, ``grid`` ...). Values may
be numbers, booleans, strings or sequences.
"""

from collections.abc import Mapping, Sequence

import numpy as np

from . import _hetsense
from ._hetsense import (
    ConfigError,
    DimensionError,
    DomainError,
    EnvironmentDistribution,
    GroundTruthModel,
    __version__,
    check_supermartingale,
    compute_metrics,
    cr_sequence,
    decompose,
    known_config_keys,
    make_ground_truth,
    recovery_error,
    subspace_angle,
)


def _text(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    if isinstance(value, Sequence):
        return ", ".join(_text(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(config, prefix=""):
    flat = {}
    for key, value in (config or {}).items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = _text(value)
    return flat


def resolve_config(config=None, experiment="single-run"):
    """Full key-value configuration after defaults are applied."""
    return _hetsense.resolve_config(_flatten(config), experiment)


def config_digest(config=None, experiment="single-run"):
    return _hetsense.config_digest(_flatten(config), experiment)


def run(config=None, seed=1):
    """One run; returns per-step columns as numpy arrays plus the final iterate."""
    out = _hetsense.run_single(_flatten(config), int(seed))
    records = out["records"]
    for key, column in records.items():
        if key != "env_id":
            records[key] = np.asarray(column)
    return out


def run_experiment(config=None, experiment="single-run"):
    """Runs a full experiment and writes its files under ``output_dir``."""
    return _hetsense.run_experiment(_flatten(config), experiment)


__all__ = [
    "ConfigError",
    "DimensionError",
    "DomainError",
    "EnvironmentDistribution",
    "GroundTruthModel",
    "__version__",
    "check_supermartingale",
    "compute_metrics",
    "config_digest",
    "cr_sequence",
    "decompose",
    "known_config_keys",
    "make_ground_truth",
    "recovery_error",
    "resolve_config",
    "run",
    "run_experiment",
    "subspace_angle",
]
