"""Run configuration files.

A configuration is a TOML document with the sections ``[problem]``,
``[solver]``, ``[output]`` and, for the corresponding subcommands,
``[phase]`` and ``[sweep]``. Every key is checked against :data:`SCHEMA`
before any computation; unknown keys are rejected by name. A run manifest
(JSON) whose ``"config"`` entry holds a resolved configuration is accepted
in place of a TOML file, which is how runs are replayed.
"""
from __future__ import annotations

import copy
import json
import math
import sys
from pathlib import Path
from typing import Any, Dict, Mapping

from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = ["SCHEMA", "DEFAULTS", "load_config", "parse_config", "validate", "solver_config",
           "problem_from_config"]

_num = (int, float)

#: section -> key -> (accepted types, default); ``None`` default means optional.
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "problem": {
        "name": (str, "elliptic-tc1"),
        "n": (int, 256),
        "gamma": (_num, None),
        "profile": (str, None),
        "seed": (int, 0),
        "threshold": (_num, None),
    },
    "solver": {
        "J": (int, 1000),
        "M": (int, None),
        "lambda2": (_num, 0.0),
        "Lambda": (list, None),
        "T_fin": (_num, math.inf),
        "n_tot": (int, 10_000),
        "seed": (int, 0),
        "stopping": (str, "discrepancy"),
        "noise_kind": (str, "none"),
        "threshold_norm": (str, "euclidean"),
    },
    "output": {
        "dir": (str, "kenkf-out"),
        "trace": (bool, True),
        "ensemble": (bool, True),
        "reconstruction": (bool, True),
        "ensemble_every": (int, 0),
    },
    "phase": {
        "y": (_num, 2.0),
        "G": (_num, 1.0),
        "lambda2": (_num, 0.0),
        "m_range": (list, [0.0, 4.0]),
        "E_range": (list, [0.0, 10.0]),
        "n": (int, 40),
        "starts": (list, []),
        "t_end": (_num, 10.0),
        "tol": (_num, 1e-10),
    },
    "sweep": {
        "parameter": (str, "J"),
        "values": (list, []),
        "parallel": (bool, False),
    },
}

DEFAULTS = {sec: {k: v[1] for k, v in keys.items() if v[1] is not None}
            for sec, keys in SCHEMA.items()}

_CHOICES = {
    ("solver", "stopping"): ("discrepancy", "time"),
    ("solver", "noise_kind"): ("none", "gaussian"),
    ("solver", "threshold_norm"): ("euclidean", "weighted"),
    ("sweep", "parameter"): ("J", "M"),
}


def validate(raw: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Check keys and types; return a new dict with defaults filled in."""
    if not isinstance(raw, Mapping):
        raise ConfigurationError("configuration must be a table of sections")
    out = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown configuration section '{section}'")
        if not isinstance(body, Mapping):
            raise ConfigurationError(f"section '{section}' must be a table")
        for key, value in body.items():
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown configuration key '{section}.{key}'")
            types = SCHEMA[section][key][0]
            ok = isinstance(value, types)
            if types is int or types == _num:
                ok = ok and not isinstance(value, bool)
            if not ok and types == _num and value is None:
                ok = True
            if not ok:
                raise ConfigurationError(
                    f"configuration key '{section}.{key}' has invalid value {value!r}")
            choices = _CHOICES.get((section, key))
            if choices is not None and value not in choices:
                raise ConfigurationError(
                    f"configuration key '{section}.{key}' must be one of {choices}, got {value!r}")
            out[section][key] = value
    return out


def parse_config(text: str) -> Dict[str, Dict[str, Any]]:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML: {exc}") from None
    return validate(raw)


def load_config(path) -> Dict[str, Dict[str, Any]]:
    """Read a TOML configuration or the ``config`` entry of a JSON run manifest."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc}") from None
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON manifest: {exc}") from None
        return validate(doc.get("config", doc))
    return parse_config(text)


def solver_config(cfg: Mapping[str, Any]):
    from .meanfield import SolverConfig

    s = cfg["solver"]
    try:
        return SolverConfig(
            J=s["J"], M=s.get("M"), lambda2=float(s["lambda2"]), T_fin=float(s["T_fin"]),
            n_tot=s["n_tot"], seed=s["seed"], stopping=s["stopping"],
            noise_kind=s["noise_kind"], Lambda=s.get("Lambda"),
            threshold=cfg["problem"].get("threshold"),
            threshold_norm=s["threshold_norm"],
        )
    except ConfigurationError as exc:
        raise ConfigurationError(f"[solver] {exc}") from None


def problem_from_config(cfg: Mapping[str, Any]):
    from .problems import build_problem

    p = cfg["problem"]
    return build_problem(p["name"], n=p["n"], gamma=p.get("gamma"), profile=p.get("profile"),
                         seed=p["seed"], threshold=p.get("threshold"))
