"""Experiment configuration: schema, defaults, validation and loading.

Configs are TOML (or JSON, which is what ``config.resolved`` is written
as).  Every key is optional; unknown keys are rejected.
"""

from __future__ import annotations

import copy
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

_NUM = (int, float)
_OPT_NUM = (int, float, type(None))
_PAIR = ("pair",)
_LIST = ("list",)
_OPT_STR = (str, type(None))
_OPT_INT = (int, type(None))

# section -> key -> (accepted types, default)
SCHEMA = {
    "": {"seed": ((int,), 0)},
    "data": {
        "source": ((str,), "generator"),
        "channels": (_LIST, []),
        "outputs": (_OPT_STR, None),
        "test_channels": (_LIST, []),
        "test_outputs": (_OPT_STR, None),
    },
    "generator": {
        "n_f": ((int,), 60),
        "n_u": ((int,), 50),
        "n_grid": ((int,), 150),
        "rho_range": (_PAIR, [0.05, 1.0]),
        "alpha_range": (_PAIR, [2.0, 4.0]),
        "domain": (_PAIR, [0.0, 1.5]),
        "d_proj": ((int,), 6),
        "K_S": (_LIST, [[1.0, 0.85], [0.85, 1.0]]),
        "sigma2": (_NUM, 1.0),
        "lengthscales_f": (_LIST, [80.0, 80.0, 80.0]),
        "lengthscale_u": (_NUM, 1.5),
        "lengthscale_per": (_NUM, 0.5),
        "period": (_NUM, 1.0),
    },
    "encoding": {
        "kind": ((str,), "PCA"),
        "d_proj": (_OPT_INT, 6),
        "inertia": (_OPT_NUM, None),
        "bspline_order": ((int,), 4),
        "bspline_interior_knots": (_OPT_INT, None),
        "haar_level": ((int,), 4),
        "whiten": ((bool,), True),
    },
    "kernel": {
        "nu_f": ((str, int, float), "5/2"),
        "scalar_kind": ((str,), "matern_plus_periodic"),
        "nu_u": ((str, int, float), "5/2"),
        "lengthscale_per": (_NUM, 0.5),
        "period": (_NUM, 1.0),
    },
    "optimizer": {
        "profile": ((str,), "synthetic"),
        "lr": (_NUM, 0.02),
        "betas": (_PAIR, [0.98, 0.999]),
        "eps": (_NUM, 1e-8),
        "weight_decay": (_NUM, 1e-5),
        "clip_norm": (_NUM, 1.0),
        "tol": (_NUM, 1e-3),
        "patience": ((int,), 20),
        "max_iter": (_OPT_INT, None),
        "normalize": ((bool,), True),
        "learn_noise": ((bool, type(None)), None),
        "n_restart": ((int,), 10),
        "init_lengthscale_f": (_PAIR + (type(None),), None),
        "init_lengthscale_u": (_PAIR + (type(None),), None),
        "init_sigma2": (_PAIR + (type(None),), None),
        "init_noise": (_PAIR + (type(None),), None),
        "lengthscale_u_bounds": (_PAIR + (type(None),), None),
    },
    "evaluation": {
        "delta": (_NUM, 1.96),
        "n_test": ((int,), 0),
        "loo": ((bool,), True),
        "loo_reoptimize": ((bool,), True),
        "loo_folds": (_OPT_INT, None),
        "train_sizes": (_LIST, []),
        "include_noise": ((bool,), True),
    },
    "predict": {
        "model": (_OPT_STR, None),
        "channels": (_LIST, []),
        "u": (_LIST, []),
        "tasks": (_LIST, []),
    },
    "benchmark": {
        "sizes": (_LIST, [25, 100, 175, 250]),
        "n_u": ((int,), 100),
        "reps": ((int,), 50),
        "max_naive_n": ((int,), 20000),
        "check_tol": (_NUM, 1e-9),
    },
}

CHOICES = {
    ("data", "source"): ("generator", "files"),
    ("optimizer", "profile"): ("synthetic", "application"),
    ("kernel", "scalar_kind"): ("matern", "matern_plus_periodic"),
}


def defaults():
    out = {}
    for section, keys in SCHEMA.items():
        target = out if section == "" else out.setdefault(section, {})
        for key, (_, default) in keys.items():
            target[key] = copy.deepcopy(default)
    return out


def _check_type(where, value, types):
    if "pair" in types:
        if value is None and type(None) in types:
            return value
        if (not isinstance(value, (list, tuple)) or len(value) != 2
                or not all(isinstance(v, _NUM) and not isinstance(v, bool) for v in value)):
            raise ConfigError(f"{where}: expected a pair of numbers, got {value!r}")
        return [float(v) for v in value]
    if "list" in types:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{where}: expected {_names(types)}, got a boolean")
    if not isinstance(value, types):
        raise ConfigError(f"{where}: expected {_names(types)}, got {value!r}")
    if float in types and int in types and isinstance(value, int) and not isinstance(value, bool):
        return value if str in types else float(value)
    return value


def _names(types):
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def validate(raw):
    """Merge ``raw`` over the defaults, rejecting unknown keys and bad types."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table of sections")
    cfg = defaults()
    for key, value in raw.items():
        if key in SCHEMA[""]:
            cfg[key] = _check_type(key, value, SCHEMA[""][key][0])
            continue
        if key not in SCHEMA or key == "":
            raise ConfigError(f"unknown configuration key {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section [{key}] must be a table")
        for sub, v in value.items():
            if sub not in SCHEMA[key]:
                raise ConfigError(f"unknown configuration key {key}.{sub}")
            cfg[key][sub] = _check_type(f"{key}.{sub}", v, SCHEMA[key][sub][0])
    for (section, key), allowed in CHOICES.items():
        if cfg[section][key] not in allowed:
            raise ConfigError(f"{section}.{key} must be one of {allowed}, got {cfg[section][key]!r}")
    if cfg["optimizer"]["n_restart"] < 1:
        raise ConfigError("optimizer.n_restart must be >= 1")
    if cfg["evaluation"]["n_test"] < 0:
        raise ConfigError("evaluation.n_test must be >= 0")
    if cfg["data"]["source"] == "files" and (not cfg["data"]["channels"] or not cfg["data"]["outputs"]):
        raise ConfigError("data.source = 'files' needs data.channels and data.outputs")
    if bool(cfg["data"]["test_channels"]) != bool(cfg["data"]["test_outputs"]):
        raise ConfigError("data.test_channels and data.test_outputs go together")
    return cfg


def load(path=None):
    """Read and validate a TOML or JSON config; ``None`` gives the defaults."""
    if path is None:
        return validate({})
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: not valid TOML or JSON ({exc})") from exc
    cfg = validate(raw)
    base = path.resolve().parent
    _resolve_paths(cfg, base)
    return cfg


def _resolve_paths(cfg, base):
    """Make data and model paths absolute relative to the config file."""
    def fix(p):
        return None if p is None else str((base / p).resolve()) if not Path(p).is_absolute() else p

    d = cfg["data"]
    d["channels"] = [fix(p) for p in d["channels"]]
    d["test_channels"] = [fix(p) for p in d["test_channels"]]
    d["outputs"] = fix(d["outputs"])
    d["test_outputs"] = fix(d["test_outputs"])
    cfg["predict"]["model"] = fix(cfg["predict"]["model"])
    cfg["predict"]["channels"] = [fix(p) for p in cfg["predict"]["channels"]]


def dumps(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
