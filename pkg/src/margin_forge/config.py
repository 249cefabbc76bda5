"""Experiment configuration: flat sectioned key=value files plus overrides.

A config is an INI-shaped file whose sections mirror the library's spec
objects. Unknown sections or keys are rejected at parse time. Values can be
overridden with dotted assignments ("loss.s=20"), which is also how grid
entry sections ([grid:NAME]) express their per-entry deltas; command-line
overrides win over the file, and MARGIN_FORGE_SEED overrides the configured
seed (but not an explicit --seed flag).
"""

from __future__ import annotations

import configparser
import copy
import json
import os
from pathlib import Path

from .datasets import ImbalanceSpec
from .errors import ConfigError
from .losses import LossSpec, RegularizerSpec
from .sphere_opt import OptimConfig, RieszConfig
from .trainer import MlpSpec, TrainConfig

SEED_ENV_VAR = "MARGIN_FORGE_SEED"

LOSS_PRESETS = ("normface", "cosface", "arcface", "sphereface_fn")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    t = text.strip()
    return tuple(float(x) for x in t.split(",")) if t else ()


def _int_list(text: str) -> tuple[int, ...]:
    t = text.strip()
    return tuple(int(x) for x in t.split(",")) if t else ()


def _opt_float(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else float(t)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "output_dir": (str, "out"),
        "jobs": (int, 1),
    },
    "geometry": {
        "k": (int, 4),
        "d": (int, 8),
        "n": (int, 40),
    },
    "loss": {
        "kind": (str, "softmax_ce"),
        "s": (float, 1.0),
        "m1": (float, 1.0),
        "m2": (float, 0.5),
        "m3": (float, 0.35),
        "alpha1": (float, 1.0),
        "alpha2": (float, 1.0),
        "beta1": (float, 0.0),
        "beta2": (float, 0.0),
        "focal_gamma": (float, 0.0),
        "ldam_c": (_opt_float, None),
        "normalize_features": (_bool, False),
        "normalize_prototypes": (_bool, False),
    },
    "reg": {
        "mu_sm": (float, 0.0),
        "use_mean_variant": (_bool, False),
        "lambda_w": (float, 0.0),
    },
    "optim": {
        "lr0": (float, 0.5),
        "momentum": (float, 0.9),
        "weight_decay": (float, 0.0),
        "steps": (int, 10000),
        "t_max": (int, 10000),
        "log_every": (int, 200),
    },
    "riesz": {
        "t": (float, 2.0),
        "continuation": (_float_list, (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)),
        "restarts": (int, 3),
    },
    "dataset": {
        "kind": (str, "balanced"),
        "rho": (float, 1.0),
        "mu": (float, 0.5),
        "n_max": (int, 100),
        "d_in": (int, 2),
        "spread": (float, 0.1),
        "separation": (float, 2.0),
        "test_per_class": (int, 50),
    },
    "mlp": {
        "layer_sizes": (_int_list, (2, 32, 3)),
        "activation": (str, "relu"),
        "embed_normalize": (_bool, True),
    },
    "train": {
        "epochs": (int, 200),
        "batch_size": (int, 32),
        "eval_every": (int, 50),
        "base_weight": (float, 1.0),
    },
    "toy": {
        "s_continuation": (_float_list, ()),
    },
    "assert": {
        "min_class_margin_deg": (_opt_float, None),
        "min_gamma_min": (_opt_float, None),
        "min_accuracy": (_opt_float, None),
    },
}

GRID_PREFIX = "grid:"


def defaults() -> dict:
    return {sec: {key: dflt for key, (_, dflt) in keys.items()}
            for sec, keys in SCHEMA.items()} | {"grid": {}}


def _parse_value(section: str, key: str, raw: str):
    try:
        keys = SCHEMA[section]
    except KeyError:
        raise ConfigError(f"unknown config section [{section}]") from None
    if key not in keys:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    parser = keys[key][0]
    try:
        return parser(raw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({e})") from None


def apply_override(cfg: dict, dotted: str) -> None:
    """Apply one "section.key=value" assignment in place."""
    if "=" not in dotted:
        raise ConfigError(f"override must look like section.key=value, got {dotted!r}")
    path, raw = dotted.split("=", 1)
    if "." not in path:
        raise ConfigError(f"override key must be dotted (section.key), got {path!r}")
    section, key = path.split(".", 1)
    section, key = section.strip(), key.strip().lower()
    cfg.setdefault(section, {})
    cfg[section][key] = _parse_value(section, key, raw.strip())


def load_config(path: str | Path | None) -> dict:
    """Defaults, overlaid with the file's sections; unknown keys rejected."""
    cfg = defaults()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str.lower
    try:
        parser.read_string(path.read_text())
    except configparser.Error as e:
        raise ConfigError(f"could not parse {path}: {e}") from None
    for section in parser.sections():
        if section.startswith(GRID_PREFIX):
            name = section[len(GRID_PREFIX):].strip()
            if not name:
                raise ConfigError("grid section needs a name: [grid:NAME]")
            entry = {}
            for key, raw in parser.items(section):
                if "." not in key:
                    raise ConfigError(
                        f"grid entry keys are dotted overrides, got {key!r}")
                sec, subkey = key.split(".", 1)
                entry[f"{sec}.{subkey}"] = raw
                _parse_value(sec, subkey, raw)  # validate eagerly
            cfg["grid"][name] = entry
            continue
        for key, raw in parser.items(section):
            cfg.setdefault(section, {})
            cfg[section][key] = _parse_value(section, key, raw)
    return cfg


def resolve_seed(cfg: dict, flag_seed: int | None) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from None
    return cfg["run"]["seed"]


def grid_entries(cfg: dict) -> dict[str, dict]:
    """Materialize each grid entry as a full config with overrides applied."""
    if not cfg["grid"]:
        return {}
    out = {}
    for name, overrides in sorted(cfg["grid"].items()):
        entry = copy.deepcopy(cfg)
        entry["grid"] = {}
        for dotted, raw in overrides.items():
            apply_override(entry, f"{dotted}={raw}")
        out[name] = entry
    return out


def loss_spec_from(cfg: dict) -> LossSpec:
    sec = cfg["loss"]
    kind = sec["kind"].strip().lower()
    if kind == "normface":
        spec = LossSpec.normface(sec["s"])
    elif kind == "cosface":
        spec = LossSpec.cosface(sec["s"], sec["m3"])
    elif kind == "arcface":
        spec = LossSpec.arcface(sec["s"], sec["m2"])
    elif kind == "sphereface_fn":
        spec = LossSpec.sphereface_fn(sec["s"], sec["m1"])
    else:
        spec = LossSpec(
            kind=kind, s=sec["s"], m1=sec["m1"], m2=sec["m2"], m3=sec["m3"],
            alpha1=sec["alpha1"], alpha2=sec["alpha2"],
            beta1=sec["beta1"], beta2=sec["beta2"],
            focal_gamma=sec["focal_gamma"], ldam_C=sec["ldam_c"],
            normalize_features=sec["normalize_features"],
            normalize_prototypes=sec["normalize_prototypes"],
        )
    try:
        spec.validate()
    except Exception as e:
        raise ConfigError(f"invalid loss spec: {e}") from None
    return spec


def reg_spec_from(cfg: dict) -> RegularizerSpec:
    sec = cfg["reg"]
    spec = RegularizerSpec(mu_sm=sec["mu_sm"], use_mean_variant=sec["use_mean_variant"],
                           lambda_w=sec["lambda_w"])
    spec.validate()
    return spec


def optim_from(cfg: dict, seed: int) -> OptimConfig:
    sec = cfg["optim"]
    return OptimConfig(lr0=sec["lr0"], momentum=sec["momentum"],
                       weight_decay=sec["weight_decay"], steps=sec["steps"],
                       t_max=sec["t_max"], seed=seed, log_every=sec["log_every"])


def riesz_from(cfg: dict) -> RieszConfig:
    sec = cfg["riesz"]
    return RieszConfig(t=sec["t"], continuation=sec["continuation"],
                       restarts=sec["restarts"])


def imbalance_from(cfg: dict) -> ImbalanceSpec:
    sec = cfg["dataset"]
    return ImbalanceSpec(kind=sec["kind"], rho=sec["rho"], mu=sec["mu"],
                         n_max=sec["n_max"])


def mlp_from(cfg: dict, seed: int) -> MlpSpec:
    sec = cfg["mlp"]
    return MlpSpec(layer_sizes=sec["layer_sizes"], activation=sec["activation"],
                   embed_normalize=sec["embed_normalize"], seed=seed)


def train_config_from(cfg: dict, seed: int) -> TrainConfig:
    sec = cfg["train"]
    return TrainConfig(epochs=sec["epochs"], batch_size=sec["batch_size"],
                       optim=optim_from(cfg, seed), loss=loss_spec_from(cfg),
                       reg=reg_spec_from(cfg), eval_every=sec["eval_every"],
                       base_weight=sec["base_weight"])


def resolved_json(cfg: dict, seed: int) -> str:
    view = copy.deepcopy(cfg)
    view["run"]["seed"] = seed
    return json.dumps(view, indent=2, sort_keys=True, default=list)
