"""Run configuration: nested sections, named presets, dotted overrides.

Configs are YAML files.  Every key must already exist in the defaults, so a
typo is an error rather than a silently ignored setting.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


# Six shift rules in inverse pairs: every held-out fact has supporting
# evidence within two hops of its head in the training graph.
SYNTHETIC_RULES = [
    {"name": f"shift{sign}{k}", "kind": "modular-shift", "param": k if sign == "+" else -k}
    for k in (1, 2, 3) for sign in ("+", "-")
]

# Two random permutations and both of their compositions: facts of the
# composed relations are only supported by two-hop chains.
COMPOSITIONAL_RULES = [
    {"name": "a", "kind": "permutation", "param": 1},
    {"name": "b", "kind": "permutation", "param": 2},
    {"name": "a_then_b", "kind": "composition", "of": ["a", "b"]},
    {"name": "b_then_a", "kind": "composition", "of": ["b", "a"]},
]

DEFAULTS = {
    "seed": 0,
    "preset": "synthetic",
    "data": {
        "dir": None,
        "n_entities": 120,
        "d_feat": 16,
        "rules": SYNTHETIC_RULES,
    },
    "subgraph": {"hops": 2, "relation_filter": True, "node_cap": 64},
    "encoder": {
        "dim": 16,
        "mgat_layers": 2,
        "heads": 4,
        "attention": "query-key",
        "residual": True,
        "lambda_per_dim": False,
        "no_mgat": False,
    },
    "diffusion": {"steps": 40, "beta_start": 1e-4, "beta_end": 0.2, "schedule": "linear", "chains": 4},
    "denoiser": {
        "hidden": 128,
        "mlp": 256,
        "blocks": 1,
        "scale_shift": True,
        "timestep": "sinusoidal",
        "no_block": False,
        "no_condition": False,
    },
    "stage1": {"epochs": 200, "batch_size": 32, "lr": 1e-2, "min_lr": 0.0, "label_smoothing": 0.0,
               "query_dropout": 0.0},
    "stage2": {
        "epochs": 300,
        "batch_size": 32,
        "lr": 1e-3,
        "min_lr": 0.0,
        "label_smoothing": 0.0,
        "kl_kind": "softmax",
        "no_bce": False,
        "no_kl": False,
    },
    "eval": {"split": "test", "filtered": True, "ties": "pessimistic", "source": "both", "top_m": 32,
             "blend": 0.0},
}

# Full-scale stage-2 settings from the published runs; they need real
# multimodal datasets and are kept for reference runs, not desk testing.
PRESETS = {
    "synthetic": {},
    "compositional": {"data": {"rules": COMPOSITIONAL_RULES}},
    "fb15k-237-img": {
        "encoder": {"dim": 768, "mgat_layers": 3},
        "diffusion": {"steps": 40},
        "denoiser": {"blocks": 1, "mlp": 2048, "hidden": 768},
        "stage2": {"lr": 2e-5, "batch_size": 96},
    },
    "wn18-img": {
        "encoder": {"dim": 768, "mgat_layers": 3},
        "diffusion": {"steps": 30},
        "denoiser": {"blocks": 1, "mlp": 1024, "hidden": 768},
        "stage2": {"lr": 3e-5, "batch_size": 128},
    },
}

_POSITIVE_INTS = [
    ("data", "n_entities"), ("subgraph", "hops"), ("subgraph", "node_cap"),
    ("encoder", "dim"), ("encoder", "mgat_layers"), ("encoder", "heads"),
    ("diffusion", "steps"), ("diffusion", "chains"),
    ("denoiser", "hidden"), ("denoiser", "mlp"), ("denoiser", "blocks"),
    ("stage1", "epochs"), ("stage1", "batch_size"), ("stage2", "epochs"), ("stage2", "batch_size"),
    ("eval", "top_m"),
]


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "rules":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} is a section, got {value!r}")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def parse_override(text):
    """``"stage1.lr=0.01"`` -> (["stage1", "lr"], 0.01); values are YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    return parts, yaml.safe_load(raw)


def _nest(parts, value):
    out = value
    for p in reversed(parts):
        out = {p: out}
    return out


def build_config(path=None, overrides=(), seed=None):
    """Defaults, then preset, then the file, then ``--set`` overrides, then seed."""
    from_file = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
        try:
            from_file = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: not valid YAML ({err})") from None
        if not isinstance(from_file, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    parsed = [parse_override(o) for o in overrides]
    preset = from_file.get("preset", DEFAULTS["preset"])
    for parts, value in parsed:
        if parts == ["preset"]:
            preset = value
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = copy.deepcopy(DEFAULTS)
    _merge(cfg, copy.deepcopy(PRESETS[preset]))
    _merge(cfg, from_file)
    for parts, value in parsed:
        _merge(cfg, _nest(parts, value))
    cfg["preset"] = preset
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def with_overrides(cfg, overrides):
    """A validated copy of ``cfg`` with ``key=value`` overrides applied."""
    out = copy.deepcopy(cfg)
    for parts, value in map(parse_override, overrides):
        if parts == ["preset"]:
            raise ConfigError("the preset cannot be changed on a built config")
        _merge(out, _nest(parts, value))
    return validate(out)


def _check_types(cfg, defaults, prefix=""):
    for key, default in defaults.items():
        v, name = cfg[key], prefix + key
        if isinstance(default, dict):
            _check_types(v, default, name + ".")
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{name} must be true or false, got {v!r}")
        elif isinstance(default, (int, float)):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name} must be a number, got {v!r}")
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{name} must be a string, got {v!r}")


def validate(cfg):
    _check_types(cfg, DEFAULTS)
    for section, key in _POSITIVE_INTS:
        v = cfg[section][key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{section}.{key} must be a positive integer, got {v!r}")
    for stage in ("stage1", "stage2"):
        s = cfg[stage]
        if not s["lr"] > 0:
            raise ConfigError(f"{stage}.lr must be positive")
        if not 0 <= s["min_lr"] <= s["lr"]:
            raise ConfigError(f"{stage}.min_lr must lie in [0, lr]")
        if not 0 <= s["label_smoothing"] < 1:
            raise ConfigError(f"{stage}.label_smoothing must lie in [0, 1)")
    if not 0 <= cfg["stage1"]["query_dropout"] < 1:
        raise ConfigError("stage1.query_dropout must lie in [0, 1)")
    if cfg["stage2"]["no_bce"] and cfg["stage2"]["no_kl"]:
        raise ConfigError("stage2.no_bce and stage2.no_kl together leave no loss to train")
    if cfg["stage2"]["kl_kind"] not in ("softmax", "sigmoid"):
        raise ConfigError("stage2.kl_kind must be softmax or sigmoid")
    if cfg["eval"]["source"] not in ("encoder", "generated", "both"):
        raise ConfigError("eval.source must be encoder, generated or both")
    if cfg["eval"]["split"] not in ("train", "dev", "test"):
        raise ConfigError("eval.split must be train, dev or test")
    if cfg["eval"]["ties"] not in ("pessimistic", "optimistic"):
        raise ConfigError("eval.ties must be pessimistic or optimistic")
    if not 0 <= cfg["eval"]["blend"] <= 1:
        raise ConfigError("eval.blend must lie in [0, 1]")
    if cfg["data"]["d_feat"] < 0:
        raise ConfigError("data.d_feat must be non-negative")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))


def section_hash(section):
    """Stable digest of one config section (architecture fingerprint for checkpoints)."""
    blob = json.dumps(section, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
