"""INI-style experiment configuration with a closed schema.

Every key has a type and a default; unknown sections or keys, bad values and
out-of-range numbers raise :class:`ConfigError` before anything runs.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass

SEED_ENV_VAR = "CHUNK_MBPO_SEED"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _words(text: str) -> tuple:
    return tuple(text.replace(",", " ").split())


@dataclass(frozen=True)
class Key:
    parse: object
    default: str
    check: object = None


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0 <= x <= 1


def _open_unit(x):
    return 0 < x < 1


def _one_of(*opts):
    def check(x):
        return x in opts
    return check


SCHEMA = {
    "general": {
        "seed": Key(int, "0", _nonneg),
        "out_dir": Key(str, "out"),
        "record_wallclock": Key(_bool, "false"),
    },
    "environment": {
        "kind": Key(str, "gridworld", _one_of("gridworld", "random")),
        "width": Key(int, "3", _pos),
        "height": Key(int, "3", _pos),
        "goals": Key(_ints, "8", lambda g: len(g) > 0),
        "slip": Key(float, "0.1", _unit),
        "gamma": Key(float, "0.99", _open_unit),
        "n_states": Key(int, "6", _pos),
        "n_actions": Key(int, "2", _pos),
        "n_instructions": Key(int, "1", _pos),
        "reward_sparsity": Key(float, "0.2", _unit),
        "dirichlet_alpha": Key(float, "1.0", _pos),
        "env_seed": Key(int, "0", _nonneg),
    },
    "policy": {
        "kind": Key(str, "softmax", _one_of("softmax", "flow-noise")),
        "temperature": Key(float, "1.0", _pos),
        "denoise_steps": Key(int, "3", _pos),
        "noise_level": Key(float, "0.5", _pos),
    },
    "collect": {
        "episodes": Key(int, "500", _pos),
        "max_chunks": Key(int, "25", _pos),
        "buffer": Key(str, ""),
    },
    "world_model": {
        "k": Key(int, "2", _pos),
        "smoothing_alpha": Key(float, "0.1", _nonneg),
        "view_mode": Key(str, "flat", _one_of("flat", "interleaved", "both")),
        "kind": Key(str, "learned", _one_of("learned", "oracle")),
        "corruption_eta": Key(float, "0.0", _unit),
        "corruption_level": Key(str, "rare-state", _one_of("pair", "state", "rare-state")),
    },
    "rollout": {
        "scheme": Key(str, "branched", _one_of("branched", "full")),
        "n": Key(int, "2", _pos),
        "max_chunks": Key(int, "25", _pos),
        "sample_size": Key(int, "512", _pos),
        "sweep_schemes": Key(_words, "", lambda w: all(x == "full" or x.isdigit() and int(x) > 0
                                                       for x in w)),
        "sweep_sample_sizes": Key(_ints, "", lambda s: all(x > 0 for x in s)),
    },
    "ppo": {
        "gamma": Key(float, "0.99", _open_unit),
        "lam": Key(float, "0.95", _unit),
        "clip_epsilon": Key(float, "0.1", _open_unit),
        "updates_per_batch": Key(int, "20", _pos),
        "advantage_normalization": Key(str, "per-batch", _one_of("off", "per-batch")),
        "policy_lr": Key(float, "1.0", _pos),
        "value_lr": Key(float, "0.5", lambda x: 0 < x <= 1),
        "pin_absorbing": Key(_bool, "true"),
    },
    "run": {
        "iterations": Key(int, "100", _pos),
        "eval_episodes": Key(int, "20", _pos),
    },
    "certify": {
        "instances": Key(int, "500", _pos),
        "lemma_instances": Key(int, "500", _pos),
        "max_states": Key(int, "8", lambda x: 2 <= x <= 16),
        "lemma_max_states": Key(int, "16", lambda x: 2 <= x <= 16),
        "horizon": Key(int, "20", _pos),
        "case_gamma": Key(float, "0.99", _open_unit),
        "case_k": Key(int, "10", _pos),
        "case_n": Key(int, "2", _nonneg),
        "case_r_max": Key(float, "1.0", _pos),
        "bound_sign": Key(float, "1.0", lambda x: x in (1.0, -1.0)),
    },
}


class Config:
    """Parsed, validated configuration: ``cfg["section"]["key"]``."""

    def __init__(self, raw: dict):
        self.raw = raw
        self.jobs = 1
        self.values = {}
        for section, keys in SCHEMA.items():
            self.values[section] = {}
            for key, spec in keys.items():
                text = raw.get(section, {}).get(key, spec.default)
                try:
                    val = spec.parse(text)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: cannot parse {text!r} ({exc})") from None
                if spec.check is not None and not spec.check(val):
                    raise ConfigError(f"{section}.{key}: value {text!r} out of range")
                self.values[section][key] = val

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["general"]["seed"]

    def resolved_text(self) -> str:
        """Every key with its effective value; loading it reproduces this config."""
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key, spec in keys.items():
                out.write(f"{key} = {self.raw.get(section, {}).get(key, spec.default)}\n")
            out.write("\n")
        return out.getvalue()


def parse_text(text: str, source: str = "<config>") -> dict:
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    raw = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, val in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            raw.setdefault(section, {})[key] = val.strip()
    return raw


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one ``section.key=value`` override in place."""
    name, sep, value = assignment.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot:
        raise ConfigError(f"override {assignment!r} is not section.key=value")
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {section}.{key}")
    raw.setdefault(section, {})[key] = value.strip()


def load_config(path=None, overrides=(), environ=None) -> Config:
    """Read ``path`` (optional), apply overrides, then the seed variable."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = parse_text(fh.read(), str(path))
    for item in overrides:
        apply_override(raw, item)
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV_VAR):
        raw.setdefault("general", {})["seed"] = env[SEED_ENV_VAR].strip()
    return Config(raw)
