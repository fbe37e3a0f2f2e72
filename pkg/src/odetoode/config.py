"""Experiment configuration: an INI file plus ``section.key=value`` overrides.

Every key has a type and a default; an empty file yields the defaults below.
Unknown sections or keys, unparsable values and constraint violations raise
:class:`ConfigError` naming the offending ``section.key``.

Grammar: ``[section]`` headers, ``key = value`` lines, ``#`` or ``;``
comments. Lists are comma separated. Booleans accept true/false/yes/no/1/0.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from .envs import default_env
from .es import ESConfig
from .exceptions import ConfigError
from .flows import FlowConfig
from .stability import AppendixSpec, ContrastSpec, GridSpec
from .supervised import SupervisedConfig


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    t = text.strip().lower()
    return None if t in ("", "none") else float(t)


def _list(cast):
    def parse(text):
        items = [p.strip() for p in text.split(",") if p.strip()]
        if not items:
            raise ValueError("empty list")
        return tuple(cast(p) for p in items)
    return parse


def _str(text):
    return text.strip()


SCHEMA = {
    "run": {
        "seed": (int, 0),
        "out": (_str, "out"),
        "threads": (int, 0),  # 0 means one per available core
        "timestamp": (_bool, True),
    },
    "flow": {
        "depth_steps": (int, 25),
        "horizon": (float, 1.0),
        "nonlinearity": (_str, "abs"),
    },
    "es": {
        "hidden": (int, 16),
        "iterations": (int, 200),
        "runs": (int, 1),
        "sigma": (float, 0.1),
        "perturbations": (int, 200),
        "schedule": (_str, "constant"),
        "step_size": (float, 0.01),
        "antithetic": (_bool, False),
        "norm_bound": (_opt_float, None),
        "bias_bound": (_opt_float, None),
    },
    "env": {
        "seed": (int, 0),
        "state_dim": (int, 8),
        "action_dim": (int, 2),
        "horizon": (int, 50),
        "radius": (float, 10.0),
        "score_scale": (float, 1.0),
        "a_norm": (float, 0.9),
    },
    "supervised": {
        "dataset": (_str, "blobs"),
        "count": (int, 200),
        "hidden": (int, 128),
        "depth_steps": (int, 100),
        "step": (float, 0.01),
        "epochs": (int, 100),
        "learning_rate": (float, 0.1),
        "batch_size": (int, 32),
        "nonlinearity": (_str, "abs"),
        "generator": (_str, "iso"),
        "gate_count": (int, 1),
        "trig_degree": (int, 5),
        "init_scale": (float, 1.0),
    },
    "grid": {
        "dims": (_list(int), (2, 4, 8, 16, 32)),
        "depths": (_list(int), (10, 100, 1000)),
        "generators": (_list(_str), ("iso", "gated")),
        "nonlinearities": (_list(_str), ("abs", "identity")),
        "seed_count": (int, 5),
        "init_scale": (float, 1.0),
    },
    "contrast": {
        "dims": (_list(int), (4, 16)),
        "depths": (_list(int), (10, 100, 1000)),
        "seed_count": (int, 3),
        "baseline_scales": (_list(float), (0.0, 1.0, 3.0)),
        "trig_degree": (int, 3),
    },
    "bounds": {
        "hidden": (int, 16),
        "samples": (int, 1000),
        "D": (float, 1.0),
        "D_b": (float, 1.0),
        "sigma": (float, 0.1),
        "es_estimates": (int, 10000),
        "es_perturbations": (int, 1),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, path):
        section, key = path.split(".")
        return self.values[section][key]

    def resolved(self):
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
                for s, kv in self.values.items()}

    @property
    def seed(self):
        return self["run.seed"]

    def flow_config(self):
        v = self.values["flow"]
        return FlowConfig(depth_steps=v["depth_steps"], horizon=v["horizon"],
                          nonlinearity=v["nonlinearity"])

    def es_config(self, seed=None):
        v = self.values["es"]
        return ESConfig(sigma=v["sigma"], perturbations=v["perturbations"], schedule=v["schedule"],
                        step_size=v["step_size"], seed=self.seed if seed is None else seed,
                        antithetic=v["antithetic"], norm_bound=v["norm_bound"],
                        bias_bound=v["bias_bound"])

    def env(self):
        v = self.values["env"]
        return default_env(seed=v["seed"], state_dim=v["state_dim"], action_dim=v["action_dim"],
                           horizon=v["horizon"], radius=v["radius"],
                           score_scale=v["score_scale"], a_norm=v["a_norm"])

    def supervised_config(self):
        v = dict(self.values["supervised"])
        v.pop("dataset")
        v.pop("count")
        return SupervisedConfig(seed=self.seed, **v)

    def grid_spec(self):
        v = self.values["grid"]
        seeds = tuple(range(self.seed, self.seed + v["seed_count"]))
        return GridSpec(dims=v["dims"], depths=v["depths"], generators=v["generators"],
                        nonlinearities=v["nonlinearities"], seeds=seeds,
                        horizon=self["flow.horizon"], init_scale=v["init_scale"])

    def contrast_spec(self):
        v = self.values["contrast"]
        seeds = tuple(range(self.seed, self.seed + v["seed_count"]))
        return ContrastSpec(dims=v["dims"], depths=v["depths"], seeds=seeds,
                            baseline_scales=v["baseline_scales"], trig_degree=v["trig_degree"],
                            nonlinearity=self["flow.nonlinearity"])

    def appendix_spec(self):
        v = self.values["bounds"]
        return AppendixSpec(hidden=v["hidden"], depth_steps=self["flow.depth_steps"],
                            samples=v["samples"], D=v["D"], D_b=v["D_b"], sigma=v["sigma"],
                            es_estimates=v["es_estimates"],
                            es_perturbations=v["es_perturbations"], seed=self.seed)


def _set(values, path, text):
    if "." not in path:
        raise ConfigError("expected section.key", key=path)
    section, key = path.split(".", 1)
    if section not in SCHEMA:
        raise ConfigError("unknown section", key=section)
    if key not in SCHEMA[section]:
        raise ConfigError("unknown key", key=path)
    cast = SCHEMA[section][key][0]
    try:
        values[section][key] = cast(text)
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r}: {exc}", key=path) from None


def _check(cfg):
    """Build every derived object once so constraint violations surface early."""
    v = cfg.values
    positive_ints = ["es.hidden", "es.iterations", "es.runs", "supervised.count",
                     "grid.seed_count", "contrast.seed_count", "bounds.hidden",
                     "bounds.samples", "bounds.es_estimates", "bounds.es_perturbations"]
    for path in positive_ints:
        if cfg[path] < 1:
            raise ConfigError("must be >= 1", key=path)
    if v["run"]["threads"] < 0:
        raise ConfigError("must be >= 0", key="run.threads")
    for path in ("bounds.D", "bounds.sigma"):
        if not cfg[path] > 0:
            raise ConfigError("must be positive", key=path)
    if cfg["bounds.D_b"] < 0:
        raise ConfigError("must be >= 0", key="bounds.D_b")
    builders = [("flow", cfg.flow_config), ("es", cfg.es_config), ("env", cfg.env),
                ("supervised", cfg.supervised_config), ("grid", cfg.grid_spec),
                ("contrast", cfg.contrast_spec), ("bounds", cfg.appendix_spec)]
    for section, build in builders:
        try:
            build()
        except ValueError as exc:
            raise ConfigError(str(exc), key=section) from None
    if cfg["es.hidden"] < max(cfg["env.state_dim"], cfg["env.action_dim"]):
        raise ConfigError("hidden width must be >= state and action dims", key="es.hidden")
    if cfg["bounds.hidden"] < max(cfg["env.state_dim"], cfg["env.action_dim"]):
        raise ConfigError("hidden width must be >= state and action dims", key="bounds.hidden")
    return cfg


def parse_config(path=None, overrides=()):
    """Load defaults, then the file at ``path`` (if any), then ``overrides``.

    ``overrides`` is a sequence of ``"section.key=value"`` strings; later
    entries win.
    """
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                _set(values, f"{section}.{key}", text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override must look like section.key=value", key=item)
        path_, text = item.split("=", 1)
        _set(values, path_.strip(), text)
    return _check(ExperimentConfig(values))
