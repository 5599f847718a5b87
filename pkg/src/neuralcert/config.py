"""Run configuration: one INI document per run, validated against a typed
schema before any work starts. Unknown sections or keys are rejected, and
every complaint carries the file line it refers to.

[train] keys mirror TrainConfig fields; condition weights are spelled as
`weight.<name>` so the paper's per-example penalty values live in the
shipped configs under their condition names rather than greek indices.
"""

import configparser
import hashlib
import os

import numpy as np

from .dynamics import (cwh_satellite, kinematic_car, pendulum,
                       stable_linear_benchmark)
from .training import TrainConfig


class ConfigError(Exception):
    pass


# -- value converters (raise ValueError with a bare message) -------------------------


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _bool(v):
    low = v.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _str(v):
    return v.strip()


def _choice(*options):
    def conv(v):
        v = v.strip()
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}; got {v!r}")
        return v
    return conv


def _ints(v):
    return tuple(int(t) for t in v.split())


def _floats(v):
    return tuple(float(t) for t in v.split())


def _matrix(v):
    rows = [r.strip() for r in v.split(";") if r.strip()]
    out = [[float(t) for t in r.split()] for r in rows]
    if len({len(r) for r in out}) != 1:
        raise ValueError("matrix rows have unequal lengths")
    return np.array(out, dtype=np.float64)


def _opt(conv):
    def wrapped(v):
        if v.strip().lower() == "none":
            return None
        return conv(v)
    return wrapped


def _positive(conv, name="value"):
    def wrapped(v):
        out = conv(v)
        if out <= 0:
            raise ValueError(f"{name} must be positive")
        return out
    return wrapped


SYSTEM_SCHEMAS = {
    "pendulum": {"mass": _float, "length": _float, "damping": _float,
                 "gravity": _float, "theta_max": _float, "omega_max": _float,
                 "torque_max": _opt(_float)},
    "cwh_satellite": {"mass": _float, "mean_motion": _float,
                      "pos_max": _float, "vel_max": _float,
                      "r_unsafe_inner": _float, "r_unsafe_outer": _float,
                      "r_safe_inner": _float, "r_safe_outer": _float},
    "kinematic_car": {"pos_max": _float},
    "stable_linear": {"a": _matrix, "b": _matrix, "box_half_width": _float},
}

def _stable_linear_from(a=None, b=None, box_half_width=1.0):
    if a is None or b is None:
        raise ValueError("stable_linear needs matrices a and b")
    return stable_linear_benchmark(a, b, box_half_width)


SYSTEM_FACTORIES = {
    "pendulum": pendulum,
    "cwh_satellite": cwh_satellite,
    "kinematic_car": kinematic_car,
    "stable_linear": _stable_linear_from,
}

TRAIN_SCHEMA = {
    "n_samples": _positive(_int, "n_samples"),
    "batch_size": _positive(_int, "batch_size"),
    "epochs": _int, "lr": _float, "beta1": _float, "beta2": _float,
    "eps": _float, "qp_relax_weight": _opt(_float), "dt": _float,
    "pretrain_epochs": _int, "hidden": _ints, "out_dim": _int,
    "u_max": _opt(_float), "penalty": _choice("linear", "quad"),
    "cex_cap": _opt(_int), "n_trajectories": _int, "horizon": _float,
    "dt_sim": _float, "dt_ctrl": _float, "noise": _float, "gains": _floats,
    "m_lo": _float, "m_hi": _float, "eps_nd": _float,
}

SCHEMA = {
    "run": {"system": _choice(*SYSTEM_FACTORIES), "seed": _int, "out": _str},
    "certificate": {"kind": _choice("lyapunov", "clf", "cbf", "contraction"),
                    "source": _choice("trained", "quadratic"),
                    "rate": _float, "rate_scale": _float, "negate": _bool},
    "train": TRAIN_SCHEMA,
    "verify": {"method": _choice("sample", "grid", "ibp"),
               "n_samples": _int, "tau": _float, "budget": _int,
               "max_cells": _int, "min_width": _float, "tol": _float,
               "exclude": _str, "cegis_rounds": _int, "validate_n": _int,
               "finetune_epochs": _opt(_int)},
    "simulate": {"n_rollouts": _int, "horizon": _float, "dt_sim": _float,
                 "dt_ctrl": _float, "x0_half_width": _float, "r0": _floats,
                 "perturb": _float, "monitor_tol": _float,
                 "n_references": _int},
    "evaluate": {"n_rollouts": _int, "converge_radius": _float},
}

VERIFY_DEFAULTS = {"method": "grid", "n_samples": 10000, "tau": 0.002,
                   "budget": int(1e7), "max_cells": 100000,
                   "min_width": 1e-4, "tol": 0.0, "exclude": "auto",
                   "cegis_rounds": 0, "validate_n": 10000,
                   "finetune_epochs": None}

SIMULATE_DEFAULTS = {"n_rollouts": 10, "horizon": 5.0, "dt_sim": 0.01,
                     "dt_ctrl": 0.1, "x0_half_width": 0.5, "r0": (0.5, 1.2),
                     "perturb": 0.3, "monitor_tol": 1e-3, "n_references": 10}

EVALUATE_DEFAULTS = {"n_rollouts": 100, "converge_radius": 0.05}

CERT_DEFAULTS = {"source": "trained", "rate": None, "rate_scale": 0.5,
                 "negate": False}

RATE_BY_KIND = {"lyapunov": 1.0, "clf": 1.0, "cbf": 0.1, "contraction": 1.0}


def _line_of(raw, token):
    """1-based line of the first line whose key token matches, else 0."""
    for i, line in enumerate(raw.split("\n"), start=1):
        stripped = line.strip()
        if stripped.startswith(token):
            rest = stripped[len(token):]
            if rest == "" or rest[0] in " =:\t]":
                return i
    return 0


def _anchor(path, raw, token, message):
    line = _line_of(raw, token)
    where = f"{path}:{line}" if line else path
    return ConfigError(f"{where}: {message}")


class RunConfig:
    """Everything a command needs, parsed and typed.

    Attributes: system_name, system, seed, out, certificate/verify/
    simulate/evaluate dicts, train (TrainConfig), config_hash (sha256 of
    the raw document), path.
    """

    def __init__(self, path, raw, parser):
        self.path = str(path)
        self.raw = raw
        self.config_hash = hashlib.sha256(raw.encode()).hexdigest()

        for section in parser.sections():
            if section not in SCHEMA and section != "system":
                raise _anchor(path, raw, f"[{section}",
                              f"unknown section [{section}]")
        run = self._section(parser, "run", {"seed": 0})
        if "system" not in run:
            raise ConfigError(f"{path}: [run] must name a system")
        if "out" not in run:
            raise ConfigError(f"{path}: [run] must give an output directory")
        self.system_name = run["system"]
        self.seed = run["seed"]
        self.out = run["out"]

        params = self._system_params(parser)
        self.system_params = params
        try:
            self.system = SYSTEM_FACTORIES[self.system_name](**params)
        except ValueError as err:
            raise _anchor(path, raw, "[system", str(err)) from err

        cert = self._section(parser, "certificate", dict(CERT_DEFAULTS))
        if "kind" not in cert:
            raise ConfigError(f"{path}: [certificate] must give a kind")
        if cert["rate"] is None:
            cert["rate"] = RATE_BY_KIND[cert["kind"]]
        self.certificate = cert

        train_kwargs, weights = self._train_section(parser)
        train_kwargs["seed"] = self.seed
        train_kwargs["rate"] = cert["rate"]
        if weights:
            train_kwargs["weights"] = weights
        try:
            self.train = TrainConfig(**train_kwargs)
        except ValueError as err:
            raise _anchor(path, raw, "[train", str(err)) from err

        self.verify = self._section(parser, "verify", dict(VERIFY_DEFAULTS))
        self.simulate = self._section(parser, "simulate",
                                      dict(SIMULATE_DEFAULTS))
        self.evaluate = self._section(parser, "evaluate",
                                      dict(EVALUATE_DEFAULTS))

    def _section(self, parser, name, defaults):
        out = defaults
        if not parser.has_section(name):
            return out
        schema = SCHEMA[name]
        for key, value in parser.items(name):
            if key not in schema:
                raise _anchor(self.path, self.raw, key,
                              f"unknown key {key!r} in [{name}]")
            try:
                out[key] = schema[key](value)
            except ValueError as err:
                raise _anchor(self.path, self.raw, key,
                              f"[{name}] {key}: {err}") from err
        return out

    def _system_params(self, parser):
        if not parser.has_section("system"):
            return {}
        schema = SYSTEM_SCHEMAS[self.system_name]
        out = {}
        for key, value in parser.items("system"):
            if key not in schema:
                raise _anchor(self.path, self.raw, key,
                              f"unknown key {key!r} for system "
                              f"{self.system_name!r}")
            try:
                out[key] = schema[key](value)
            except ValueError as err:
                raise _anchor(self.path, self.raw, key,
                              f"[system] {key}: {err}") from err
        return out

    def _train_section(self, parser):
        kwargs, weights = {}, {}
        if not parser.has_section("train"):
            return kwargs, weights
        for key, value in parser.items("train"):
            if key.startswith("weight."):
                try:
                    weights[key[len("weight."):]] = float(value)
                except ValueError as err:
                    raise _anchor(self.path, self.raw, key,
                                  f"[train] {key}: {err}") from err
                continue
            if key not in TRAIN_SCHEMA:
                raise _anchor(self.path, self.raw, key,
                              f"unknown key {key!r} in [train]")
            try:
                kwargs[key] = TRAIN_SCHEMA[key](value)
            except ValueError as err:
                raise _anchor(self.path, self.raw, key,
                              f"[train] {key}: {err}") from err
        return kwargs, weights


def load_config(path, seed=None, out=None):
    """Parse and validate a run config; seed/out override the document."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = fh.read()
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(raw, source=str(path))
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    cfg = RunConfig(path, raw, parser)
    if seed is not None:
        cfg.seed = int(seed)
        cfg.train = cfg.train.replace(seed=cfg.seed)
    if out is not None:
        cfg.out = str(out)
    return cfg
