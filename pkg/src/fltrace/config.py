"""Declarative experiment configuration with a versioned JSON schema.

A config file selects a preset ("paper" full-scale defaults or the CI-sized
"desk" profile) and may override any field.  Validation reports the JSON path
of the offending field.  The desk preset shrinks the experiment (20 owners,
20% corpus, 2 epochs) and recalibrates the step size, code length and
regularizer weight so the same qualitative phenomena appear within a
CI-friendly wall-clock budget.
"""

from __future__ import annotations

import copy as _copy
import json
from dataclasses import asdict, dataclass, field

from .fedsim import FLConfig, Seeds, Strategy

SCHEMA_VERSION = 1

# Full-scale defaults (code/embedding parameters and training plan).
PAPER_PRESET = {
    "code": {"m": 1000, "q": 10, "tau": 0.038, "kappa": 100.0,
             "epsilon": 1e-6},
    "whitebox": {"p": 1000, "threshold": 0.11, "dtype": "float32"},
    "data": {"mnist_dir": None, "n_owners": 100, "eval_fraction": 0.25,
             "corpus_fraction": 1.0, "synthetic_size": 70000},
    "fl": {"strategy": "DropoutWM", "owners_per_round": 10, "local_batch": 16,
           "learning_rate": 0.001, "epochs": 5, "iterations": None,
           "dropout_prob": 0.2, "lambda": 1.0, "wm_batch": 16,
           "dropout_in_main": False, "log_every": 10, "eval_subsample": 512},
    "trials": {"cells": [[1, "None", 4], [2, "None", 4], [6, "None", 4],
                         [1, "FineTune", 4], [2, "FineTune", 4],
                         [6, "FineTune", 4], [1, "Prune", 4],
                         [2, "Prune", 4], [6, "Prune", 4]],
               "attack_data_size": None, "prune_fraction": 0.8,
               "finetune_epochs": 5, "finetune_batch": 16,
               "finetune_learning_rate": 0.001},
    "seeds": {"corpus": 0, "partition": 1, "triggers": 2, "code": 3,
              "basis": 4, "projection": 5, "model": 6, "rounds": 7,
              "trials": 8},
}

# CI-sized profile: scaled-down experiment with recalibrated step size and
# code length (fewer aggregation rounds need larger steps; the shorter code
# keeps trigger memorization feasible within the reduced round count).
DESK_OVERRIDES = {
    "code": {"m": 128},
    "whitebox": {"p": 768},
    "data": {"n_owners": 20, "corpus_fraction": 0.2, "synthetic_size": 14000},
    "fl": {"learning_rate": 0.03, "epochs": 2, "lambda": 3.0, "wm_batch": 16},
    "trials": {"attack_data_size": 512,
               "finetune_learning_rate": 0.001,
               "cells": [[1, "None", 12], [2, "None", 12], [6, "None", 12],
                         [1, "FineTune", 12], [2, "FineTune", 12],
                         [6, "FineTune", 12], [1, "Prune", 12],
                         [2, "Prune", 12], [6, "Prune", 12]]},
}

PRESETS = {"paper": {}, "desk": DESK_OVERRIDES}


class SchemaError(ValueError):
    """Config validation failure; carries the JSON path of the field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _deep_merge(base: dict, override: dict) -> dict:
    out = _copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = _copy.deepcopy(value)
    return out


def _expect(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise SchemaError(path, message)


def _num(d: dict, key: str, path: str, lo=None, hi=None, integer=False,
         optional=False):
    value = d.get(key)
    if value is None:
        _expect(optional, f"{path}.{key}", "missing required value")
        return None
    kinds = (int,) if integer else (int, float)
    _expect(isinstance(value, kinds) and not isinstance(value, bool),
            f"{path}.{key}", f"expected a number, got {value!r}")
    if lo is not None:
        _expect(value >= lo, f"{path}.{key}", f"{value} < {lo}")
    if hi is not None:
        _expect(value <= hi, f"{path}.{key}", f"{value} > {hi}")
    return value


@dataclass
class Config:
    """Validated experiment configuration (resolved preset + overrides)."""

    raw: dict

    @property
    def code(self) -> dict:
        return self.raw["code"]

    @property
    def whitebox(self) -> dict:
        return self.raw["whitebox"]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def fl(self) -> dict:
        return self.raw["fl"]

    @property
    def trials(self) -> dict:
        return self.raw["trials"]

    @property
    def seeds(self) -> dict:
        return self.raw["seeds"]

    def fl_config(self, strategy=None) -> FLConfig:
        fl = self.fl
        return FLConfig(
            strategy=Strategy.from_name(strategy or fl["strategy"]),
            n_owners=self.data["n_owners"],
            owners_per_round=fl["owners_per_round"],
            local_batch=fl["local_batch"],
            learning_rate=fl["learning_rate"],
            epochs=fl["epochs"],
            iterations=fl.get("iterations"),
            dropout_prob=fl["dropout_prob"],
            lam=fl["lambda"],
            wm_batch=fl["wm_batch"],
            dropout_in_main=fl["dropout_in_main"],
            seeds=Seeds(model=self.seeds["model"], rounds=self.seeds["rounds"]),
            log_every=fl["log_every"],
            eval_subsample=fl["eval_subsample"],
        )

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def resolve(user: dict | None = None, preset: str | None = None) -> Config:
    """Merge preset + user overrides over the full-scale defaults, validate."""
    user = dict(user or {})
    version = user.pop("schema_version", SCHEMA_VERSION)
    _expect(version == SCHEMA_VERSION, "schema_version",
            f"unsupported version {version} (tool speaks {SCHEMA_VERSION})")
    preset = user.pop("preset", preset or "paper")
    _expect(preset in PRESETS, "preset",
            f"unknown preset {preset!r}; options: {sorted(PRESETS)}")
    merged = _deep_merge(PAPER_PRESET, PRESETS[preset])
    known = set(PAPER_PRESET) | {"run_dir"}
    for key in user:
        _expect(key in known, key, "unknown section")
    merged = _deep_merge(merged, user)
    merged["schema_version"] = SCHEMA_VERSION
    merged["preset"] = preset
    validate(merged)
    return Config(raw=merged)


def load_config(path, preset: str | None = None) -> Config:
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(str(path), f"not valid JSON ({exc})") from exc
    _expect(isinstance(user, dict), str(path), "top level must be an object")
    return resolve(user, preset=preset)


def validate(raw: dict) -> None:
    code = raw["code"]
    q = _num(code, "q", "code", lo=2, integer=True)
    _num(code, "m", "code", lo=1, integer=True)
    tau = _num(code, "tau", "code", lo=0.0)
    _expect(0 < tau < 1.0 / q, "code.tau",
            f"cutoff must lie in (0, 1/q) = (0, {1.0 / q:.4f})")
    _num(code, "kappa", "code", lo=1e-12)
    eps = _num(code, "epsilon", "code")
    _expect(0 < eps < 1, "code.epsilon", "must be in (0, 1)")

    wb = raw["whitebox"]
    _num(wb, "p", "whitebox", lo=1, integer=True)
    _num(wb, "threshold", "whitebox", lo=0.0, hi=1.0)
    _expect(wb.get("dtype") in ("float32", "float64"), "whitebox.dtype",
            "expected 'float32' or 'float64'")

    data = raw["data"]
    n_owners = _num(data, "n_owners", "data", lo=1, integer=True)
    ef = _num(data, "eval_fraction", "data")
    _expect(0 < ef < 1, "data.eval_fraction", "must be in (0, 1)")
    cf = _num(data, "corpus_fraction", "data")
    _expect(0 < cf <= 1, "data.corpus_fraction", "must be in (0, 1]")
    _num(data, "synthetic_size", "data", lo=10, integer=True)

    fl = raw["fl"]
    Strategy.from_name(fl.get("strategy", ""))
    opr = _num(fl, "owners_per_round", "fl", lo=1, integer=True)
    _expect(opr <= n_owners, "fl.owners_per_round",
            f"{opr} exceeds data.n_owners = {n_owners}")
    _num(fl, "local_batch", "fl", lo=1, integer=True)
    _num(fl, "learning_rate", "fl", lo=1e-12)
    _num(fl, "epochs", "fl", lo=1, integer=True)
    _num(fl, "iterations", "fl", lo=1, integer=True, optional=True)
    dp = _num(fl, "dropout_prob", "fl", lo=0.0)
    _expect(dp < 1, "fl.dropout_prob", "must be in [0, 1)")
    _num(fl, "lambda", "fl", lo=0.0)
    _num(fl, "wm_batch", "fl", lo=1, integer=True)
    _num(fl, "log_every", "fl", lo=0, integer=True)
    _num(fl, "eval_subsample", "fl", lo=1, integer=True)

    trials = raw["trials"]
    cells = trials.get("cells")
    _expect(isinstance(cells, list) and cells, "trials.cells",
            "expected a nonempty list of [c, attack, n_trials]")
    for i, cell in enumerate(cells):
        path = f"trials.cells[{i}]"
        _expect(isinstance(cell, list) and len(cell) == 3, path,
                "expected [c, attack, n_trials]")
        c, attack, n = cell
        _expect(isinstance(c, int) and 1 <= c <= n_owners, f"{path}[0]",
                f"collusion size must be in [1, {n_owners}]")
        _expect(attack in ("None", "FineTune", "Prune"), f"{path}[1]",
                "attack must be 'None', 'FineTune' or 'Prune'")
        _expect(isinstance(n, int) and n >= 1, f"{path}[2]",
                "trial count must be a positive integer")
    _num(trials, "attack_data_size", "trials", lo=1, integer=True,
         optional=True)
    pf = _num(trials, "prune_fraction", "trials", lo=0.0)
    _expect(pf < 1, "trials.prune_fraction", "must be in [0, 1)")
    _num(trials, "finetune_epochs", "trials", lo=0, integer=True)
    _num(trials, "finetune_batch", "trials", lo=1, integer=True)
    _num(trials, "finetune_learning_rate", "trials", lo=1e-12)

    seeds = raw["seeds"]
    for name in ("corpus", "partition", "triggers", "code", "basis",
                 "projection", "model", "rounds", "trials"):
        _num(seeds, name, "seeds", integer=True)
