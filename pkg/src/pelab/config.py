"""Experiment configuration: named scenarios and strict structured-text parsing.

A config file is JSON or YAML with the top-level keys below; unknown keys at
any level are rejected. Every field has a default, so ``{}`` is a valid
config (the ``standard`` scenario).

Example::

    scenario: standard
    n: 200000
    seed: 0
    enhance: {preset: medium-sde, sigma_t: auto}
    sweep_pd: {sigma_list: null, n_sigma: 8, yan_alpha: [0.5]}
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codecs import codec_from_dict
from .gmm import ExactScore, GmmModel, PerturbedScore, load_model
from .metrics import GridSpec
from .pipeline import EnhanceConfig
from .solvers import GRADIENT_MODES, SOLVERS, ConfigurationError

SCENARIOS = {
    "standard": {"model": "bimodal-1d", "codec": {"kind": "uniform-mse", "delta": 1.0, "offset": 0.0}},
    "deadzone": {"model": "bimodal-1d", "codec": {"kind": "deadzone-opaque", "delta": 1.0, "offset": 0.0}},
    "perceptual": {"model": "bimodal-1d", "codec": {"kind": "cell-sampler-perceptual", "delta": 1.0, "offset": 0.0}},
    "gaussian": {"model": "std-normal-1d", "codec": {"kind": "uniform-mse", "delta": 1.0, "offset": 0.0}},
    "grid-2d": {"model": "grid-gmm-2d", "codec": {"kind": "uniform-mse", "delta": 1.0, "offset": 0.0}},
}

DEFAULTS = {
    "scenario": "standard",
    "model": None,
    "codec": None,
    "n": 200_000,
    "seed": 0,
    "output": "out",
    "score": {"kind": "exact", "amplitude": 0.0, "frequency": 1.0},
    "enhance": {
        "preset": "medium-sde",
        "sigma_t": "auto",
        "steps": None,
        "solver": None,
        "zeta": 0.3,
        "gradient_mode": "recon-consistency",
        "readout": "raw",
        "n_probe": 20_000,
        "tol": 0.05,
        "sigma_max": 4.0,
    },
    "metrics": {"grid": None, "peak": None, "frechet": True, "fisher": False, "dump_samples": False},
    "sweep_pd": {"sigma_list": None, "n_sigma": 8, "sigma_min": 0.05, "yan_alpha": []},
    "sweep_speed": {
        "budgets": [1, 4, 8, 16, 32, 64, 256, 512],
        "solvers": ["consistency", "ode-euler", "ode-heun", "sde-euler", "dps-sde"],
        "sigma_t": 0.6,
    },
    "verify": {"scenarios": None, "sigma_list": [0.2, 0.6, 1.5], "solver": "sde-euler", "steps": 512, "ode_tol": 0.02},
    "bd": {"anchor": None, "test": None},
}


class FlippedScore:
    """Sign-inverted exact score; a deliberately broken source for sanity checks."""

    def __init__(self, model: GmmModel):
        self.base = ExactScore(model)

    def __call__(self, sigma, x):
        return -self.base(sigma, x)

    def hvp(self, sigma, x, v):
        return -self.base.hvp(sigma, x, v)


def _merge(defaults: dict, given: dict, where: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigurationError(f"{where or 'config'} must be a mapping")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigurationError(f"unknown key(s) {unknown} in {where or 'config'}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        nested = isinstance(defaults[key], dict) and key not in ("model", "codec")
        out[key] = _merge(defaults[key], value, f"{where}.{key}".lstrip(".")) if nested else value
    return out


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings; ``raw`` echoes into the run manifest."""

    raw: dict

    @property
    def scenario(self) -> str:
        return self.raw["scenario"]

    def model(self) -> GmmModel:
        return load_model(self.raw["model"])

    def codec(self):
        return codec_from_dict(self.raw["codec"])

    def score_fn(self, model: GmmModel | None = None):
        model = model or self.model()
        s = self.raw["score"]
        if s["kind"] == "exact":
            return ExactScore(model)
        if s["kind"] == "perturbed":
            return PerturbedScore(model, float(s["amplitude"]), float(s["frequency"]))
        return FlippedScore(model)

    def enhance_config(self, seed=None) -> EnhanceConfig:
        e = dict(self.raw["enhance"])
        return EnhanceConfig(seed=self.raw["seed"] if seed is None else seed, **e)

    def grid(self, model: GmmModel | None = None):
        g = self.raw["metrics"]["grid"]
        if g is None:
            model = model or self.model()
            if model.d > 2:
                return None
            return GridSpec.uniform(model.d, -8.0, 8.0, 512 if model.d == 1 else 128)
        return GridSpec(g["lo"], g["hi"], g["bins"])

    def sigma_list(self, sigma_star: float | None = None) -> list:
        sp = self.raw["sweep_pd"]
        if sp["sigma_list"] is not None:
            return [float(s) for s in sp["sigma_list"]]
        return [float(s) for s in np.geomspace(sp["sigma_min"], sigma_star, int(sp["n_sigma"]))]


def resolve(raw: dict | None = None, *, seed=None, perturb=None, output=None) -> ExperimentConfig:
    """Validate a raw mapping, fill defaults and scenario fields, apply CLI overrides."""
    cfg = _merge(DEFAULTS, raw or {}, "")
    if cfg["scenario"] not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {cfg['scenario']!r}; known: {sorted(SCENARIOS)}")
    for key in ("model", "codec"):
        if cfg[key] is None:
            cfg[key] = copy.deepcopy(SCENARIOS[cfg["scenario"]][key])
    if isinstance(cfg["codec"], dict):
        cfg["codec"] = {"offset": 0.0, **cfg["codec"]}
    if seed is not None:
        cfg["seed"] = int(seed)
    if output is not None:
        cfg["output"] = str(output)
    if perturb is not None:
        a, omega = perturb
        cfg["score"] = {"kind": "perturbed", "amplitude": float(a), "frequency": float(omega)}
    _validate(cfg)
    return ExperimentConfig(cfg)


def _validate(cfg: dict) -> None:
    try:
        model = load_model(cfg["model"])
        codec_from_dict(cfg["codec"])
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigurationError("seed must be a nonnegative integer")
    if not isinstance(cfg["n"], int) or cfg["n"] < 1:
        raise ConfigurationError("n must be a positive integer")
    s = cfg["score"]
    if s["kind"] not in ("exact", "perturbed", "flipped"):
        raise ConfigurationError(f"unknown score kind {s['kind']!r}")
    if s["amplitude"] < 0 or s["frequency"] <= 0:
        raise ConfigurationError("perturbation needs amplitude >= 0 and frequency > 0")
    e = cfg["enhance"]
    if e["gradient_mode"] not in GRADIENT_MODES:
        raise ConfigurationError(f"unknown gradient_mode {e['gradient_mode']!r}")
    EnhanceConfig(**e)
    sp = cfg["sweep_speed"]
    bad = [s for s in sp["solvers"] if s not in SOLVERS]
    if bad:
        raise ConfigurationError(f"unknown solver(s) {bad}")
    if any(int(b) < 1 for b in sp["budgets"]):
        raise ConfigurationError("NFE budgets must be >= 1")
    v = cfg["verify"]
    if v["solver"] not in SOLVERS:
        raise ConfigurationError(f"unknown solver {v['solver']!r}")
    for name in v["scenarios"] or []:
        if name not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {name!r} in verify.scenarios")
    if cfg["metrics"]["grid"] is not None:
        g = cfg["metrics"]["grid"]
        if set(g) != {"lo", "hi", "bins"}:
            raise ConfigurationError("metrics.grid needs exactly lo, hi, bins")
        try:
            grid = GridSpec(g["lo"], g["hi"], g["bins"])
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        if grid.d != model.d:
            raise ConfigurationError("metrics.grid dimension does not match the model")


def load_config(path) -> dict:
    """Read a JSON (``.json``) or YAML (anything else) config file into a mapping."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            import yaml

            data = yaml.safe_load(text)
    except Exception as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    return data or {}
