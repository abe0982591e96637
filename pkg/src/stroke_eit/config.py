"""Pipeline configuration: one JSON document, flags override selected keys."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .mesh import HeadGeometrySpec
from .phantom import PhantomRecipe

OUTPUT_ENV_VAR = "STROKE_EIT_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "outputDir": "stroke_eit_run",
    "contactImpedance": 1e-3,
    "currentAmplitude": 1e-3,
    "mesh2d": HeadGeometrySpec.default_2d().to_dict(),
    "mesh3d": HeadGeometrySpec.default_3d().to_dict(),
    # forward mesh of the nonlinear inversion (unknowns stay on the coarse mesh)
    "moForwardMesh2d": {"target_element_size": 0.003, "electrode_refinement_levels": 4},
    "recipe": PhantomRecipe().to_dict(),
    "noise": {"stdRelativeToMax": 0.00067},
    "dataset": {"count": 280, "splits": {"train": 200, "val": 40, "test": 40}},
    "ld": {"marginalStd": 0.2, "correlationLength": None},
    "mo": {"cases": 10, "alphaDelta": 1e4, "alphaSigma1": 1e4, "beta": 1e-4, "gamma": 0.9,
           "maxIterations": 50, "objectiveTolerance": 1e-6},
    "train": {"learningRate": 1e-3, "batchSize": 4, "patienceEpochs": 50, "maxEpochs": 500,
              "lrDecayPatience": None, "lrDecayFactor": 0.5,
              "normalizationMode": "perSampleMaxAbs"},
    "model": {"channels": [32, 64, 128, 256], "convsPerLevel": 3, "poolKeepFraction": 0.125},
    "growth3d": {
        "center": [0.0, 0.035, 0.015],
        "cases": [["40-40", 0.040, 0.040], ["30-40", 0.030, 0.040],
                  ["40-50", 0.040, 0.050], ["50-60", 0.050, 0.060]],
    },
}

# keys that locate or schedule work but never change numbers
_UNHASHED = ("outputDir", "jobs")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key {path + k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, seed: int | None = None, out: str | None = None) -> dict:
    """Defaults, overlaid by the JSON file, then by flags and the environment.

    Output directory precedence: ``--out`` flag, then the environment
    variable, then the file.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, data)
    if seed is not None:
        cfg["seed"] = int(seed)
    env_out = os.environ.get(OUTPUT_ENV_VAR)
    if out is not None:
        cfg["outputDir"] = out
    elif env_out:
        cfg["outputDir"] = env_out
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg.get("seed"), int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    ds = cfg["dataset"]
    if sum(ds["splits"].values()) != ds["count"]:
        raise ConfigError("dataset splits must add up to dataset.count")
    if set(ds["splits"]) - {"train", "val", "test"}:
        raise ConfigError("dataset splits may only be train, val and test")
    if cfg["contactImpedance"] <= 0:
        raise ConfigError("contactImpedance must be positive")
    if cfg["mo"]["cases"] > ds["splits"].get("test", 0):
        raise ConfigError("mo.cases exceeds the number of test samples")


def config_hash(cfg: dict) -> str:
    """Digest of every setting that can influence numerical results."""
    core = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
