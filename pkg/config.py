"""
Run configuration. Every section is a pydantic model with defaults, so an empty file runs the desk
pipeline. Values resolve as command line flag > config file > default.
"""

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError
from guidance import GuidanceConfig
from metrics import EvalConfig
from net import NetConfig
from oracle import GenConfig, OracleParams
from schedule import ScheduleConfig
from training import TrainConfig


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dataset: str = "data"
    checkpoints: str = "checkpoints"
    samples: str = "samples"
    reports: str = "reports"


class SampleConfig(BaseModel):
    """Sampling section: chain count, atom counts and trajectory output."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_per_pocket: int = Field(100, ge=1)
    n_atoms: Optional[int] = Field(None, ge=1)
    save_trajectory: bool = False
    trajectory_every: int = Field(10, ge=1)


class RunConfig(BaseModel):
    """Fully resolved configuration of a run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    n_complexes: int = Field(500, ge=1)
    schedule: ScheduleConfig = ScheduleConfig()
    denoiser: NetConfig = NetConfig(role="denoiser")
    classifier: NetConfig = NetConfig(role="regressor", layers=2)
    guidance: GuidanceConfig = GuidanceConfig()
    training: TrainConfig = TrainConfig()
    oracle: OracleParams = OracleParams()
    gen: GenConfig = GenConfig()
    eval: EvalConfig = EvalConfig()
    sampling: SampleConfig = SampleConfig()
    paths: PathsConfig = PathsConfig()

    @model_validator(mode="after")
    def _check_vocabulary(self):
        k = len(self.gen.elements)
        for name in ("denoiser", "classifier"):
            if getattr(self, name).num_types != k:
                raise ValueError(f"{name}.num_types must equal the {k} configured elements")
        if self.denoiser.role != "denoiser" or self.classifier.role != "regressor":
            raise ValueError("denoiser and classifier sections have fixed roles")
        return self


def deep_merge(base, override):
    """Recursively merge override into a copy of base."""

    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def dotted_to_nested(flat):
    """{'guidance.s': 80} -> {'guidance': {'s': 80}}; None values are dropped."""

    nested = {}
    for dotted, value in flat.items():
        if value is None:
            continue
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def read_config_data(path):
    """
    Raw config dict from a JSON config file or from the run header of a sampling manifest.

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    ConfigError
        If the file is not valid JSON.
    """

    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    try:
        first = json.loads(text.splitlines()[0])
    except (json.JSONDecodeError, IndexError):
        raise ConfigError(f"{path} is neither a JSON config nor a manifest") from None
    if first.get("kind") != "run":
        raise ConfigError(f"{path} has no run header")
    return first["config"]


def load_config(path=None, overrides=None):
    """
    Build a validated RunConfig.

    Parameters
    ----------
    path : str, Path or None
        JSON config file or manifest; defaults only if None.
    overrides : dict or None
        Dotted keys from command line flags, None values ignored.

    Returns
    -------
    RunConfig

    Raises
    ------
    ConfigError
        On unknown keys or invalid values.
    """

    data = read_config_data(path) if path else {}
    data = deep_merge(data, dotted_to_nested(overrides or {}))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from None


def with_overrides(cfg, overrides):
    """Revalidated copy of a config with dotted overrides applied."""

    data = deep_merge(cfg.model_dump(mode="json"), dotted_to_nested(overrides))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from None
