# acrkn/domain/config.py

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from domain.errors import ConfigError
from domain.presets import PRESETS, get_preset

load_dotenv()

LOG_LEVEL: str = os.getenv("ACRKN_LOG_LEVEL", "INFO")
RUNS_DIR: str = os.getenv("ACRKN_RUNS_DIR", "runs")
WORKERS: int = int(os.getenv("ACRKN_WORKERS", "1"))


class SyntheticSource(BaseModel):
    """A dataset generated on the fly: system kind, its parameter overrides, size and seed."""
    model_config = ConfigDict(extra="forbid")

    system: str = "pendulum-lag"
    episodes: int = Field(50, ge=2)
    length: int = Field(100, ge=2)
    seed: int = 0
    params: Dict[str, float] = Field(default_factory=dict)


class RunConfig(BaseModel):
    """
    Fully resolved run configuration. Unknown keys are rejected.
    JSON files may spell `lam` as `lambda`.
    """
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    preset: str = "desk"
    mode: Literal["forward", "inverse"] = "forward"

    m: int = Field(8, ge=1)
    n: Optional[int] = None
    num_basis: int = Field(4, ge=1)
    bandwidth: int = Field(2, ge=1)
    control_kind: Literal["linear", "locally-linear", "nonlinear", "none"] = "nonlinear"
    num_control_basis: Optional[int] = Field(None, ge=1)
    init_var: float = Field(10.0, gt=0)

    encoder_hidden: List[int] = Field(default_factory=lambda: [32])
    decoder_hidden: List[int] = Field(default_factory=lambda: [32])
    var_decoder_hidden: List[int] = Field(default_factory=lambda: [32])
    control_hidden: List[int] = Field(default_factory=lambda: [32, 32])
    action_decoder_hidden: List[int] = Field(default_factory=lambda: [64])
    var_decoder: bool = False
    action_as_observation: bool = False

    lam: float = Field(0.0, ge=0, alias="lambda")
    action_feedback: bool = True

    loss: Literal["rmse", "nll"] = "rmse"
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(3e-3, ge=0)
    momentum: float = Field(0.0, ge=0, lt=1)
    grad_clip: float = Field(5.0, gt=0)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(16, ge=1)
    seed: int = 0
    val_fraction: float = Field(0.125, ge=0, lt=1)
    window: Optional[int] = Field(None, ge=2)
    record_wall_time: bool = True

    protocol: Literal["prefix", "random", "none"] = "random"
    prefix_len: int = Field(60, ge=1)
    drop_fraction: float = Field(0.75, ge=0, lt=1)

    # CSV file or dataset directory, or a synthetic source
    dataset: Optional[Union[str, SyntheticSource]] = None

    @model_validator(mode="after")
    def _check_dims(self) -> "RunConfig":
        if self.n is None:
            self.n = 2 * self.m
        elif self.n != 2 * self.m:
            raise ValueError(f"n must equal 2m (m={self.m}, n={self.n})")
        if self.preset not in PRESETS:
            raise ValueError(f"Unknown preset: {self.preset}")
        for name in ("encoder_hidden", "decoder_hidden", "var_decoder_hidden",
                     "control_hidden", "action_decoder_hidden"):
            if any(width < 1 for width in getattr(self, name)):
                raise ValueError(f"{name} widths must be positive")
        if self.loss == "nll" and not self.var_decoder:
            raise ValueError("loss 'nll' requires var_decoder = true")
        return self


def load_config_file(path: str | Path) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def resolve_config(
        preset: Optional[str] = None,
        file_values: Optional[Dict[str, Any]] = None,
        overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Merge preset defaults < config file < explicit overrides (None values ignored).
    """
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "lambda" in file_values:
        file_values["lam"] = file_values.pop("lambda")

    name = overrides.get("preset") or file_values.get("preset") or preset or "desk"
    merged: Dict[str, Any] = {**get_preset(name), **file_values, **overrides, "preset": name}
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump(by_alias=False)
