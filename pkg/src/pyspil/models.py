import json
import math
import os
import tomllib
from enum import StrEnum
from pathlib import Path
from typing import Any, List, Optional

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PositiveInt,
    field_validator,
    model_validator,
)

OUTPUT_ROOT_ENV = "PYSPIL_OUTPUT_ROOT"


class SurrogateConfig(BaseModel):
    """Parameters of the indicator-like factor phi(z) = (1 + b1 tau) / (1 + b2 tau exp(-z / tau))."""

    model_config = ConfigDict(frozen=True)

    tau: float = 1e-3
    b1: float = 1.0
    b2: float = 0.45

    @model_validator(mode="after")
    def check_bounds(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.b1 <= 0:
            raise ValueError("b1 must be positive")
        if not 0 < self.b2 < self.b1 / (1 + self.b1):
            raise ValueError("b2 must satisfy 0 < b2 < b1 / (1 + b1)")
        return self


class SeparationConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta: float = 0.3
    eps1: float = 0.2
    eps2: float = 0.05

    @model_validator(mode="after")
    def check_bounds(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not self.eps1 > self.eps2 > 0:
            raise ValueError("separation thresholds must satisfy eps1 > eps2 > 0")
        return self


class MultiplierMode(StrEnum):
    PENALTY = "penalty"
    LAGRANGIAN = "lagrangian"
    PIL = "pil"
    SPIL = "spil"


class MultiplierConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: MultiplierMode = MultiplierMode.SPIL
    k_p: float = Field(default=15.0, ge=0)
    k_i: float = Field(default=0.6, ge=0)
    # delta = 1 makes the constraint vacuous and is accepted for ablations.
    delta: float = Field(default=0.1, gt=0, le=1)
    separation: Optional[SeparationConfig] = None

    @model_validator(mode="after")
    def check_mode(self):
        if self.mode == MultiplierMode.PENALTY and not (self.k_p > 0 and self.k_i == 0):
            raise ValueError("penalty mode requires k_p > 0 and k_i = 0")
        if self.mode == MultiplierMode.LAGRANGIAN and not (self.k_p == 0 and self.k_i > 0):
            raise ValueError("lagrangian mode requires k_p = 0 and k_i > 0")
        if self.mode == MultiplierMode.SPIL and self.separation is None:
            raise ValueError("spil mode requires separation parameters")
        return self


class OptimizerKind(StrEnum):
    SGD = "sgd"
    ADAM = "adam"


class TrainerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    m: PositiveInt = 4096
    n: PositiveInt = 40
    gamma: float = Field(default=0.99, gt=0, lt=1)
    alpha_theta: float = Field(default=3e-4, gt=0)
    alpha_omega: float = Field(default=2e-4, gt=0)
    zeta: float = Field(default=1e-6, ge=0)
    max_iters: int = Field(default=1500, ge=0)
    seed: int = 0
    hidden: List[PositiveInt] = Field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    optimizer: OptimizerKind = OptimizerKind.ADAM
    log_interval: PositiveInt = 50
    record_wallclock: bool = True
    actor_output_bias: Optional[List[float]] = None
    actor_init: Optional[Path] = None

    @field_validator("activation")
    @classmethod
    def known_activation(cls, v):
        if v not in ("relu", "tanh", "identity"):
            raise ValueError(f"unknown activation {v!r}")
        return v


class NoiseChannel(BaseModel):
    """A normal distribution conditioned on the open interval (lower, upper)."""

    model_config = ConfigDict(frozen=True)

    mean: float = 0.0
    std: float = Field(gt=0)
    lower: float
    upper: float

    @model_validator(mode="after")
    def ordered_bounds(self):
        if not self.lower < self.upper:
            raise ValueError("noise bounds must satisfy lower < upper")
        return self


class NoiseSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    channels: List[NoiseChannel]

    @classmethod
    def symmetric(cls, stds: List[float], width: float) -> "NoiseSpec":
        """Zero-mean channels truncated at +/- `width` standard deviations."""
        return cls(
            channels=[
                NoiseChannel(std=s, lower=-width * s, upper=width * s) for s in stds
            ]
        )

    @property
    def dim(self) -> int:
        return len(self.channels)


class EnvId(StrEnum):
    CAR = "car"
    ROBOT = "robot"
    TOY = "toy"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    env: EnvId
    output_dir: Path = Path("runs")
    checkpoint_interval: int = Field(default=100, ge=0)
    eval_episodes: PositiveInt = 4096
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    multiplier: MultiplierConfig = Field(
        default_factory=lambda: MultiplierConfig(separation=SeparationConfig())
    )
    surrogate: SurrogateConfig = Field(default_factory=SurrogateConfig)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.model_validate(tomllib.loads(text))

    @classmethod
    def from_file(cls, path: Path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            return cls.model_validate(tomllib.load(fh))

    def dumps(self) -> str:
        return dump_toml(self.model_dump(mode="json", exclude_none=True))

    def resolved_output_dir(self) -> Path:
        """The output directory, placed under $PYSPIL_OUTPUT_ROOT when relative."""
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not self.output_dir.is_absolute():
            return Path(root) / self.output_dir
        return self.output_dir


class TrainRecord(BaseModel):
    """One row of a learning curve."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    iteration: int = Field(ge=0, alias="iter")
    J: float
    p_s: float = Field(ge=0, le=1)
    delta: float
    integral: float = Field(ge=0, alias="I")
    lam: float = Field(ge=0, alias="lambda")
    grad_J_norm: float
    grad_Phi_norm: float
    wallclock_s: float = 0.0

    @model_validator(mode="after")
    def finite_entries(self):
        for name, value in self.model_dump().items():
            if isinstance(value, float) and not math.isfinite(value):
                raise ValueError(f"{name} is not finite")
        return self


class ScenarioCommand(BaseModel):
    """Obstacle velocity command, held from time `t` until the next command."""

    model_config = ConfigDict(frozen=True)

    t: float = Field(ge=0)
    v: float
    omega: float


class ScenarioScript(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    description: str = ""
    obstacle_start: List[float]
    commands: List[ScenarioCommand]

    @field_validator("obstacle_start")
    @classmethod
    def five_components(cls, v):
        if len(v) != 5:
            raise ValueError("obstacle_start must be [px, py, alpha, v, omega]")
        return v

    @model_validator(mode="after")
    def ordered_commands(self):
        if not self.commands or self.commands[0].t != 0:
            raise ValueError("the first command must start at t = 0")
        times = [c.t for c in self.commands]
        if times != sorted(times):
            raise ValueError("commands must be ordered by time")
        return self

    def command_at(self, time: float) -> ScenarioCommand:
        current = self.commands[0]
        for command in self.commands:
            if command.t <= time + 1e-9:
                current = command
        return current


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot write {type(value).__name__} to a config file")


def dump_toml(data: dict, prefix: str = "") -> str:
    """Write a nested dict of scalars and scalar lists as TOML sections."""
    lines = []
    tables = []
    for key, value in data.items():
        if isinstance(value, dict):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_toml_value(value)}")
    text = "\n".join(lines)
    for key, value in tables:
        name = f"{prefix}{key}"
        section = f"[{name}]\n" + dump_toml(value, prefix=f"{name}.")
        text = f"{text}\n\n{section}" if text else section
    return text.rstrip("\n") + "\n" if not prefix else text
