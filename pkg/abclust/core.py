import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TypeVar

import json5
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from abclust.__version__ import __version__
from abclust.datasets import Instance
from abclust.model import AbcConfig
from abclust.registry import REGISTRIES_CONTEXT_KEY, Registries
from abclust.spectral import KernelMatrix
from abclust.training import TrainConfig
from abclust.utils import ConfigurationError, LateInit, millis, sha256_file, write_atomic

MANIFEST_NAME = "manifest.json"


class RunConfig(BaseModel):
    """Training configuration file"""
    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True, extra="forbid")

    model: AbcConfig = AbcConfig()
    train: TrainConfig = TrainConfig()


@dataclass
class Environment:
    registries: Registries
    debug: bool
    seed: int = 0
    checkpoint: Path | None = None
    gamma: float = 1.0
    """Bandwidth of the raw Gaussian kernel baseline"""


def describe_validation_error(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f" - {path}: {err['msg']}")
    return "\n".join(lines)


M = TypeVar("M", bound=BaseModel)


def load_config_file(file: Path, model: type[M], registries: Registries) -> M:
    """Loads a json, yaml or json5 file into `model`, picking the parser by extension"""
    if not file.is_file():
        raise ConfigurationError(f"Config file {file} does not exist")
    ext = file.name.split(".")[-1]
    d: Any
    with open(file, "r", encoding="utf-8") as f:
        if ext in ["json", "yml", "yaml"]:
            d = yaml.load(f, yaml.FullLoader)
        elif ext in ["json5", "jsonc"]:
            d = json5.load(f, encoding="utf-8")
        else:
            raise ConfigurationError(f"Cannot find loader for config extension {ext}")
    return validate_config(d or {}, model, registries, str(file))


def validate_config(d: Any, model: type[M], registries: Registries, source: str = "config") -> M:
    try:
        return model.model_validate(d, context={REGISTRIES_CONTEXT_KEY: registries})
    except ValidationError as e:
        raise ConfigurationError(f"Invalid {source}:\n{describe_validation_error(e)}") from e


class RunManifest(BaseModel):
    """What a command read, wrote and how long it took"""
    model_config = ConfigDict(use_attribute_docstrings=True)

    version: str = __version__
    command: str
    config: dict[str, Any] = {}
    """Effective configuration after flags were applied"""
    seed: int | None = None
    inputs: list[str] = []
    outputs: list[str] = []
    started_ms: int
    finished_ms: int
    checksums: dict[str, str] = {}
    """sha256 of every input and output file"""


class RunRecorder:
    """Collects artifacts of one command and writes manifest.json next to them"""

    def __init__(self, command: str, out_dir: Path, logger: logging.Logger):
        self.command = command
        self.out_dir = out_dir
        self.logger = logger
        self.started = millis()
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def add_input(self, *paths: Path):
        for p in paths:
            if p.is_dir():
                self.inputs.extend(sorted(f for f in p.iterdir() if f.is_file()))
            else:
                self.inputs.append(p)

    def add_output(self, *paths: Path):
        self.outputs.extend(paths)

    def finish(self, config: dict[str, Any] | None = None, seed: int | None = None) -> Path:
        sums = {str(p): sha256_file(p) for p in [*self.inputs, *self.outputs] if p.is_file()}
        manifest = RunManifest(command=self.command, config=config or {}, seed=seed,
                               inputs=[str(p) for p in self.inputs],
                               outputs=[str(p) for p in self.outputs],
                               started_ms=self.started, finished_ms=millis(), checksums=sums)
        path = self.out_dir / MANIFEST_NAME
        write_atomic(path, manifest.model_dump_json(indent=2))
        self.logger.debug(f"Wrote {path} with {len(sums)} checksums")
        return path


class KernelMethod(ABC):
    """Turns an instance into a kernel matrix for spectral clustering"""
    key: str
    env: LateInit[Environment] = LateInit()
    _logger: logging.Logger | None = None

    def setup(self, env: Environment):
        self.env = env

    def get_logger_name(self):
        return type(self).__name__

    @property
    def logger(self):
        if self._logger:
            return self._logger
        lg = logging.getLogger(self.get_logger_name())
        lg.setLevel(logging.DEBUG if self.env.debug else logging.INFO)
        self._logger = lg
        return lg

    @abstractmethod
    def kernel(self, inst: Instance) -> KernelMatrix:
        ...
