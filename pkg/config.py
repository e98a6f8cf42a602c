"""
censor.toml: engine, IPC, program, model and list configuration.

The file is parsed with tomllib and validated with pydantic. Environment
variables (optionally from a .env file) override a few defaults:

  CENSORLAB_CONFIG     path of the config file
  CENSORLAB_IPC_PORT   IPC port
"""

import ipaddress
import os
try:
  import tomllib
except ModuleNotFoundError:  # Python < 3.11
  import tomli as tomllib
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from actions import parse_action
from common_functions import read_toml_file
from error_handler import BadConfig
from filters import CONNECTION_CLASSES, IdentifierClass

DEFAULT_CONFIG_PATH = "censor.toml"
DEFAULT_IPC_PORT = 25716

Entry = Union[str, int, List[Union[str, int]]]


class _Section(BaseModel):
  model_config = ConfigDict(extra = "forbid")


class EngineSection(_Section):
  mode: Literal["pcap", "wire-sim", "tap"] = "pcap"
  idle_timeout: float = Field(600.0, gt = 0)
  eviction_interval: float = Field(10.0, gt = 0)
  max_connections: int = Field(0, ge = 0)
  event_log: Optional[str] = None
  time_emulation: bool = False


class IpcSection(_Section):
  enabled: bool = True
  bind: str = "127.0.0.1"
  port: int = Field(DEFAULT_IPC_PORT, ge = 0, le = 65535)

  @field_validator("bind")
  @classmethod
  def loopback_only(cls, value: str) -> str:
    try:
      address = ipaddress.ip_address(value)
    except ValueError:
      raise ValueError(f"IPC bind address {value!r} is not an IP address") from None
    if not address.is_loopback:
      raise ValueError(f"IPC must bind a loopback address, not {value}")
    return value


class ProgramSection(_Section):
  language: str = "censorlang"
  path: Optional[str] = None

  @field_validator("language")
  @classmethod
  def censorlang_only(cls, value: str) -> str:
    if value.lower() != "censorlang":
      raise ValueError(f"unsupported program language {value!r}: only censorlang is available")
    return value.lower()


class ModelEntry(_Section):
  name: str
  path: str


class ModelRuntimeSection(_Section):
  budget_ms: float = Field(50.0, gt = 0)


class ListSection(_Section):
  action: Optional[str] = None
  entries: List[Entry] = []

  @field_validator("action")
  @classmethod
  def known_action(cls, value: Optional[str]) -> Optional[str]:
    if value is not None:
      parse_action(value)
    return value


class WireSection(_Section):
  output_a: Optional[str] = None
  output_b: Optional[str] = None


class TapSection(_Section):
  queue_num: int = Field(0, ge = 0)
  inject: bool = True


class CensorConfig(_Section):
  engine: EngineSection = Field(default_factory = EngineSection)
  ipc: IpcSection = Field(default_factory = IpcSection)
  program: ProgramSection = Field(default_factory = ProgramSection)
  models: List[ModelEntry] = []
  model_runtime: ModelRuntimeSection = Field(default_factory = ModelRuntimeSection)
  cost_table: Dict[str, float] = {}
  allowlist: Dict[str, ListSection] = {}
  blocklist: Dict[str, ListSection] = {}
  wire: WireSection = Field(default_factory = WireSection)
  tap: TapSection = Field(default_factory = TapSection)
  base_dir: str = ""

  @model_validator(mode = "after")
  def known_classes(self) -> "CensorConfig":
    for kind, lists in (("allowlist", self.allowlist), ("blocklist", self.blocklist)):
      for name in lists:
        try:
          cls = IdentifierClass(name)
        except ValueError:
          raise ValueError(f"unknown identifier class [{kind}.{name}]") from None
        if kind == "allowlist" and cls in CONNECTION_CLASSES:
          raise ValueError(f"[{kind}.{name}]: there is no connection-level allowlist")
    return self

  def resolve(self, path: Optional[str]) -> Optional[str]:
    "Resolves a path from the file relative to the file's directory"

    if path is None or os.path.isabs(path) or not self.base_dir:
      return path
    return os.path.join(self.base_dir, path)


def default_config_path() -> str:
  return os.environ.get("CENSORLAB_CONFIG", DEFAULT_CONFIG_PATH)

def apply_env_overrides(config: CensorConfig) -> CensorConfig:
  port = os.environ.get("CENSORLAB_IPC_PORT")
  if port:
    try:
      config.ipc = IpcSection(bind = config.ipc.bind, port = int(port), enabled = config.ipc.enabled)
    except (ValueError, ValidationError) as e:
      raise BadConfig(f"CENSORLAB_IPC_PORT={port!r}: {e}") from None
  return config

def parse_config(data: dict, base_dir: str = "") -> CensorConfig:
  try:
    config = CensorConfig.model_validate({**data, "base_dir": base_dir})
  except ValidationError as e:
    raise BadConfig(f"invalid configuration: {e}") from None
  return apply_env_overrides(config)

def load_config(path: Optional[str] = None) -> CensorConfig:
  """
  Reads and validates a config file.

  Raises:
    BadConfig: the file is missing, is not TOML or does not validate.
  """

  path = path or default_config_path()
  try:
    data = read_toml_file(path)
  except OSError as e:
    raise BadConfig(f"cannot read {path}: {e}") from None
  except tomllib.TOMLDecodeError as e:
    raise BadConfig(f"{path} is not valid TOML: {e}") from None
  return parse_config(data, os.path.dirname(os.path.abspath(path)))
