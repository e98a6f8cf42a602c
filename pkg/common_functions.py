import ipaddress
import logging
import os
try:
  import tomllib
except ModuleNotFoundError:  # Python < 3.11
  import tomli as tomllib
from typing import Any, Dict, Union

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = '%(asctime)s %(levelname)s:%(message)s'


def log_dir() -> str:
  "Directory log files are written to"

  return os.environ.get("CENSORLAB_LOG_DIR", "logs")

def get_logger(name: str, file_name: str, level: int = logging.INFO) -> logging.Logger:
  """
  Returns a module logger writing to its own file under the log directory.
  Calling it twice for the same name does not stack handlers.
  """

  logger = logging.getLogger(name)
  logger.setLevel(level)
  if not logger.handlers:
    directory = log_dir()
    os.makedirs(directory, exist_ok = True)
    file_handler = logging.FileHandler(os.path.join(directory, file_name))
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(file_handler)
  logger.propagate = False
  return logger

def read_text_file(file_path: str) -> str:
  "Opens and reads UTF-8 text file"

  with open(file_path, "r", encoding = "utf-8") as f:
    read_file = f.read()
  return read_file

def read_toml_file(file_path: str) -> Dict[str, Any]:
  "Opens and parses a TOML file"

  with open(file_path, "rb") as f:
    return tomllib.load(f)

def pack_ip(address: Union[str, bytes]) -> bytes:
  "Normalizes a textual or packed IPv4/IPv6 address to its packed form"

  if isinstance(address, bytes):
    if len(address) not in (4, 16):
      raise ValueError(f"packed address must be 4 or 16 bytes, got {len(address)}")
    return address
  return ipaddress.ip_address(address.strip()).packed

def format_ip(packed: bytes) -> str:
  "Renders a packed address as text"

  return str(ipaddress.ip_address(packed))

def pack_mac(address: Union[str, bytes]) -> bytes:
  "Parses aa:bb:cc:dd:ee:ff (or aa-bb-...) into 6 bytes"

  if isinstance(address, bytes):
    if len(address) != 6:
      raise ValueError("MAC address must be 6 bytes")
    return address
  parts = address.strip().replace("-", ":").split(":")
  if len(parts) != 6:
    raise ValueError(f"not a MAC address: {address}")
  return bytes(int(part, 16) for part in parts)

def format_mac(packed: bytes) -> str:
  return ":".join(f"{b:02x}" for b in packed)

def parse_port(value: Union[str, int]) -> int:
  "Parses a 16-bit port number"

  port = int(value)
  if not 0 <= port <= 65535:
    raise ValueError(f"port out of range: {port}")
  return port
