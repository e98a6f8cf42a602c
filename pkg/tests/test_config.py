import os

import pytest

from config import DEFAULT_IPC_PORT, CensorConfig, default_config_path, load_config, parse_config
from engine import build_filters, build_models, build_program
from error_handler import BadConfig
from filters import IdentifierClass, ListKind

ROOT = os.path.join(os.path.dirname(__file__), "..")


def test_defaults():
  config = parse_config({})

  assert config.engine.mode == "pcap"
  assert config.engine.idle_timeout == 600.0
  assert config.ipc.port == DEFAULT_IPC_PORT == 25716
  assert config.ipc.bind == "127.0.0.1"
  assert config.program.path is None
  assert config.model_runtime.budget_ms == 50.0

@pytest.mark.parametrize("data", [
  {"ipc": {"bind": "0.0.0.0"}},
  {"ipc": {"bind": "localhost"}},
  {"blocklist": {"vlan": {"entries": [1]}}},
  {"allowlist": {"tcp-connection": {"entries": []}}},
  {"blocklist": {"ip": {"action": "explode"}}},
  {"engine": {"mode": "inline"}},
  {"engine": {"idle_timeout": 0}},
  {"program": {"language": "python"}},
  {"unknown_section": {}},
])
def test_rejects_invalid(data):
  with pytest.raises(BadConfig):
    parse_config(data)

def test_ipv6_loopback_is_allowed():
  assert parse_config({"ipc": {"bind": "::1"}}).ipc.bind == "::1"

def test_load_errors(tmp_path):
  with pytest.raises(BadConfig):
    load_config(str(tmp_path / "missing.toml"))
  broken = tmp_path / "broken.toml"
  broken.write_text("[engine\nmode = ")
  with pytest.raises(BadConfig):
    load_config(str(broken))

def test_paths_resolve_against_config_directory(tmp_path):
  path = tmp_path / "censor.toml"
  path.write_text('[program]\npath = "programs/p.cl"\n')
  config = load_config(str(path))

  assert config.resolve(config.program.path) == os.path.join(str(tmp_path), "programs/p.cl")
  assert config.resolve("/abs/p.cl") == "/abs/p.cl"
  assert CensorConfig().resolve("rel.cl") == "rel.cl"

def test_environment_overrides(monkeypatch, tmp_path):
  monkeypatch.setenv("CENSORLAB_IPC_PORT", "31000")
  assert parse_config({}).ipc.port == 31000

  monkeypatch.setenv("CENSORLAB_IPC_PORT", "not-a-port")
  with pytest.raises(BadConfig):
    parse_config({})

  monkeypatch.setenv("CENSORLAB_CONFIG", str(tmp_path / "other.toml"))
  assert default_config_path() == str(tmp_path / "other.toml")

def test_list_sections_build_filters():
  config = parse_config({
    "blocklist": {"udp-service": {"action": "reset", "entries": [["8.8.8.8", 53]]}},
    "allowlist": {"tcp-port": {"action": "drop", "entries": [80, 443]}},
  })
  filters = build_filters(config)

  assert filters.get(ListKind.BLOCK, IdentifierClass.UDP_SERVICE).list_entries() == ["8.8.8.8 53"]
  assert filters.get(ListKind.ALLOW, IdentifierClass.TCP_PORT).list_entries() == ["443", "80"]

def test_example_config_loads(monkeypatch):
  monkeypatch.delenv("CENSORLAB_IPC_PORT", raising = False)
  config = load_config(os.path.join(ROOT, "censor.toml"))
  models = build_models(config)
  program = build_program(config, models)
  filters = build_filters(config)

  assert "wf" in models
  assert len(program.process_ops) == 2
  assert config.cost_table["MODEL"] == 100.0
  assert filters.get(ListKind.BLOCK, IdentifierClass.IP).list_entries() == ["192.0.2.66"]
