import os
import tempfile

os.environ.setdefault("CENSORLAB_LOG_DIR", tempfile.mkdtemp(prefix = "censorlab-logs-"))

import pytest

import traffic_builders as builders
from censorlang import parse
from config import CensorConfig, parse_config
from engine import Engine, EventLog
from models import ModelStore

PACKET_COUNT_PROGRAM = """\
COPY 0 reg:u32:0
process:
if reg:u32:0 GEQ 10: RETURN DROP
INC reg:u32:0
"""


def make_engine(program_source = None, config = None, models = None, store = None) -> Engine:
  "Engine with an in-memory event log; models maps name -> path"

  config = config or CensorConfig()
  store = store or ModelStore()
  for name, path in (models or {}).items():
    store.load(name, path)
  program = parse(program_source, store.shapes()) if program_source is not None else None
  return Engine(config, program = program, model_store = store, event_log = EventLog())


@pytest.fixture
def engine_factory():
  return make_engine

@pytest.fixture
def config_factory():
  def build(**sections):
    return parse_config(sections)
  return build

@pytest.fixture
def affine_model(tmp_path):
  "2 inputs, 1 output: y = x0 - x1"

  path = tmp_path / "wf.affine"
  path.write_text("2 1\n1 -1\n0\n")
  return str(path)

@pytest.fixture
def flow():
  return builders.FlowSpec()

@pytest.fixture
def packet_count_program():
  return PACKET_COUNT_PROGRAM
