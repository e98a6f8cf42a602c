"""
Censorship scenarios and the experiment runner.

A scenario pairs a censor program with two classes of traffic: connections
the censor should let through and connections it should block. Each class
is replayed through its own fresh engine and scored:

  an allowed connection succeeds when every packet is forwarded;
  a forbidden connection is blocked when any packet is dropped or reset,
  or the connection ends up condemned.

accuracy = (allowed_succeeded / allowed_total + forbidden_blocked / forbidden_total) / 2

Scenarios can be built in code or from a TOML manifest (see scenarios/).
"""

import os
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import regex
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

import traffic_builders as builders
from actions import ActionKind
from censorlang import parse
from common_functions import get_logger, read_text_file, read_toml_file
from config import CensorConfig
from engine import Engine, EventLog, Verdict, read_capture
from error_handler import BadConfig, PacketError
from flows import OverrideKind, connection_key
from models import ModelStore
from packet import LINKTYPE_ETHERNET, parse_packet

logger = get_logger(__name__, "harness.log")

Connection = List[bytes]
TrafficSource = Union[Sequence[Connection], Callable[[], Iterable[Connection]]]

_MODEL_NAME = regex.compile(r"[A-Za-z_][A-Za-z0-9_]*")


# programs

def _literal(text: str) -> str:
  "Pattern text matching text literally, safe inside a quoted REGEX declaration"

  return regex.escape(text).replace('"', "\\x22")

def _alternation(items: Iterable[str]) -> str:
  return "|".join(_literal(item) for item in items)

def _require(items: Sequence[str], what: str) -> List[str]:
  items = [item for item in items if item]
  if not items:
    raise ValueError(f"need at least one {what}")
  return items

def scenario_sni_filter(forbidden_domains: Sequence[str], resets: int = 1) -> str:
  "Resets TLS connections on port 443 whose ClientHello names a forbidden server"

  domains = _require(forbidden_domains, "forbidden domain")
  return f"""\
# SNI filtering: reset TLS handshakes that name a forbidden server
REGEX sni = "(?s)^[\\x16\\x17]\\x03[\\x00-\\x09].*(?:{_alternation(domains)})"
process:
COPY false -> reg:b:0
if field:tcp.dst == 443: COPY true -> reg:b:0
if field:tcp.src == 443: COPY true -> reg:b:0
COPY false -> reg:b:1
if REGEX sni: COPY true -> reg:b:1
if reg:b:0 AND reg:b:1: RETURN RESET({resets})
"""

GFW_POPCOUNT_LOW = 3.4
GFW_POPCOUNT_HIGH = 4.6
GFW_PRINTABLE_PREFIX = 6
GFW_PRINTABLE_RUN = 20

def scenario_gfw_fully_encrypted() -> str:
  """
  Blocks traffic that looks fully encrypted. The first non-empty payload the
  initiator sends is judged once; the connection is exempted when any of
  these holds and condemned otherwise:

    average set bits per byte below 3.4 or above 4.6
    the first 6 bytes are printable
    more than half of the bytes are printable
    20 or more printable bytes in a row
    the payload starts like TLS or HTTP
  """

  return f"""\
# Fully encrypted traffic: exempt anything that does not look random
REGEX plain = "^(?:[\\x16\\x17]\\x03[\\x00-\\x09]|GET |PUT |POST |HEAD |HTTP)"
process:
if field:payload.len == 0: RETURN accept
if field:direction != 0: RETURN accept
COPY field:payload.popcount -> reg:f64:0
DIV reg:f64:0 , field:payload.len -> reg:f64:0
if reg:f64:0 < {GFW_POPCOUNT_LOW}: RETURN ALLOW_ALL
if reg:f64:0 > {GFW_POPCOUNT_HIGH}: RETURN ALLOW_ALL
if field:payload.printable_prefix >= {GFW_PRINTABLE_PREFIX}: RETURN ALLOW_ALL
MUL field:payload.printable , 2 -> reg:u64:0
if reg:u64:0 > field:payload.len: RETURN ALLOW_ALL
if field:payload.printable_run >= {GFW_PRINTABLE_RUN}: RETURN ALLOW_ALL
if REGEX plain: RETURN ALLOW_ALL
RETURN DROP_ALL
"""

ENTROPY_MIN_LENGTH = 160
ENTROPY_MAX_LENGTH = 700

def scenario_shadowsocks_entropy(min_length: int = ENTROPY_MIN_LENGTH, max_length: int = ENTROPY_MAX_LENGTH) -> str:
  """
  Flags connections whose first initiator payload has a length inside
  [min_length, max_length] and looks random: average set bits per byte
  within [3.4, 4.6] and no more than half of the bytes printable. Flagged
  connections are condemned; every other connection is exempted after its
  first payload.
  """

  if not 1 < min_length <= max_length:
    raise ValueError(f"need 1 < min_length <= max_length, got {min_length} and {max_length}")
  return f"""\
# Probe trigger: random-looking first payload within a length window
process:
if field:payload.len == 0: RETURN accept
if field:direction != 0: RETURN accept
if field:payload.len < {min_length}: RETURN ALLOW_ALL
if field:payload.len > {max_length}: RETURN ALLOW_ALL
COPY field:payload.popcount -> reg:f64:0
DIV reg:f64:0 , field:payload.len -> reg:f64:0
if reg:f64:0 < {GFW_POPCOUNT_LOW}: RETURN ALLOW_ALL
if reg:f64:0 > {GFW_POPCOUNT_HIGH}: RETURN ALLOW_ALL
MUL field:payload.printable , 2 -> reg:u64:0
if reg:u64:0 > field:payload.len: RETURN ALLOW_ALL
RETURN DROP_ALL
"""

def scenario_wireguard() -> str:
  "Drops every UDP datagram that starts with a WireGuard message header"

  return """\
# WireGuard: message type 1-4 followed by three reserved zero bytes
REGEX wireguard = "^[\\x01-\\x04]\\x00\\x00"
process:
COPY false -> reg:b:0
if field:udp.len > 8: COPY true -> reg:b:0
COPY false -> reg:b:1
if REGEX wireguard: COPY true -> reg:b:1
if reg:b:0 AND reg:b:1: RETURN DROP
"""

def scenario_packet_count(n: int) -> str:
  "Drops every packet of a connection after its first n"

  if n < 1:
    raise ValueError(f"packet limit must be at least 1, got {n}")
  return f"""\
# Drop connections longer than {n} packets
COPY 0 reg:u32:0
process:
if reg:u32:0 GEQ {n}: RETURN DROP
INC reg:u32:0
"""

def scenario_ml_classifier(model_name: str, k: int, threshold: float) -> str:
  """
  Feeds the first k non-empty payload lengths of a connection to a model and
  condemns the connection when output 0 exceeds threshold.
  """

  if k < 1:
    raise ValueError(f"need at least one feature, got k={k}")
  if not _MODEL_NAME.fullmatch(model_name):
    raise ValueError(f"bad model name {model_name!r}")
  features = "\n".join(
    f"if reg:u32:0 == {i}: COPY field:payload.len -> model:{model_name}:in:{i}" for i in range(k)
  )
  return f"""\
# Classify connections by their first {k} payload lengths
process:
if field:payload.len == 0: RETURN accept
{features}
INC reg:u32:0
if reg:u32:0 != {k}: RETURN accept
MODEL {model_name}
if model:{model_name}:out:0 > {float(threshold)!r}: RETURN DROP_ALL
"""

def scenario_http_keyword(words: Sequence[str], action: str = "reset") -> str:
  "Resets (or drops) HTTP requests to port 80 whose request line contains a keyword"

  words = _require(words, "keyword")
  verdicts = {"reset": "RESET(1)", "drop": "DROP"}
  if action.lower() not in verdicts:
    raise ValueError(f"keyword action must be reset or drop, not {action!r}")
  return f"""\
# HTTP keyword filtering
REGEX keyword = "^(?:GET|POST|HEAD|PUT) [^\\r\\n]*(?:{_alternation(words)})"
process:
COPY false -> reg:b:0
if field:tcp.dst == 80: COPY true -> reg:b:0
COPY false -> reg:b:1
if REGEX keyword: COPY true -> reg:b:1
if reg:b:0 AND reg:b:1: RETURN {verdicts[action.lower()]}
"""

def _wire_name_pattern(domain: str) -> str:
  labels = [label for label in domain.strip(".").split(".") if label]
  return "".join(f"\\x{len(label):02x}" + _literal(label) for label in labels) + "\\x00"

def scenario_dns_drop(domains: Sequence[str]) -> str:
  "Drops DNS queries to port 53 whose question is exactly a forbidden domain"

  domains = _require(domains, "forbidden domain")
  names = "|".join(_wire_name_pattern(domain) for domain in domains)
  return f"""\
# DNS filtering: drop queries for forbidden names
REGEX forbidden = "(?s)^.{{12}}(?:{names})"
process:
COPY false -> reg:b:0
if field:udp.dst == 53: COPY true -> reg:b:0
COPY false -> reg:b:1
if REGEX forbidden: COPY true -> reg:b:1
if reg:b:0 AND reg:b:1: RETURN DROP
"""


PROGRAM_GENERATORS: Dict[str, Callable[..., str]] = {
  "sni": scenario_sni_filter,
  "gfw": scenario_gfw_fully_encrypted,
  "shadowsocks_entropy": scenario_shadowsocks_entropy,
  "wireguard": scenario_wireguard,
  "packet_count": scenario_packet_count,
  "ml_classifier": scenario_ml_classifier,
  "http_keyword": scenario_http_keyword,
  "dns_drop": scenario_dns_drop,
}


# traffic

def tls_traffic(connections: int, seed: int, allowed: Sequence[str], forbidden: Sequence[str]):
  allowed, forbidden = _require(allowed, "allowed domain"), _require(forbidden, "forbidden domain")

  def make(domains):
    return lambda: (builders.tls_flow(domains[i % len(domains)], i, seed) for i in range(connections))
  return make(allowed), make(forbidden)

def _path_words(rng: random.Random, vocabulary: Sequence[str], count: int) -> List[str]:
  return [rng.choice(vocabulary) for _ in range(count)]

def http_traffic(connections: int, seed: int, vocabulary: Sequence[str], forbidden: Sequence[str],
                 words_per_path: int = 3):
  """
  GET requests with hyphenated word paths. Allowed paths use only vocabulary
  words that contain no forbidden word; forbidden paths get one forbidden
  word at a random position.
  """

  forbidden = _require(forbidden, "forbidden word")
  clean = [word for word in vocabulary if not any(bad in word for bad in forbidden)]
  clean = _require(clean, "vocabulary word free of forbidden words")

  def allowed_flows():
    rng = random.Random(f"{seed}:allowed")
    for i in range(connections):
      yield builders.http_flow(_path_words(rng, clean, words_per_path), i, seed)

  def forbidden_flows():
    rng = random.Random(f"{seed}:forbidden")
    for i in range(connections):
      words = _path_words(rng, clean, words_per_path - 1)
      words.insert(rng.randrange(len(words) + 1), rng.choice(forbidden))
      yield builders.http_flow(words, i, seed)
  return allowed_flows, forbidden_flows

def dns_traffic(connections: int, seed: int, allowed: Sequence[str], forbidden: Sequence[str],
                qtypes: Sequence[str] = ("A", "AAAA")):
  allowed, forbidden = _require(allowed, "allowed domain"), _require(forbidden, "forbidden domain")

  def make(domains):
    return lambda: (
      builders.dns_flow(domains[i % len(domains)], i, seed, qtypes[(i // len(domains)) % len(qtypes)])
      for i in range(connections)
    )
  return make(allowed), make(forbidden)

def encrypted_traffic(connections: int, seed: int, packets: int = 3, length: int = 400):
  "Printable flows are allowed; random-byte flows are forbidden"

  def allowed_flows():
    return (builders.printable_flow(i, seed, packets, length) for i in range(connections))

  def forbidden_flows():
    return (builders.random_flow(i, seed, packets, length) for i in range(connections))
  return allowed_flows, forbidden_flows

def entropy_traffic(connections: int, seed: int, min_length: int = ENTROPY_MIN_LENGTH,
                  max_length: int = ENTROPY_MAX_LENGTH, packets: int = 3):
  """
  Forbidden flows open with random bytes of a length inside the window.
  Allowed flows rotate between random openings shorter than the window,
  random openings longer than it and printable openings inside it.
  """

  if not 1 < min_length <= max_length:
    raise ValueError(f"need 1 < min_length <= max_length, got {min_length} and {max_length}")

  def allowed_flows():
    rng = random.Random(f"{seed}:allowed")
    for i in range(connections):
      kind = i % 3
      if kind == 0:
        length = rng.randint(1, min_length - 1)
      elif kind == 1:
        length = rng.randint(max_length + 1, 2 * max_length)
      else:
        length = rng.randint(min_length, max_length)
      yield builders.opening_payload_flow(length, i, seed, printable = kind == 2, packets = packets)

  def forbidden_flows():
    rng = random.Random(f"{seed}:forbidden")
    for i in range(connections):
      yield builders.opening_payload_flow(rng.randint(min_length, max_length), i, seed, packets = packets)
  return allowed_flows, forbidden_flows

def wireguard_traffic(connections: int, seed: int, transport_packets: int = 2):
  "WireGuard sessions are forbidden; other opaque UDP to the same port is allowed"

  def allowed_flows():
    return (builders.opaque_udp_flow(i, seed, transport_packets + 1) for i in range(connections))

  def forbidden_flows():
    return (builders.wireguard_flow(i, seed, transport_packets) for i in range(connections))
  return allowed_flows, forbidden_flows

def packet_count_traffic(connections: int, seed: int, limit: int, extra: int = 5):
  "Flows of at most `limit` packets are allowed; longer ones are forbidden"

  def allowed_flows():
    rng = random.Random(f"{seed}:allowed")
    return (builders.counted_flow(rng.randint(1, limit), i, seed) for i in range(connections))

  def forbidden_flows():
    rng = random.Random(f"{seed}:forbidden")
    return (builders.counted_flow(limit + rng.randint(1, extra), i, seed) for i in range(connections))
  return allowed_flows, forbidden_flows

def length_traffic(connections: int, seed: int, max_length: int = 200):
  """
  Two-packet flows: allowed when the first payload is no longer than the
  second, forbidden otherwise. Matches an affine classifier w=[1,-1], b=0.
  """

  def allowed_flows():
    rng = random.Random(f"{seed}:allowed")
    for i in range(connections):
      first = rng.randint(1, max_length)
      yield builders.length_flow([first, rng.randint(first, max_length)], i, seed)

  def forbidden_flows():
    rng = random.Random(f"{seed}:forbidden")
    for i in range(connections):
      first = rng.randint(2, max_length)
      yield builders.length_flow([first, rng.randint(1, first - 1)], i, seed)
  return allowed_flows, forbidden_flows


TRAFFIC_GENERATORS: Dict[str, Callable[..., Tuple[Callable, Callable]]] = {
  "tls": tls_traffic,
  "http": http_traffic,
  "dns": dns_traffic,
  "encrypted": encrypted_traffic,
  "entropy": entropy_traffic,
  "wireguard": wireguard_traffic,
  "packet_count": packet_count_traffic,
  "lengths": length_traffic,
}


def connections_from_capture(path: str) -> List[Connection]:
  """
  Splits a capture into connections by their direction-independent key, in
  order of first appearance. Frames without TCP/UDP are skipped.
  """

  grouped: "OrderedDict[Any, Connection]" = OrderedDict()
  for timestamp, frame, link_type in read_capture(path):
    if link_type != LINKTYPE_ETHERNET:
      raise BadConfig(f"{path}: experiments replay Ethernet captures")
    try:
      packet = parse_packet(frame, link_type, timestamp)
    except PacketError:
      continue
    if packet.l4 is None:
      continue
    grouped.setdefault(connection_key(packet), []).append(frame)
  return list(grouped.values())


# experiments

@dataclass
class Scenario:
  name: str
  program: str
  allowed: TrafficSource
  forbidden: TrafficSource
  expected_action: ActionKind = ActionKind.DROP
  models: Dict[str, str] = field(default_factory = dict)
  description: str = ""


@dataclass
class ConnectionOutcome:
  verdicts: List[Verdict]
  forwarded: bool
  blocked: bool

  @property
  def actions(self) -> List[ActionKind]:
    return [verdict.action.kind for verdict in self.verdicts]


@dataclass
class ExperimentReport:
  scenario: str
  allowed_total: int = 0
  allowed_succeeded: int = 0
  forbidden_total: int = 0
  forbidden_blocked: int = 0
  forbidden_expected: int = 0
  events: int = 0

  @property
  def allowed_rate(self) -> Optional[float]:
    return self.allowed_succeeded / self.allowed_total if self.allowed_total else None

  @property
  def blocked_rate(self) -> Optional[float]:
    return self.forbidden_blocked / self.forbidden_total if self.forbidden_total else None

  @property
  def accuracy(self) -> float:
    "Mean of the two rates; a class with no connections is left out"

    rates = [rate for rate in (self.allowed_rate, self.blocked_rate) if rate is not None]
    return sum(rates) / len(rates) if rates else 0.0

  def to_lines(self) -> List[str]:
    return [
      f"scenario={self.scenario}",
      f"allowed_total={self.allowed_total}",
      f"allowed_succeeded={self.allowed_succeeded}",
      f"forbidden_total={self.forbidden_total}",
      f"forbidden_blocked={self.forbidden_blocked}",
      f"forbidden_expected_action={self.forbidden_expected}",
      f"events={self.events}",
      f"accuracy={self.accuracy:.6f}",
    ]


def _connections(source: TrafficSource) -> Iterable[Connection]:
  return source() if callable(source) else source

def fresh_engine(scenario: Scenario, config: Optional[CensorConfig] = None) -> Engine:
  config = config or CensorConfig()
  store = ModelStore(config.model_runtime.budget_ms / 1000.0)
  for name, path in scenario.models.items():
    store.load(name, path)
  program = parse(scenario.program, store.shapes())
  return Engine(config, program = program, model_store = store, event_log = EventLog())

def _condemned(engine: Engine, verdicts: List[Verdict]) -> bool:
  for verdict in verdicts:
    packet = verdict.packet
    if packet is None or packet.l4 is None:
      continue
    state = engine.flows.get(connection_key(packet))
    if state is not None and state.verdict_override is not None:
      return state.verdict_override.kind == OverrideKind.CONDEMNED
  return False

def replay_connection(engine: Engine, frames: Connection, start: float = 0.0,
                      step: float = 0.001) -> ConnectionOutcome:
  verdicts = [
    engine.process_packet(frame, LINKTYPE_ETHERNET, start + i * step) for i, frame in enumerate(frames)
  ]
  forwarded = all(verdict.forwards for verdict in verdicts)
  blocked = any(verdict.action.blocks for verdict in verdicts) or _condemned(engine, verdicts)
  return ConnectionOutcome(verdicts, forwarded, blocked)

def run_experiment(scenario: Scenario, engine_config: Optional[CensorConfig] = None,
                   progress: bool = False) -> ExperimentReport:
  """
  Replays the scenario's allowed and forbidden traffic, each class through
  a fresh engine, and scores the result. Engine errors propagate.
  """

  report = ExperimentReport(scenario.name)
  for label in ("allowed", "forbidden"):
    engine = fresh_engine(scenario, engine_config)
    source = scenario.allowed if label == "allowed" else scenario.forbidden
    clock = 0.0
    connections = tqdm(_connections(source), desc = f"{scenario.name} {label}", unit = "conn",
                       disable = not progress)
    for frames in connections:
      outcome = replay_connection(engine, frames, clock)
      clock += len(frames) * 0.001 + 0.01
      if label == "allowed":
        report.allowed_total += 1
        report.allowed_succeeded += outcome.forwarded
      else:
        report.forbidden_total += 1
        report.forbidden_blocked += outcome.blocked
        report.forbidden_expected += scenario.expected_action in outcome.actions
    report.events += len(engine.events)
  logger.info(f"Experiment {scenario.name}: {' '.join(report.to_lines()[1:])}")
  return report


# manifests

class _Manifest(BaseModel):
  model_config = ConfigDict(extra = "forbid")


class ProgramSpec(_Manifest):
  path: Optional[str] = None
  generator: Optional[str] = None
  params: Dict[str, Any] = {}

  @model_validator(mode = "after")
  def one_source(self) -> "ProgramSpec":
    if (self.path is None) == (self.generator is None):
      raise ValueError("program needs exactly one of path or generator")
    if self.generator is not None and self.generator not in PROGRAM_GENERATORS:
      raise ValueError(f"unknown program generator {self.generator!r}: expected one of {sorted(PROGRAM_GENERATORS)}")
    return self


class TrafficSpec(_Manifest):
  generator: Optional[str] = None
  params: Dict[str, Any] = {}
  allowed_pcap: Optional[str] = None
  forbidden_pcap: Optional[str] = None

  @model_validator(mode = "after")
  def one_source(self) -> "TrafficSpec":
    captures = self.allowed_pcap is not None or self.forbidden_pcap is not None
    if captures == (self.generator is not None):
      raise ValueError("traffic needs either a generator or allowed_pcap/forbidden_pcap")
    if captures and (self.allowed_pcap is None or self.forbidden_pcap is None):
      raise ValueError("traffic from captures needs both allowed_pcap and forbidden_pcap")
    if self.generator is not None and self.generator not in TRAFFIC_GENERATORS:
      raise ValueError(f"unknown traffic generator {self.generator!r}: expected one of {sorted(TRAFFIC_GENERATORS)}")
    return self


class ModelSpec(_Manifest):
  name: str
  path: str


class ScenarioManifest(_Manifest):
  name: str
  description: str = ""
  seed: int = 0
  connections: int = Field(100, ge = 1)
  expected_action: ActionKind = ActionKind.DROP
  program: ProgramSpec
  traffic: TrafficSpec
  models: List[ModelSpec] = []


def _resolve(base_dir: str, path: str) -> str:
  return path if os.path.isabs(path) else os.path.join(base_dir, path)

def scenario_from_manifest(manifest: ScenarioManifest, base_dir: str = "") -> Scenario:
  spec = manifest.program
  try:
    if spec.path is not None:
      program = read_text_file(_resolve(base_dir, spec.path))
    else:
      program = PROGRAM_GENERATORS[spec.generator](**spec.params)
  except OSError as e:
    raise BadConfig(f"cannot read program: {e}") from None
  except (TypeError, ValueError) as e:
    raise BadConfig(f"program generator {spec.generator}: {e}") from None

  traffic = manifest.traffic
  if traffic.generator is not None:
    try:
      allowed, forbidden = TRAFFIC_GENERATORS[traffic.generator](manifest.connections, manifest.seed, **traffic.params)
    except (TypeError, ValueError) as e:
      raise BadConfig(f"traffic generator {traffic.generator}: {e}") from None
  else:
    allowed_path = _resolve(base_dir, traffic.allowed_pcap)
    forbidden_path = _resolve(base_dir, traffic.forbidden_pcap)
    allowed = lambda: connections_from_capture(allowed_path)
    forbidden = lambda: connections_from_capture(forbidden_path)

  return Scenario(
    name = manifest.name,
    program = program,
    allowed = allowed,
    forbidden = forbidden,
    expected_action = manifest.expected_action,
    models = {model.name: _resolve(base_dir, model.path) for model in manifest.models},
    description = manifest.description,
  )

def load_scenario(path: str) -> Scenario:
  """
  Reads a scenario manifest. Relative paths inside it are resolved against
  the manifest's directory.

  Raises:
    BadConfig: unreadable or invalid manifest.
  """

  try:
    data = read_toml_file(path)
    manifest = ScenarioManifest.model_validate(data)
  except OSError as e:
    raise BadConfig(f"cannot read {path}: {e}") from None
  except ValidationError as e:
    raise BadConfig(f"invalid scenario {path}: {e}") from None
  except ValueError as e:
    raise BadConfig(f"{path} is not valid TOML: {e}") from None
  return scenario_from_manifest(manifest, os.path.dirname(os.path.abspath(path)))

def run_manifest(path: str, engine_config: Optional[CensorConfig] = None, progress: bool = False) -> ExperimentReport:
  return run_experiment(load_scenario(path), engine_config, progress)
