"""
The packet pipeline and its operating modes.

Each frame runs through the stages in order, and the first stage that
yields an action decides the verdict:

  parse L2 -> MAC lists -> parse L3 -> IP/subnet lists -> parse L4
  -> service exemptions -> port/service/connection lists -> flow lookup
  -> connection override -> censor program

Modes:
  pcap      replays a capture; interfering actions are logged, never applied.
  wire-sim  forwards frames between two in-memory endpoints and applies actions.
  tap       pluggable packet source with per-packet verdicts (netfilter queue).
"""

import logging
import os
import queue
import socket
import struct
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter, deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, Iterator, List, Optional, Set, Tuple

import dpkt
from strenum import StrEnum
from tqdm import tqdm

from actions import ACCEPT, DROP, Action, ActionKind, Escalation
from censorlang import PacketView, Program, execute, load_program, new_env
from common_functions import format_ip, get_logger, pack_ip
from config import CensorConfig, load_config
from error_handler import (
  BadCapture,
  BadConfig,
  BadVersion,
  CensorLabError,
  EngineError,
  NotTcp,
  PacketError,
  TableFull,
  Truncated,
)
from filters import FilterSet, IdentifierClass, ListKind
from flows import PROTO_NUMBERS, ConnectionKey, ConnectionState, ConnectionTable, HostStore, key_from_tuple
from models import ModelStore
from packet import (
  LINKTYPE_ETHERNET,
  LINKTYPE_RAW,
  PROTO_TCP,
  TCP_ACK,
  TCP_RST,
  ArpInfo,
  Direction,
  ParsedPacket,
  parse_ethernet,
  parse_ip,
  payload_stats,
  transport_checksum,
  transport_of,
)
from scheduler import DelayScheduler

logger = get_logger(__name__, "engine.log")

RST_TTL = 64
PCAP_RAW_LINKTYPES = (LINKTYPE_RAW, 12, 14)


class VerdictSource(StrEnum):
  L2_LIST = "l2-list"
  L3_LIST = "l3-list"
  L4_LIST = "l4-list"
  CONNECTION_OVERRIDE = "connection-override"
  PROGRAM = "program"
  DEFAULT = "default"


# event log

def _quote(text: str) -> str:
  return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ") + '"'


@dataclass(frozen = True)
class EventRecord:
  timestamp: float
  conn: str
  stage: str
  action: str
  event: str = "verdict"
  fault: Optional[str] = None
  wall: float = 0.0

  def to_line(self, include_wall: bool = True) -> str:
    parts = [
      f"ts={self.timestamp:.6f}",
      f"event={self.event}",
      f"conn={self.conn}",
      f"stage={self.stage}",
      f"action={self.action}",
    ]
    if self.fault is not None:
      parts.append(f"fault={_quote(self.fault)}")
    if include_wall:
      parts.append(f"wall={self.wall:.6f}")
    return " ".join(parts)


class EventLog:
  """
  Censor events, one key=value line per record in a stable field order. Kept
  in memory and, when a path is given, written through the censorlab.events
  logger.
  """

  def __init__(self, path: Optional[str] = None):
    self.records: List[EventRecord] = []
    self.path = path
    self._lock = threading.Lock()
    self._logger = None
    if path:
      self._logger = _events_logger(path)

  def append(self, record: EventRecord):
    with self._lock:
      self.records.append(record)
    if self._logger is not None:
      self._logger.info(record.to_line())

  def lines(self, include_wall: bool = False) -> List[str]:
    with self._lock:
      return [record.to_line(include_wall) for record in self.records]

  def clear(self):
    with self._lock:
      self.records.clear()

  def __len__(self) -> int:
    return len(self.records)

  def __iter__(self) -> Iterator[EventRecord]:
    return iter(list(self.records))


def _events_logger(path: str) -> logging.Logger:
  events = logging.getLogger("censorlab.events")
  events.setLevel(logging.INFO)
  events.propagate = False
  target = os.path.abspath(path)
  if not any(getattr(handler, "baseFilename", None) == target for handler in events.handlers):
    directory = os.path.dirname(target)
    if directory:
      os.makedirs(directory, exist_ok = True)
    handler = logging.FileHandler(target)
    handler.setFormatter(logging.Formatter("%(message)s"))
    events.addHandler(handler)
  return events


# verdicts

@dataclass
class Verdict:
  action: Action
  source: VerdictSource
  injected_frames: List[bytes] = field(default_factory = list)
  log_events: List[EventRecord] = field(default_factory = list)
  packet: Optional[ParsedPacket] = field(default = None, repr = False)
  rst_to_receiver: List[bytes] = field(default_factory = list, repr = False)
  rst_to_sender: List[bytes] = field(default_factory = list, repr = False)

  @property
  def forwards(self) -> bool:
    return self.action.kind in (ActionKind.ACCEPT, ActionKind.NONE)


def _rst_frame(packet: ParsedPacket, reverse: bool, seq: int, ack: int) -> bytes:
  ip, l4 = packet.ip, packet.l4
  src, dst = (ip.dst_ip, ip.src_ip) if reverse else (ip.src_ip, ip.dst_ip)
  sport, dport = (l4.dst_port, l4.src_port) if reverse else (l4.src_port, l4.dst_port)
  tcp = dpkt.tcp.TCP(sport = sport, dport = dport, seq = seq, ack = ack, flags = TCP_RST | TCP_ACK, win = 0)
  tcp.sum = 0
  tcp.sum = transport_checksum(src, dst, PROTO_TCP, bytes(tcp))

  if ip.version == 4:
    datagram = dpkt.ip.IP(src = src, dst = dst, p = PROTO_TCP, ttl = RST_TTL, data = tcp)
    datagram.len = len(datagram)
  else:
    datagram = dpkt.ip6.IP6(src = src, dst = dst, nxt = PROTO_TCP, hlim = RST_TTL, data = tcp, plen = len(tcp))
    datagram.extension_hdrs = {}
  if packet.eth is None:
    return bytes(datagram)
  eth = packet.eth
  src_mac, dst_mac = (eth.dst_mac, eth.src_mac) if reverse else (eth.src_mac, eth.dst_mac)
  return bytes(dpkt.ethernet.Ethernet(src = src_mac, dst = dst_mac, type = eth.ethertype, data = datagram))

def make_rst_pair(packet: ParsedPacket, n: int) -> Tuple[List[bytes], List[bytes]]:
  """
  Builds n RST|ACK frames toward the packet's receiver and n toward its
  sender, mirrored from the triggering frame with valid checksums.

  Raises:
    NotTcp: the packet has no TCP segment.
  """

  if packet.ip is None or packet.l4 is None or not packet.l4.is_tcp:
    raise NotTcp("RST needs a TCP packet")
  l4 = packet.l4
  next_seq = (l4.seq + len(l4.payload)) & 0xFFFFFFFF
  to_receiver = _rst_frame(packet, False, next_seq, l4.ack)
  to_sender = _rst_frame(packet, True, l4.ack, next_seq)
  return [to_receiver] * n, [to_sender] * n

def make_rst_frames(packet: ParsedPacket, n: int) -> List[bytes]:
  "n frames toward the receiver followed by n toward the sender"

  to_receiver, to_sender = make_rst_pair(packet, n)
  return to_receiver + to_sender


# engine

def build_filters(config: CensorConfig) -> FilterSet:
  filters = FilterSet()
  for kind, lists in ((ListKind.ALLOW, config.allowlist), (ListKind.BLOCK, config.blocklist)):
    for name, section in lists.items():
      filters.configure(kind, IdentifierClass(name), section.action, section.entries)
  return filters

def build_models(config: CensorConfig) -> ModelStore:
  store = ModelStore(config.model_runtime.budget_ms / 1000.0)
  for entry in config.models:
    store.load(entry.name, config.resolve(entry.path))
  return store

def build_program(config: CensorConfig, store: ModelStore) -> Optional[Program]:
  if not config.program.path:
    return None
  return load_program(config.resolve(config.program.path), store.shapes())


class Engine:
  """
  Owns lists, flows, hosts, models and the program. Packet processing and
  control mutations both run under the engine lock; mutations submitted
  from other threads wait in the control queue until a packet boundary or
  the idle control loop applies them.
  """

  def __init__(self, config: Optional[CensorConfig] = None, program: Optional[Program] = None,
               filters: Optional[FilterSet] = None, model_store: Optional[ModelStore] = None,
               event_log: Optional[EventLog] = None, config_path: Optional[str] = None):
    self.config = config or CensorConfig()
    self.config_path = config_path
    self.filters = filters if filters is not None else build_filters(self.config)
    self.models = model_store if model_store is not None else ModelStore(self.config.model_runtime.budget_ms / 1000.0)
    self.program = program
    self.flows = ConnectionTable(self.config.engine.idle_timeout, self.config.engine.max_connections)
    self.hosts = HostStore()
    # connections a program condemned with DROP_ALL; they outlive flow eviction
    self.condemned: Set[ConnectionKey] = set()
    event_path = self.config.resolve(self.config.engine.event_log)
    self.events = event_log if event_log is not None else EventLog(event_path)
    self.counters: Counter = Counter()
    self.running = True
    self.stopped = threading.Event()
    self._lock = threading.RLock()
    self._control: "queue.Queue[Tuple[Callable, tuple, Future]]" = queue.Queue()
    self._last_eviction: Optional[float] = None

  @classmethod
  def from_config(cls, config_path: str, event_log: Optional[EventLog] = None) -> "Engine":
    config = load_config(config_path)
    try:
      models = build_models(config)
      program = build_program(config, models)
    except CensorLabError as e:
      raise BadConfig(f"{config_path}: {e}") from None
    return cls(config, program = program, model_store = models, event_log = event_log, config_path = config_path)

  # control plane

  def submit(self, fn: Callable, *args) -> Future:
    future: Future = Future()
    self._control.put((fn, args, future))
    return future

  def call(self, fn: Callable, *args, timeout: Optional[float] = 5.0) -> Any:
    """
    Runs fn at the next packet boundary and returns its result. On timeout
    the queued call is withdrawn, so a TimeoutError means fn never ran. A
    call that already started is waited for instead.
    """

    future = self.submit(fn, *args)
    try:
      return future.result(timeout = timeout)
    except TimeoutError:
      if future.cancel():
        logger.warning(f"Withdrew {getattr(fn, '__name__', fn)} after {timeout}s in the control queue")
        raise
    return future.result()

  def drain_control(self) -> int:
    applied = 0
    while True:
      try:
        fn, args, future = self._control.get_nowait()
      except queue.Empty:
        return applied
      if self._apply(fn, args, future):
        applied += 1

  def _apply(self, fn: Callable, args: tuple, future: Future) -> bool:
    if not future.set_running_or_notify_cancel():
      return False
    try:
      with self._lock:
        result = fn(*args)
    except Exception as e:
      future.set_exception(e)
    else:
      future.set_result(result)
    return True

  def control_loop(self, poll_interval: float = 0.05):
    "Applies control mutations while no packets arrive; returns after shutdown"

    while self.running:
      try:
        fn, args, future = self._control.get(timeout = poll_interval)
      except queue.Empty:
        continue
      self._apply(fn, args, future)
    self.drain_control()
    self.stopped.set()

  def shutdown(self):
    self.running = False
    logger.info("Shutdown requested")

  def reload(self):
    """
    Rebuilds lists, models and program from the config file and clears all
    connection and host state. On error nothing changes.
    """

    with self._lock:
      path = self.config_path
      try:
        config = load_config(path) if path else self.config
        filters = build_filters(config)
        models = build_models(config)
        program = build_program(config, models)
      except CensorLabError as e:
        logger.warning(f"Reload failed, keeping current state: {e}")
        raise BadConfig(f"reload failed: {e}") from None
      filters.exemptions = set(self.filters.exemptions)
      self.config = config
      self.filters = filters
      self.models = models
      self.program = program
      self.flows = ConnectionTable(config.engine.idle_timeout, config.engine.max_connections)
      self.hosts.clear()
      self.condemned.clear()
      self._last_eviction = None
      logger.info(f"Reloaded configuration from {path or 'memory'}")

  def load_program_file(self, path: str, language: str = "censorlang") -> Program:
    "Replaces the program and clears all connection state"

    if language.lower() != "censorlang":
      raise EngineError(f"language {language!r} is not supported; use censorlang")
    with self._lock:
      program = load_program(path, self.models.shapes())
      self.set_program(program)
      return program

  def set_program(self, program: Optional[Program]):
    with self._lock:
      self.program = program
      self.flows.clear()
      self.hosts.clear()
      self.condemned.clear()

  def exempt_service(self, ip: str, port: int, proto: int = PROTO_TCP):
    with self._lock:
      self.filters.exempt_service(proto, pack_ip(ip), port)

  def debug_dump(self, ip_a: str, ip_b: str, port_a: int, port_b: int, proto: str) -> Optional[Dict[str, Any]]:
    key = key_from_tuple(pack_ip(ip_a), pack_ip(ip_b), int(port_a), int(port_b), PROTO_NUMBERS[proto.lower()])
    with self._lock:
      state = self.flows.get(key)
      return state.snapshot() if state is not None else None

  def stats(self) -> Dict[str, int]:
    with self._lock:
      stats = dict(self.counters)
      stats["connections"] = len(self.flows)
      stats["hosts"] = len(self.hosts)
      stats["condemned"] = len(self.condemned)
      stats["models"] = len(self.models)
      return dict(sorted(stats.items()))

  # pipeline

  def process_packet(self, frame: bytes, link_type: int = LINKTYPE_ETHERNET, timestamp: float = 0.0,
                     iface_direction: Direction = Direction.UNKNOWN) -> Verdict:
    "Runs one frame through every stage; never raises"

    self.drain_control()
    with self._lock:
      try:
        verdict = self._process(frame, link_type, timestamp, iface_direction)
      except Exception as e:
        logger.error(f"Unexpected error processing packet at {timestamp:.6f}: {e}", exc_info = True)
        verdict = self._finish(ACCEPT, VerdictSource.DEFAULT, None, "-", timestamp, [f"internal error: {e}"])
      self.counters[f"action.{verdict.action.kind}"] += 1
      return verdict

  def _evict(self, now: float):
    if self._last_eviction is None:
      self._last_eviction = now
    elif now - self._last_eviction >= self.config.engine.eviction_interval:
      self.flows.evict_idle(now)
      self._last_eviction = now

  def _unparsed(self, error: PacketError, timestamp: float) -> Verdict:
    self.counters["unparsed"] += 1
    logger.info(f"Accepting unparsed frame at {timestamp:.6f}: {type(error).__name__}: {error}")
    return self._finish(ACCEPT, VerdictSource.DEFAULT, None, "-", timestamp, [f"{type(error).__name__}: {error}"])

  def _process(self, frame: bytes, link_type: int, timestamp: float, iface_direction: Direction) -> Verdict:
    self.counters["packets"] += 1
    self._evict(timestamp)

    eth = None
    try:
      if link_type == LINKTYPE_ETHERNET:
        eth = parse_ethernet(frame)
        self.counters["parsed_l2"] += 1
        hit = self.filters.evaluate_l2(eth)
        self.counters["l2_lists"] += 1
        if hit is not None:
          partial = ParsedPacket(ip = None, eth = eth, timestamp = timestamp, iface_direction = iface_direction)
          return self._finish(hit[0], VerdictSource.L2_LIST, partial, "-", timestamp)
        l3 = parse_ip(eth.payload, eth.ethertype)
      elif link_type in PCAP_RAW_LINKTYPES:
        if not frame:
          raise Truncated("empty raw IP packet")
        version = frame[0] >> 4
        if version not in (4, 6):
          raise BadVersion(f"raw IP version nibble {version}")
        l3 = parse_ip(frame, version)
      else:
        return self._finish(ACCEPT, VerdictSource.DEFAULT, None, "-", timestamp, [f"unsupported link type {link_type}"])
    except PacketError as e:
      return self._unparsed(e, timestamp)

    if isinstance(l3, ArpInfo):
      self.counters["arp"] += 1
      return Verdict(ACCEPT, VerdictSource.DEFAULT)

    self.counters["parsed_l3"] += 1
    packet = ParsedPacket(ip = l3, eth = eth, timestamp = timestamp, iface_direction = iface_direction,
                          link_type = LINKTYPE_ETHERNET if eth is not None else LINKTYPE_RAW)
    hit = self.filters.evaluate_l3(l3)
    self.counters["l3_lists"] += 1
    if hit is not None:
      return self._finish(hit[0], VerdictSource.L3_LIST, packet, "-", timestamp)

    try:
      l4 = transport_of(l3)
    except PacketError as e:
      return self._unparsed(e, timestamp)
    if l4 is None:
      self.counters["no_transport"] += 1
      return Verdict(ACCEPT, VerdictSource.DEFAULT, packet = packet)
    self.counters["parsed_l4"] += 1
    packet.l4 = l4
    packet.stats = payload_stats(l4.payload)

    if self.filters.is_exempt(packet):
      self.counters["exempt"] += 1
      return Verdict(ACCEPT, VerdictSource.L4_LIST, packet = packet)

    key = key_from_tuple(l3.src_ip, l3.dst_ip, l4.src_port, l4.dst_port, l3.next_proto)
    conn = key.describe()
    hit = self.filters.evaluate_l4(packet, key)
    self.counters["l4_lists"] += 1
    if hit is not None:
      return self._finish(hit[0], VerdictSource.L4_LIST, packet, conn, timestamp)
    if key in self.condemned:
      return self._finish(DROP, VerdictSource.L4_LIST, packet, conn, timestamp)

    try:
      state, is_new = self.flows.get_or_create(key, packet, self._env_factory)
    except TableFull as e:
      return self._finish(ACCEPT, VerdictSource.DEFAULT, packet, conn, timestamp, [str(e)])
    self.counters["flow"] += 1
    if is_new:
      self.counters["connections_created"] += 1

    override = state.verdict_override
    if override is not None:
      return self._finish(override.action, VerdictSource.CONNECTION_OVERRIDE, packet, conn, timestamp)

    if self.program is None:
      return Verdict(ACCEPT, VerdictSource.DEFAULT, packet = packet)
    if state.env is None:
      return self._finish(ACCEPT, VerdictSource.DEFAULT, packet, conn, timestamp,
                          [state.env_fault or "no program environment"])

    outcome = execute(state.env, self.program, PacketView(packet, state))
    self.counters["program"] += 1
    if outcome.escalation == Escalation.ALLOW_ALL:
      state.exempt(ACCEPT)
    elif outcome.escalation == Escalation.DROP_ALL:
      state.condemn(DROP)
      self.condemned.add(key)
    return self._finish(outcome.action, VerdictSource.PROGRAM, packet, conn, timestamp, list(outcome.faults))

  def _env_factory(self, state: ConnectionState):
    if self.program is None:
      return None
    try:
      return new_env(self.program, state, self.hosts, self.models)
    except CensorLabError as e:
      state.env_fault = str(e)
      logger.warning(f"No environment for {state.key.describe()}: {e}")
      return None

  def _finish(self, action: Action, source: VerdictSource, packet: Optional[ParsedPacket], conn: str,
              timestamp: float, faults: Optional[List[str]] = None) -> Verdict:
    faults = list(faults or [])
    verdict = Verdict(action, source, packet = packet)
    if action.kind == ActionKind.RESET:
      self._attach_rsts(verdict, faults)
    wall = time.time()
    for fault in faults:
      verdict.log_events.append(EventRecord(timestamp, conn, source, str(action), "fault", fault, wall))
    if action.kind != ActionKind.ACCEPT:
      verdict.log_events.append(EventRecord(timestamp, conn, source, str(action), "verdict", None, wall))
    for record in verdict.log_events:
      self.events.append(record)
    return verdict

  def _attach_rsts(self, verdict: Verdict, faults: List[str]):
    "Reset from a list stage before L4 parsing still needs the TCP header"

    packet = verdict.packet
    if packet is not None and packet.ip is not None and packet.l4 is None:
      try:
        packet.l4 = transport_of(packet.ip)
      except PacketError:
        packet.l4 = None
    try:
      if packet is None:
        raise NotTcp("RST needs a TCP packet")
      to_receiver, to_sender = make_rst_pair(packet, verdict.action.count)
    except NotTcp as e:
      to_receiver = to_sender = []
      faults.append(f"{e}; packet dropped without RST")
    verdict.rst_to_receiver = to_receiver
    verdict.rst_to_sender = to_sender
    verdict.injected_frames = to_receiver + to_sender


def process_packet(engine: Engine, frame_bytes: bytes, link_type: int = LINKTYPE_ETHERNET,
                   timestamp: float = 0.0, iface_direction: Direction = Direction.UNKNOWN) -> Verdict:
  return engine.process_packet(frame_bytes, link_type, timestamp, iface_direction)


# pcap mode

def _link_type(datalink: int) -> int:
  if datalink == LINKTYPE_ETHERNET:
    return LINKTYPE_ETHERNET
  if datalink in PCAP_RAW_LINKTYPES:
    return LINKTYPE_RAW
  raise BadCapture(f"unsupported capture link type {datalink}")

def read_capture(path: str) -> Iterator[Tuple[float, bytes, int]]:
  """
  Yields (timestamp, frame, link_type) from a PCAP or PCAPNG file.

  Raises:
    BadCapture: unreadable file, unknown format or unsupported link type.
  """

  try:
    f = open(path, "rb")
  except OSError as e:
    raise BadCapture(f"cannot open {path}: {e}") from None
  with f:
    try:
      reader = dpkt.pcap.Reader(f)
    except (ValueError, dpkt.NeedData, dpkt.UnpackError):
      f.seek(0)
      try:
        reader = dpkt.pcapng.Reader(f)
      except (ValueError, dpkt.NeedData, dpkt.UnpackError) as e:
        raise BadCapture(f"{path} is neither PCAP nor PCAPNG: {e}") from None
    link_type = _link_type(reader.datalink())
    try:
      for timestamp, frame in reader:
        yield float(timestamp), bytes(frame), link_type
    except (dpkt.NeedData, dpkt.UnpackError, struct.error) as e:
      raise BadCapture(f"{path} is truncated or corrupt: {e}") from None


@dataclass(order = True)
class _PendingDelay:
  release: float
  sequence: int
  origin: float = field(compare = False)
  conn: str = field(compare = False)
  action: str = field(compare = False)


def run_pcap(engine: Engine, path: str, time_emulation: bool = False, progress: bool = False,
             sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.monotonic) -> EventLog:
  """
  Replays a capture through the engine. Nothing is forwarded: the event log
  records what would have happened.

  A Delay(d) on packet P is logged when P is processed and again just
  before the first later packet whose timestamp exceeds P.ts + d (delays
  still pending at the end of the capture are logged after the last
  packet). With time_emulation, processing is paced to the recorded
  inter-arrival times and the release entries are emitted at their virtual
  release times.
  """

  frames = read_capture(path)
  pending: List[_PendingDelay] = []
  sequence = 0
  first_ts: Optional[float] = None
  start = clock()

  def wait_until(ts: float):
    if time_emulation and first_ts is not None:
      remaining = (ts - first_ts) - (clock() - start)
      if remaining > 0:
        sleep(remaining)

  def release_before(ts: Optional[float]):
    pending.sort()
    while pending and (ts is None or pending[0].release < ts):
      entry = pending.pop(0)
      wait_until(entry.release)
      engine.events.append(EventRecord(
        entry.release, entry.conn, VerdictSource.PROGRAM, entry.action, "delay-release", None, time.time()
      ))

  iterator = tqdm(frames, desc = os.path.basename(path), unit = "pkt", disable = not progress)
  for timestamp, frame, link_type in iterator:
    if not engine.running:
      break
    if first_ts is None:
      first_ts = timestamp
    release_before(timestamp)
    wait_until(timestamp)
    verdict = engine.process_packet(frame, link_type, timestamp)
    if verdict.action.kind == ActionKind.DELAY:
      conn = next((record.conn for record in verdict.log_events if record.event == "verdict"), "-")
      pending.append(_PendingDelay(timestamp + verdict.action.seconds, sequence, timestamp, conn, str(verdict.action)))
      sequence += 1
  if not engine.running:
    logger.info(f"Replay of {path} stopped by shutdown after {engine.counters['packets']} packets")
    return engine.events
  release_before(None)
  return engine.events


# wire-sim mode

class Endpoint:
  "An in-memory interface: frames sent into the censor and frames that came out"

  def __init__(self, name: str):
    self.name = name
    self.inbox: Deque[bytes] = deque()
    self.outbox: List[Tuple[float, bytes]] = []
    self._lock = threading.Lock()

  def send(self, frame: bytes):
    with self._lock:
      self.inbox.append(frame)

  def take(self) -> Optional[bytes]:
    with self._lock:
      return self.inbox.popleft() if self.inbox else None

  def deliver(self, frame: bytes, at: float):
    with self._lock:
      self.outbox.append((at, frame))

  def received(self) -> List[bytes]:
    with self._lock:
      return [frame for _, frame in self.outbox]

  def received_at(self) -> List[Tuple[float, bytes]]:
    with self._lock:
      return list(self.outbox)


class WireSimSession:
  """
  Forwards frames between two endpoints through the engine. Frames from A
  are recorded as egress and frames from B as ingress.

  Conservation holds at every quiescent point:
    delivered = ingested - dropped - pending_delays + injected
  """

  def __init__(self, engine: Engine, endpoint_a: Endpoint, endpoint_b: Endpoint,
               clock: Callable[[], float] = time.monotonic, threaded: bool = True):
    self.engine = engine
    self.a = endpoint_a
    self.b = endpoint_b
    self.clock = clock
    self.counters: Counter = Counter()
    self._lock = threading.Lock()
    self.scheduler = DelayScheduler(self._release, clock)
    self.threaded = threaded
    if threaded:
      self.scheduler.start()

  def _count(self, *names: str):
    with self._lock:
      for name in names:
        self.counters[name] += 1

  def _deliver(self, endpoint: Endpoint, frame: bytes, kind: str):
    endpoint.deliver(frame, self.clock())
    self._count("delivered", kind)

  def _release(self, item: Tuple[Endpoint, bytes]):
    endpoint, frame = item
    self._deliver(endpoint, frame, "released")

  def ingest(self, frame: bytes, from_a: bool) -> Verdict:
    source, target = (self.a, self.b) if from_a else (self.b, self.a)
    direction = Direction.EGRESS if from_a else Direction.INGRESS
    now = self.clock()
    self._count("ingested")
    verdict = self.engine.process_packet(frame, LINKTYPE_ETHERNET, now, direction)
    kind = verdict.action.kind
    if kind in (ActionKind.ACCEPT, ActionKind.NONE):
      self._deliver(target, frame, "forwarded")
    elif kind == ActionKind.DELAY:
      self._count("delayed")
      self.scheduler.submit((target, frame), now + verdict.action.seconds)
    else:
      self._count("dropped")
      for rst in verdict.rst_to_receiver:
        self._count("injected")
        self._deliver(target, rst, "injected_delivered")
      for rst in verdict.rst_to_sender:
        self._count("injected")
        self._deliver(source, rst, "injected_delivered")
    return verdict

  def pump(self) -> int:
    "Processes every queued frame on both endpoints; returns how many"

    processed = 0
    while True:
      moved = False
      for endpoint, from_a in ((self.a, True), (self.b, False)):
        frame = endpoint.take()
        if frame is not None:
          self.ingest(frame, from_a)
          processed += 1
          moved = True
      if not moved:
        break
    if not self.threaded:
      self.scheduler.drain_due(self.clock())
    return processed

  @property
  def pending_delays(self) -> int:
    return self.scheduler.pending

  def conserved(self) -> bool:
    with self._lock:
      counters = Counter(self.counters)
    expected = counters["ingested"] - counters["dropped"] - self.pending_delays + counters["injected"]
    return counters["delivered"] == expected

  def close(self, flush: bool = True) -> int:
    if self.threaded:
      return self.scheduler.stop(flush = flush)
    pending = self.scheduler.pending
    if flush:
      self.scheduler.drain_all()
    return pending


def run_wire_sim(engine: Engine, endpoint_a: Endpoint, endpoint_b: Endpoint, **kwargs) -> WireSimSession:
  return WireSimSession(engine, endpoint_a, endpoint_b, **kwargs)

def write_frames(path: str, frames: List[Tuple[float, bytes]], link_type: int = LINKTYPE_ETHERNET):
  with open(path, "wb") as f:
    writer = dpkt.pcap.Writer(f, linktype = link_type)
    for timestamp, frame in frames:
      writer.writepkt(frame, ts = timestamp)

def replay_wire_sim(engine: Engine, path: str, output_a: Optional[str] = None,
                    output_b: Optional[str] = None, progress: bool = False) -> WireSimSession:
  """
  Feeds a capture through a wire simulation. The first frame's source MAC
  decides side A; every frame from that MAC enters on A, the rest on B.
  Each side's output is written to a capture file when a path is given.
  Shutdown stops the feed; frames already queued are still flushed.
  """

  a, b = Endpoint("a"), Endpoint("b")
  session = WireSimSession(engine, a, b)
  side_a_mac = None
  try:
    for _, frame, link_type in tqdm(read_capture(path), desc = os.path.basename(path), unit = "pkt",
                                    disable = not progress):
      if not engine.running:
        logger.info(f"Wire simulation of {path} stopped by shutdown")
        break
      if link_type != LINKTYPE_ETHERNET:
        raise BadCapture("wire simulation needs an Ethernet capture")
      if side_a_mac is None:
        side_a_mac = frame[6:12]
      session.ingest(frame, frame[6:12] == side_a_mac)
  finally:
    session.close(flush = True)
  if output_a:
    write_frames(output_a, a.received_at())
  if output_b:
    write_frames(output_b, b.received_at())
  return session


# tap mode

class TapAdapter(ABC):
  """
  A packet source/sink that asks the engine for a verdict per packet and
  applies it: Accept forwards, Drop discards, Reset discards and injects
  RSTs, Delay discards and re-injects the packet later.
  """

  link_type = LINKTYPE_RAW

  def verdict_for(self, engine: Engine, payload: bytes, timestamp: Optional[float] = None) -> Verdict:
    return engine.process_packet(payload, self.link_type, time.time() if timestamp is None else timestamp)

  @abstractmethod
  def run(self, engine: Engine):
    ...

  @abstractmethod
  def close(self):
    ...


class NetfilterQueueTap(TapAdapter):
  "Tap on a netfilter queue; packets arrive as raw IP datagrams"

  def __init__(self, queue_num: int = 0, inject: bool = True):
    self.queue_num = queue_num
    self.inject = inject
    self._queue = None
    self._socket = None
    self.scheduler = DelayScheduler(self._send)

  def _send(self, datagram: bytes):
    if not self.inject:
      return
    if self._socket is None:
      self._socket = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW)
    version = datagram[0] >> 4
    if version != 4:
      logger.warning("Raw injection supports IPv4 only; frame discarded")
      return
    self._socket.sendto(datagram, (format_ip(datagram[16:20]), 0))

  def _callback(self, engine: Engine, pkt):
    verdict = self.verdict_for(engine, pkt.get_payload())
    kind = verdict.action.kind
    if kind in (ActionKind.ACCEPT, ActionKind.NONE):
      pkt.accept()
      return
    pkt.drop()
    if kind == ActionKind.RESET:
      for frame in verdict.injected_frames:
        self._send(frame)
    elif kind == ActionKind.DELAY:
      self.scheduler.submit(pkt.get_payload(), time.monotonic() + verdict.action.seconds)

  def run(self, engine: Engine):
    try:
      from netfilterqueue import NetfilterQueue
    except ImportError:
      raise EngineError("tap mode needs the NetfilterQueue package") from None
    self._queue = NetfilterQueue()
    self._queue.bind(self.queue_num, lambda pkt: self._callback(engine, pkt))
    self.scheduler.start()
    logger.info(f"Tap bound to netfilter queue {self.queue_num}")
    try:
      self._queue.run()
    finally:
      self.close()

  def close(self):
    if self._queue is not None:
      self._queue.unbind()
      self._queue = None
    self.scheduler.stop(flush = False)
    if self._socket is not None:
      self._socket.close()
      self._socket = None
