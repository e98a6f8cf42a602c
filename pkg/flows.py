"""
Connection aggregation: direction-independent keys, per-connection state,
per-host register files and idle eviction.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, Optional, Tuple

from strenum import StrEnum

from actions import Action
from common_functions import format_ip, get_logger
from error_handler import NoTransportLayer, TableFull
from packet import PROTO_TCP, PROTO_UDP, ParsedPacket

logger = get_logger(__name__, "flows.log")

DEFAULT_IDLE_TIMEOUT = 600.0

PROTO_NAMES = {PROTO_TCP: "tcp", PROTO_UDP: "udp"}
PROTO_NUMBERS = {name: number for number, name in PROTO_NAMES.items()}


class Role(StrEnum):
  INITIATOR = "initiator"
  RESPONDER = "responder"


class OverrideKind(StrEnum):
  EXEMPT = "exempt"
  CONDEMNED = "condemned"


@dataclass(frozen = True, slots = True)
class ConnectionKey:
  ip1: bytes
  ip2: bytes
  port1: int
  port2: int
  proto: int

  def describe(self) -> str:
    proto = PROTO_NAMES.get(self.proto, str(self.proto))
    return f"{format_ip(self.ip1)}:{self.port1}-{format_ip(self.ip2)}:{self.port2}/{proto}"


@dataclass(frozen = True, slots = True)
class VerdictOverride:
  kind: OverrideKind
  action: Action


def order_endpoints(src_ip: bytes, dst_ip: bytes, src_port: int, dst_port: int) -> Tuple[bytes, bytes, int, int]:
  "Sorts the two endpoints: the source pair goes first only when its port is strictly lower"

  if src_port < dst_port:
    return src_ip, dst_ip, src_port, dst_port
  return dst_ip, src_ip, dst_port, src_port

def key_from_tuple(src_ip: bytes, dst_ip: bytes, src_port: int, dst_port: int, proto: int) -> ConnectionKey:
  ip1, ip2, port1, port2 = order_endpoints(src_ip, dst_ip, src_port, dst_port)
  return ConnectionKey(ip1, ip2, port1, port2, proto)

def connection_key(packet: ParsedPacket) -> ConnectionKey:
  if packet.l4 is None or packet.ip is None:
    raise NoTransportLayer("packet has no TCP/UDP layer")
  l4 = packet.l4
  return key_from_tuple(packet.ip.src_ip, packet.ip.dst_ip, l4.src_port, l4.dst_port, packet.ip.next_proto)


@dataclass(slots = True)
class ConnectionState:
  key: ConnectionKey
  initiator_ip: bytes
  initiator_port: int
  created_at: float
  last_seen: float
  packet_count: int = 0
  env: Any = None
  verdict_override: Optional[VerdictOverride] = None
  env_fault: Optional[str] = None

  def exempt(self, action: Action):
    "Marks the connection as allowed for good; a set override is never replaced"

    if self.verdict_override is None:
      self.verdict_override = VerdictOverride(OverrideKind.EXEMPT, action)

  def condemn(self, action: Action):
    if self.verdict_override is None:
      self.verdict_override = VerdictOverride(OverrideKind.CONDEMNED, action)

  def snapshot(self) -> Dict[str, Any]:
    "Counters, timestamps, override and registers for the debug dump"

    override = "none"
    if self.verdict_override is not None:
      override = f"{self.verdict_override.kind}({self.verdict_override.action})"
    registers = self.env.dump_registers() if self.env is not None else {}
    return {
      "key": self.key.describe(),
      "initiator": f"{format_ip(self.initiator_ip)}:{self.initiator_port}",
      "packets": self.packet_count,
      "created_at": f"{self.created_at:.6f}",
      "last_seen": f"{self.last_seen:.6f}",
      "override": override,
      "registers": registers,
    }


def direction(packet: ParsedPacket, state: ConnectionState) -> Role:
  if packet.l4.src_port == state.initiator_port and packet.ip.src_ip == state.initiator_ip:
    return Role.INITIATOR
  return Role.RESPONDER


class HostStore:
  """
  Register files keyed by bare IP address, shared by every connection that
  touches the host. Unwritten registers are absent and read as zero.
  """

  def __init__(self):
    self._hosts: Dict[bytes, Dict[Tuple[str, int], Any]] = {}

  def registers(self, ip: bytes) -> Dict[Tuple[str, int], Any]:
    registers = self._hosts.get(ip)
    if registers is None:
      registers = self._hosts[ip] = {}
    return registers

  def peek(self, ip: bytes) -> Dict[Tuple[str, int], Any]:
    return dict(self._hosts.get(ip, {}))

  def clear(self):
    self._hosts.clear()

  def __len__(self) -> int:
    return len(self._hosts)


EnvFactory = Callable[[ConnectionState], Any]


class ConnectionTable:
  """
  Connections keyed by ConnectionKey, ordered least recently seen first.

  Arguments:
    idle_timeout: seconds of packet time after which a connection is dropped.
    max_connections: table cap, 0 for unbounded.
    evict_on_full: evict the stalest connection when the cap is hit instead of raising TableFull.
  """

  def __init__(self, idle_timeout: float = DEFAULT_IDLE_TIMEOUT, max_connections: int = 0,
               evict_on_full: bool = True):
    self.idle_timeout = idle_timeout
    self.max_connections = max_connections
    self.evict_on_full = evict_on_full
    self._connections: "OrderedDict[ConnectionKey, ConnectionState]" = OrderedDict()

  def get(self, key: ConnectionKey) -> Optional[ConnectionState]:
    return self._connections.get(key)

  def get_or_create(self, key: ConnectionKey, packet: ParsedPacket,
                    env_factory: Optional[EnvFactory] = None) -> Tuple[ConnectionState, bool]:
    now = packet.timestamp
    state = self._connections.get(key)
    if state is not None and now - state.last_seen > self.idle_timeout:
      del self._connections[key]
      state = None

    if state is not None:
      state.last_seen = now
      state.packet_count += 1
      self._connections.move_to_end(key)
      return state, False

    if self.max_connections and len(self._connections) >= self.max_connections:
      if not self.evict_on_full:
        raise TableFull(f"connection table holds {len(self._connections)} entries")
      stale_key, _ = self._connections.popitem(last = False)
      logger.info(f"Evicted {stale_key.describe()} to make room")

    state = ConnectionState(
      key = key,
      initiator_ip = packet.ip.src_ip,
      initiator_port = packet.l4.src_port,
      created_at = now,
      last_seen = now,
      packet_count = 1,
    )
    if env_factory is not None:
      state.env = env_factory(state)
    self._connections[key] = state
    return state, True

  def evict_idle(self, now: float, idle_timeout: Optional[float] = None) -> int:
    "Removes connections idle strictly longer than the timeout; host registers survive"

    timeout = self.idle_timeout if idle_timeout is None else idle_timeout
    stale = [key for key, state in self._connections.items() if now - state.last_seen > timeout]
    for key in stale:
      del self._connections[key]
    if stale:
      logger.info(f"Evicted {len(stale)} idle connections")
    return len(stale)

  def clear(self):
    self._connections.clear()

  def __len__(self) -> int:
    return len(self._connections)

  def __iter__(self) -> Iterator[ConnectionState]:
    return iter(list(self._connections.values()))

  def __contains__(self, key: ConnectionKey) -> bool:
    return key in self._connections


def evict_idle(table: ConnectionTable, now: float, idle_timeout: float) -> int:
  return table.evict_idle(now, idle_timeout)
