"""
Allow and block lists for every identifier class, evaluated blocklist first:

  identifier in blocklist            -> blocklist action
  allowlist enabled, identifier out  -> allowlist action
  otherwise                          -> no action

An allowlist with no entries is disabled.
"""

import copy
import ipaddress
from typing import Any, Dict, Hashable, Iterable, List, Optional, Sequence, Set, Tuple

from strenum import StrEnum

from actions import DROP, Action, parse_action
from common_functions import format_ip, format_mac, pack_ip, pack_mac, parse_port
from error_handler import ShapeMismatch, UnknownClass
from flows import ConnectionKey, key_from_tuple
from packet import PROTO_TCP, PROTO_UDP, EthernetFrame, IpDatagram, ParsedPacket


class IdentifierClass(StrEnum):
  MAC = "mac"
  IP = "ip"
  IP_SUBNET = "ip-subnet"
  TCP_PORT = "tcp-port"
  UDP_PORT = "udp-port"
  TCP_SERVICE = "tcp-service"
  UDP_SERVICE = "udp-service"
  TCP_CONNECTION = "tcp-connection"
  UDP_CONNECTION = "udp-connection"


class ListKind(StrEnum):
  ALLOW = "allowlist"
  BLOCK = "blocklist"


CONNECTION_CLASSES = (IdentifierClass.TCP_CONNECTION, IdentifierClass.UDP_CONNECTION)

CLASS_PROTO = {
  IdentifierClass.TCP_PORT: PROTO_TCP,
  IdentifierClass.UDP_PORT: PROTO_UDP,
  IdentifierClass.TCP_SERVICE: PROTO_TCP,
  IdentifierClass.UDP_SERVICE: PROTO_UDP,
  IdentifierClass.TCP_CONNECTION: PROTO_TCP,
  IdentifierClass.UDP_CONNECTION: PROTO_UDP,
}

# port before service before connection, per protocol
L4_ORDER = {
  PROTO_TCP: (IdentifierClass.TCP_PORT, IdentifierClass.TCP_SERVICE, IdentifierClass.TCP_CONNECTION),
  PROTO_UDP: (IdentifierClass.UDP_PORT, IdentifierClass.UDP_SERVICE, IdentifierClass.UDP_CONNECTION),
}


def identifier_class(name: str) -> IdentifierClass:
  try:
    return IdentifierClass(name.strip().lower().replace("_", "-"))
  except ValueError:
    raise UnknownClass(f"unknown identifier class: {name}") from None


class PrefixTable:
  """
  Subnet membership by longest-prefix containment. Prefixes are bucketed by
  length, so a lookup costs one hash lookup per distinct prefix length.
  """

  def __init__(self):
    self._buckets: Dict[Tuple[int, int], Set[int]] = {}
    self._networks: Set[Any] = set()

  @staticmethod
  def _bits(version: int) -> int:
    return 32 if version == 4 else 128

  def add(self, network) -> bool:
    if network in self._networks:
      return False
    self._networks.add(network)
    bits = self._bits(network.version)
    shift = bits - network.prefixlen
    self._buckets.setdefault((network.version, network.prefixlen), set()).add(
      int(network.network_address) >> shift if shift < bits else 0
    )
    return True

  def remove(self, network) -> bool:
    if network not in self._networks:
      return False
    self._networks.discard(network)
    bits = self._bits(network.version)
    bucket_key = (network.version, network.prefixlen)
    shift = bits - network.prefixlen
    bucket = self._buckets[bucket_key]
    bucket.discard(int(network.network_address) >> shift if shift < bits else 0)
    if not bucket:
      del self._buckets[bucket_key]
    return True

  def longest_match(self, packed_ip: bytes) -> Optional[Any]:
    version = 4 if len(packed_ip) == 4 else 6
    bits = self._bits(version)
    value = int.from_bytes(packed_ip, "big")
    lengths = sorted((length for v, length in self._buckets if v == version), reverse = True)
    for length in lengths:
      shift = bits - length
      candidate = value >> shift if shift < bits else 0
      if candidate in self._buckets[(version, length)]:
        address = ipaddress.ip_address((candidate << shift) if shift < bits else 0).packed \
          if version == 4 else ipaddress.IPv6Address((candidate << shift) if shift < bits else 0).packed
        return ipaddress.ip_network((ipaddress.ip_address(address), length))
    return None

  def __contains__(self, packed_ip: bytes) -> bool:
    return self.longest_match(packed_ip) is not None

  def __iter__(self):
    return iter(self._networks)

  def __len__(self) -> int:
    return len(self._networks)


def parse_identifier(cls: IdentifierClass, args: Sequence[Any]) -> Hashable:
  """
  Turns IPC/config arguments into the stored identifier for a class.

  Arguments:
    cls: identifier class.
    args: mac -> [mac]; ip -> [addr]; ip-subnet -> [cidr]; *-port -> [port];
      *-service -> [addr, port]; *-connection -> [addr, addr, port, port].
  """

  arity = {
    IdentifierClass.MAC: 1, IdentifierClass.IP: 1, IdentifierClass.IP_SUBNET: 1,
    IdentifierClass.TCP_PORT: 1, IdentifierClass.UDP_PORT: 1,
    IdentifierClass.TCP_SERVICE: 2, IdentifierClass.UDP_SERVICE: 2,
    IdentifierClass.TCP_CONNECTION: 4, IdentifierClass.UDP_CONNECTION: 4,
  }[cls]
  if isinstance(args, (str, int)):
    args = [args]
  args = list(args)
  if len(args) != arity:
    raise ShapeMismatch(f"{cls} takes {arity} argument(s), got {len(args)}")
  try:
    if cls == IdentifierClass.MAC:
      return pack_mac(args[0])
    if cls == IdentifierClass.IP:
      return pack_ip(args[0])
    if cls == IdentifierClass.IP_SUBNET:
      return ipaddress.ip_network(str(args[0]).strip(), strict = False)
    if cls in (IdentifierClass.TCP_PORT, IdentifierClass.UDP_PORT):
      return parse_port(args[0])
    if cls in (IdentifierClass.TCP_SERVICE, IdentifierClass.UDP_SERVICE):
      return (pack_ip(args[0]), parse_port(args[1]))
    # with equal ports the key depends on direction: "A B p p" matches only A -> B
    ip_a, ip_b, port_a, port_b = args
    return key_from_tuple(pack_ip(ip_a), pack_ip(ip_b), parse_port(port_a), parse_port(port_b), CLASS_PROTO[cls])
  except ValueError as e:
    raise ShapeMismatch(f"bad {cls} identifier {' '.join(map(str, args))}: {e}") from None

def format_identifier(cls: IdentifierClass, identifier: Hashable) -> str:
  if cls == IdentifierClass.MAC:
    return format_mac(identifier)
  if cls == IdentifierClass.IP:
    return format_ip(identifier)
  if cls == IdentifierClass.IP_SUBNET:
    return str(identifier)
  if cls in (IdentifierClass.TCP_PORT, IdentifierClass.UDP_PORT):
    return str(identifier)
  if cls in (IdentifierClass.TCP_SERVICE, IdentifierClass.UDP_SERVICE):
    return f"{format_ip(identifier[0])} {identifier[1]}"
  key = identifier
  return f"{format_ip(key.ip1)} {format_ip(key.ip2)} {key.port1} {key.port2}"


class FilterList:
  "One allowlist or blocklist for one identifier class"

  def __init__(self, cls: IdentifierClass, kind: ListKind, reject_action: Action = DROP):
    if kind == ListKind.ALLOW and cls in CONNECTION_CLASSES:
      raise UnknownClass("there is no connection-level allowlist")
    self.cls = cls
    self.kind = kind
    self.reject_action = reject_action
    self.entries = PrefixTable() if cls == IdentifierClass.IP_SUBNET else set()

  @property
  def enabled(self) -> bool:
    return self.kind == ListKind.BLOCK or len(self.entries) > 0

  def add(self, identifier: Hashable) -> bool:
    "Returns False when the entry was already present"

    if self.cls == IdentifierClass.IP_SUBNET:
      return self.entries.add(identifier)
    if identifier in self.entries:
      return False
    self.entries.add(identifier)
    return True

  def remove(self, identifier: Hashable) -> bool:
    "Returns False (not found) when the entry was absent"

    if self.cls == IdentifierClass.IP_SUBNET:
      return self.entries.remove(identifier)
    if identifier not in self.entries:
      return False
    self.entries.discard(identifier)
    return True

  def list_entries(self) -> List[str]:
    return sorted(format_identifier(self.cls, entry) for entry in self.entries)

  def set_action(self, action: Action):
    self.reject_action = action

  def contains(self, identifier: Hashable) -> bool:
    return identifier in self.entries

  def __len__(self) -> int:
    return len(self.entries)


def evaluate(identifier: Hashable, blocklist: FilterList, allowlist: Optional[FilterList]) -> Optional[Action]:
  if blocklist.contains(identifier):
    return blocklist.reject_action
  if allowlist is not None and allowlist.enabled and not allowlist.contains(identifier):
    return allowlist.reject_action
  return None

def evaluate_any(identifiers: Iterable[Hashable], blocklist: FilterList,
                 allowlist: Optional[FilterList]) -> Optional[Action]:
  """
  Evaluates the identifiers a packet carries for one class (source and
  destination side). Any blocklisted side blocks; the packet is not allowed
  only when no side is on an enabled allowlist.
  """

  identifiers = tuple(identifiers)
  for identifier in identifiers:
    if blocklist.contains(identifier):
      return blocklist.reject_action
  if allowlist is not None and allowlist.enabled:
    if not any(allowlist.contains(identifier) for identifier in identifiers):
      return allowlist.reject_action
  return None


class FilterSet:
  "Every class's lists plus the service exemptions, evaluated in layer order"

  def __init__(self):
    self.blocklists: Dict[IdentifierClass, FilterList] = {
      cls: FilterList(cls, ListKind.BLOCK) for cls in IdentifierClass
    }
    self.allowlists: Dict[IdentifierClass, FilterList] = {
      cls: FilterList(cls, ListKind.ALLOW) for cls in IdentifierClass if cls not in CONNECTION_CLASSES
    }
    self.exemptions: Set[Tuple[int, bytes, int]] = set()

  def get(self, kind: ListKind, cls: IdentifierClass) -> FilterList:
    lists = self.blocklists if kind == ListKind.BLOCK else self.allowlists
    if cls not in lists:
      raise UnknownClass(f"there is no {cls} {kind}")
    return lists[cls]

  def configure(self, kind: ListKind, cls: IdentifierClass, action: Optional[str], entries: Iterable[Any]):
    filter_list = self.get(kind, cls)
    if action is not None:
      filter_list.set_action(parse_action(action))
    for entry in entries:
      filter_list.add(parse_identifier(cls, entry))

  def exempt_service(self, proto: int, ip: bytes, port: int):
    self.exemptions.add((proto, ip, port))

  def is_exempt(self, packet: ParsedPacket) -> bool:
    if not self.exemptions or packet.l4 is None:
      return False
    proto = packet.ip.next_proto
    return (proto, packet.ip.src_ip, packet.l4.src_port) in self.exemptions \
      or (proto, packet.ip.dst_ip, packet.l4.dst_port) in self.exemptions

  def _check(self, cls: IdentifierClass, identifiers) -> Optional[Tuple[Action, IdentifierClass]]:
    action = evaluate_any(identifiers, self.blocklists[cls], self.allowlists.get(cls))
    return (action, cls) if action is not None else None

  def evaluate_l2(self, eth: EthernetFrame) -> Optional[Tuple[Action, IdentifierClass]]:
    return self._check(IdentifierClass.MAC, (eth.src_mac, eth.dst_mac))

  def evaluate_l3(self, ip: IpDatagram) -> Optional[Tuple[Action, IdentifierClass]]:
    return self._check(IdentifierClass.IP, (ip.src_ip, ip.dst_ip)) \
      or self._check(IdentifierClass.IP_SUBNET, (ip.src_ip, ip.dst_ip))

  def evaluate_l4(self, packet: ParsedPacket, key: ConnectionKey) -> Optional[Tuple[Action, IdentifierClass]]:
    order = L4_ORDER.get(packet.ip.next_proto)
    if order is None:
      return None
    port_cls, service_cls, connection_cls = order
    l4 = packet.l4
    return self._check(port_cls, (l4.src_port, l4.dst_port)) \
      or self._check(service_cls, ((packet.ip.src_ip, l4.src_port), (packet.ip.dst_ip, l4.dst_port))) \
      or self._check(connection_cls, (key,))

  def snapshot(self) -> "FilterSet":
    return copy.deepcopy(self)
