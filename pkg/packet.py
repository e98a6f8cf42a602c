"""
Layered frame parsing: Ethernet, IPv4/IPv6/ARP, TCP/UDP, plus the payload
statistics censor programs read.

Parsers are pure functions over immutable bytes. Each one raises a
PacketError subclass on malformed input; the engine decides what that means
for the verdict.
"""

import struct
from dataclasses import dataclass
from typing import Optional, Union

import dpkt
import regex
from strenum import StrEnum

from error_handler import BadDataOffset, BadLength, BadVersion, Truncated, Unsupported

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101

ETH_TYPE_IPV4 = 0x0800
ETH_TYPE_ARP = 0x0806
ETH_TYPE_8021Q = 0x8100
ETH_TYPE_IPV6 = 0x86DD
ETH_TYPE_MIN = 0x0600

PROTO_TCP = 6
PROTO_UDP = 17

# IPv6 extension headers walked before the transport header
IPV6_HOP_BY_HOP = 0
IPV6_ROUTING = 43
IPV6_FRAGMENT = 44
IPV6_AH = 51
IPV6_NO_NEXT = 59
IPV6_DEST_OPTS = 60
IPV6_EXTENSIONS = frozenset((IPV6_HOP_BY_HOP, IPV6_ROUTING, IPV6_FRAGMENT, IPV6_AH, IPV6_DEST_OPTS))
MAX_EXTENSION_HEADERS = 8

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10
TCP_URG = 0x20

_PRINTABLE = bytes(range(0x20, 0x7F))
_PRINTABLE_RUN = regex.compile(rb"[\x20-\x7e]+")
_PRINTABLE_PREFIX = regex.compile(rb"[\x20-\x7e]*")

_IPV4_HEADER = struct.Struct("!BBHHHBBH")
_IPV6_HEADER = struct.Struct("!IHBB")
_TCP_HEADER = struct.Struct("!HHIIBB")
_UDP_HEADER = struct.Struct("!HHH")


class Direction(StrEnum):
  INGRESS = "ingress"
  EGRESS = "egress"
  UNKNOWN = "unknown"


@dataclass(slots = True)
class EthernetFrame:
  dst_mac: bytes
  src_mac: bytes
  ethertype: int
  payload: bytes


@dataclass(slots = True)
class IpDatagram:
  version: int
  header_len: int
  total_len: int
  ttl: int
  next_proto: int
  src_ip: bytes
  dst_ip: bytes
  payload: bytes
  # IPv4 only
  dscp: int = 0
  ecn: int = 0
  ipid: int = 0
  dont_frag: bool = False
  more_frags: bool = False
  frag_offset: int = 0
  checksum: int = 0
  header: bytes = b""
  # IPv6 only
  traffic_class: int = 0
  flow_label: int = 0

  def checksum_ok(self) -> bool:
    "IPv4 header checksum validity; IPv6 has no header checksum"

    if self.version != 4:
      return True
    return dpkt.in_cksum(self.header) == 0

  @property
  def is_fragment_tail(self) -> bool:
    return self.frag_offset != 0


@dataclass(slots = True)
class ArpInfo:
  valid: bool
  opcode: int = 0


class TcpFlags:
  __slots__ = ("value",)

  def __init__(self, value: int):
    self.value = value

  syn = property(lambda self: bool(self.value & TCP_SYN))
  ack = property(lambda self: bool(self.value & TCP_ACK))
  fin = property(lambda self: bool(self.value & TCP_FIN))
  rst = property(lambda self: bool(self.value & TCP_RST))
  psh = property(lambda self: bool(self.value & TCP_PSH))
  urg = property(lambda self: bool(self.value & TCP_URG))

  def __eq__(self, other):
    return isinstance(other, TcpFlags) and other.value == self.value

  def __repr__(self):
    names = [name for name in ("syn", "ack", "fin", "rst", "psh", "urg") if getattr(self, name)]
    return f"TcpFlags({'|'.join(names) or 'none'})"


@dataclass(slots = True)
class TransportSegment:
  proto: int
  src_port: int
  dst_port: int
  payload: bytes
  seq: int = 0
  ack: int = 0
  flags: Optional[TcpFlags] = None
  header_len: int = 8
  length: int = 0

  @property
  def is_tcp(self) -> bool:
    return self.proto == PROTO_TCP


@dataclass(frozen = True, slots = True)
class PayloadStats:
  len: int = 0
  popcount_sum: int = 0
  printable_count: int = 0
  printable_run_max: int = 0
  printable_prefix_len: int = 0


EMPTY_STATS = PayloadStats()


@dataclass(slots = True)
class ParsedPacket:
  ip: Optional[IpDatagram]
  eth: Optional[EthernetFrame] = None
  l4: Optional[TransportSegment] = None
  stats: PayloadStats = EMPTY_STATS
  timestamp: float = 0.0
  iface_direction: Direction = Direction.UNKNOWN
  arp: Optional[ArpInfo] = None
  link_type: int = LINKTYPE_ETHERNET

  @property
  def payload(self) -> bytes:
    return self.l4.payload if self.l4 is not None else b""

  @property
  def src_port(self) -> Optional[int]:
    return self.l4.src_port if self.l4 is not None else None

  @property
  def dst_port(self) -> Optional[int]:
    return self.l4.dst_port if self.l4 is not None else None


def payload_stats(payload: bytes) -> PayloadStats:
  """
  Byte-wise payload statistics.

  Printable means 0x20 <= b <= 0x7E inclusive. The prefix and longest-run
  lengths are measured in bytes.
  """

  length = len(payload)
  if not length:
    return EMPTY_STATS
  payload = bytes(payload)
  popcount_sum = int.from_bytes(payload, "big").bit_count()
  printable_count = length - len(payload.translate(None, _PRINTABLE))
  if printable_count == 0:
    run_max = prefix = 0
  elif printable_count == length:
    run_max = prefix = length
  else:
    run_max = max(len(run) for run in _PRINTABLE_RUN.findall(payload))
    prefix = _PRINTABLE_PREFIX.match(payload).end()
  return PayloadStats(length, popcount_sum, printable_count, run_max, prefix)

def transport_checksum(src: bytes, dst: bytes, proto: int, segment: bytes) -> int:
  "TCP/UDP checksum over the IPv4 or IPv6 pseudo-header and the segment with its checksum zeroed"

  if len(src) == 4:
    pseudo = struct.pack("!4s4sxBH", src, dst, proto, len(segment))
  else:
    pseudo = struct.pack("!16s16sIxxxB", src, dst, len(segment), proto)
  return dpkt.in_cksum(pseudo + segment)

def parse_ethernet(data: bytes) -> EthernetFrame:
  "Splits an Ethernet II header from its payload"

  if len(data) < 14:
    raise Truncated(f"ethernet frame of {len(data)} bytes")
  ethertype = (data[12] << 8) | data[13]
  if ethertype < ETH_TYPE_MIN:
    raise Unsupported(f"length-typed ethernet frame (0x{ethertype:04x})")
  if ethertype == ETH_TYPE_8021Q:
    raise Unsupported("802.1Q tagged frame")
  return EthernetFrame(data[0:6], data[6:12], ethertype, data[14:])

def _parse_ipv4(data: bytes) -> IpDatagram:
  if len(data) < 20:
    raise Truncated(f"IPv4 header needs 20 bytes, have {len(data)}")
  vihl, tos, total_len, ipid, frag, ttl, proto, checksum = _IPV4_HEADER.unpack_from(data)
  if vihl >> 4 != 4:
    raise BadVersion(f"version nibble {vihl >> 4} in IPv4 datagram")
  header_len = (vihl & 0x0F) * 4
  if header_len < 20:
    raise BadLength(f"IPv4 header length {header_len}")
  if len(data) < header_len:
    raise Truncated("IPv4 options cut short")
  if total_len < header_len:
    raise BadLength(f"total length {total_len} below header length {header_len}")
  if total_len > len(data):
    raise BadLength(f"total length {total_len} exceeds {len(data)} byte buffer")
  return IpDatagram(
    version = 4,
    header_len = header_len,
    total_len = total_len,
    ttl = ttl,
    next_proto = proto,
    src_ip = data[12:16],
    dst_ip = data[16:20],
    payload = data[header_len:total_len],
    dscp = tos >> 2,
    ecn = tos & 0x03,
    ipid = ipid,
    dont_frag = bool(frag & 0x4000),
    more_frags = bool(frag & 0x2000),
    frag_offset = frag & 0x1FFF,
    checksum = checksum,
    header = data[:header_len],
  )

def _parse_ipv6(data: bytes) -> IpDatagram:
  if len(data) < 40:
    raise Truncated(f"IPv6 header needs 40 bytes, have {len(data)}")
  vtf, payload_len, next_header, hop_limit = _IPV6_HEADER.unpack_from(data)
  if vtf >> 28 != 6:
    raise BadVersion(f"version nibble {vtf >> 28} in IPv6 datagram")
  total_len = 40 + payload_len
  if total_len > len(data):
    raise BadLength(f"payload length {payload_len} exceeds buffer")

  offset = 40
  more_frags = False
  frag_offset = 0
  walked = 0
  while next_header in IPV6_EXTENSIONS and walked < MAX_EXTENSION_HEADERS:
    if offset + 8 > total_len:
      raise Truncated("IPv6 extension header cut short")
    following = data[offset]
    if next_header == IPV6_FRAGMENT:
      frag_field = (data[offset + 2] << 8) | data[offset + 3]
      frag_offset = frag_field >> 3
      more_frags = bool(frag_field & 0x1)
      ext_len = 8
    elif next_header == IPV6_AH:
      ext_len = (data[offset + 1] + 2) * 4
    else:
      ext_len = (data[offset + 1] + 1) * 8
    offset += ext_len
    next_header = following
    walked += 1
  if offset > total_len:
    raise Truncated("IPv6 extension chain runs past the payload")

  return IpDatagram(
    version = 6,
    header_len = offset,
    total_len = total_len,
    ttl = hop_limit,
    next_proto = next_header,
    src_ip = data[8:24],
    dst_ip = data[24:40],
    payload = data[offset:total_len],
    more_frags = more_frags,
    frag_offset = frag_offset,
    traffic_class = (vtf >> 20) & 0xFF,
    flow_label = vtf & 0xFFFFF,
  )

def parse_arp(data: bytes) -> ArpInfo:
  "Checks an ARP body for validity; nothing else is extracted"

  if len(data) < 8:
    return ArpInfo(valid = False)
  htype, ptype, hlen, plen, opcode = struct.unpack_from("!HHBBH", data)
  needed = 8 + 2 * hlen + 2 * plen
  valid = htype == 1 and ptype == ETH_TYPE_IPV4 and hlen == 6 and plen == 4 \
    and opcode in (1, 2) and len(data) >= needed
  return ArpInfo(valid = valid, opcode = opcode)

def parse_ip(data: bytes, version_hint: int) -> Union[IpDatagram, ArpInfo]:
  """
  Parses the layer 3 header selected by the ethertype.

  Arguments:
    data: bytes following the link header.
    version_hint: ethertype (0x0800, 0x86DD or 0x0806), or 4/6 for raw IP.
  Returns the datagram, or an ArpInfo validity result for ARP.
  """

  if version_hint in (ETH_TYPE_IPV4, 4):
    return _parse_ipv4(data)
  if version_hint in (ETH_TYPE_IPV6, 6):
    return _parse_ipv6(data)
  if version_hint == ETH_TYPE_ARP:
    return parse_arp(data)
  raise Unsupported(f"ethertype 0x{version_hint:04x}")

def parse_l4(data: bytes, proto: int) -> TransportSegment:
  "Parses a TCP or UDP header, respecting the TCP data offset"

  if proto == PROTO_UDP:
    if len(data) < 8:
      raise Truncated(f"UDP header needs 8 bytes, have {len(data)}")
    src_port, dst_port, length = _UDP_HEADER.unpack_from(data)
    end = length if 8 <= length <= len(data) else len(data)
    return TransportSegment(PROTO_UDP, src_port, dst_port, data[8:end], length = length)

  if proto == PROTO_TCP:
    if len(data) < 20:
      raise Truncated(f"TCP header needs 20 bytes, have {len(data)}")
    src_port, dst_port, seq, ack, offset_byte, flags = _TCP_HEADER.unpack_from(data)
    data_offset = offset_byte >> 4
    if data_offset < 5:
      raise BadDataOffset(f"TCP data offset {data_offset}")
    header_len = data_offset * 4
    if header_len > len(data):
      raise BadDataOffset(f"TCP data offset {data_offset} beyond {len(data)} byte segment")
    return TransportSegment(
      PROTO_TCP, src_port, dst_port, data[header_len:],
      seq = seq, ack = ack, flags = TcpFlags(flags), header_len = header_len, length = len(data),
    )

  raise Unsupported(f"transport protocol {proto}")

def transport_of(ip: IpDatagram) -> Optional[TransportSegment]:
  "Transport segment of a datagram, or None when it carries no TCP/UDP header"

  if ip.next_proto not in (PROTO_TCP, PROTO_UDP) or ip.frag_offset:
    return None
  return parse_l4(ip.payload, ip.next_proto)

def parse_packet(
    data: bytes, link_type: int = LINKTYPE_ETHERNET, timestamp: float = 0.0,
    iface_direction: Direction = Direction.UNKNOWN
  ) -> ParsedPacket:
  """
  Composes the layer parsers into one ParsedPacket.

  Non-TCP/UDP datagrams come back with no l4 and empty stats. ARP comes back
  with no ip and an ArpInfo. Parser errors propagate.
  """

  eth = None
  if link_type == LINKTYPE_ETHERNET:
    eth = parse_ethernet(data)
    l3 = parse_ip(eth.payload, eth.ethertype)
  elif link_type == LINKTYPE_RAW:
    if not data:
      raise Truncated("empty raw IP packet")
    version = data[0] >> 4
    if version not in (4, 6):
      raise BadVersion(f"raw IP version nibble {version}")
    l3 = parse_ip(data, version)
  else:
    raise Unsupported(f"link type {link_type}")

  if isinstance(l3, ArpInfo):
    return ParsedPacket(ip = None, eth = eth, arp = l3, timestamp = timestamp,
                        iface_direction = iface_direction, link_type = link_type)

  l4 = transport_of(l3)
  stats = payload_stats(l4.payload) if l4 is not None else EMPTY_STATS
  return ParsedPacket(ip = l3, eth = eth, l4 = l4, stats = stats, timestamp = timestamp,
                      iface_direction = iface_direction, link_type = link_type)
