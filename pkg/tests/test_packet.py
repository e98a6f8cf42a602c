import random
import struct

import dpkt
import pytest

import traffic_builders as builders
from common_functions import pack_ip
from error_handler import BadDataOffset, BadVersion, Truncated, Unsupported
from packet import (
  EMPTY_STATS,
  LINKTYPE_ETHERNET,
  LINKTYPE_RAW,
  PROTO_TCP,
  PROTO_UDP,
  TCP_ACK,
  TCP_PSH,
  TCP_SYN,
  TcpFlags,
  parse_l4,
  parse_packet,
  payload_stats,
  transport_checksum,
)

CLIENT, SERVER = "10.0.0.2", "93.184.216.34"


def _tcp(payload = b"hello", flags = TCP_PSH | TCP_ACK):
  return builders.tcp_frame(CLIENT, SERVER, 40000, 443, 1001, 5001, flags, payload)

def _ipv6_datagram(next_header, body, traffic_class = 0, flow_label = 0, hop_limit = 64):
  first_word = (6 << 28) | (traffic_class << 20) | flow_label
  return struct.pack(
    "!IHBB16s16s", first_word, len(body), next_header, hop_limit, pack_ip("2001:db8::1"), pack_ip("2001:db8::2"),
  ) + body

def _tcp_segment(payload = b"data"):
  return bytes(dpkt.tcp.TCP(sport = 5555, dport = 80, seq = 7, ack = 9, flags = TCP_ACK, data = payload))


def test_parses_tcp_over_ipv4():
  packet = parse_packet(_tcp(), LINKTYPE_ETHERNET, 12.5)

  assert packet.eth.src_mac == bytes.fromhex("020000000001")
  assert packet.ip.version == 4
  assert packet.ip.ttl == 64
  assert packet.ip.next_proto == PROTO_TCP
  assert packet.ip.src_ip == pack_ip(CLIENT)
  assert packet.ip.checksum_ok()
  assert packet.l4.src_port == 40000 and packet.l4.dst_port == 443
  assert packet.l4.seq == 1001 and packet.l4.ack == 5001
  assert packet.l4.flags.psh and packet.l4.flags.ack and not packet.l4.flags.syn
  assert packet.payload == b"hello"
  assert packet.timestamp == 12.5
  assert packet.stats.len == 5

def test_parses_udp_length():
  frame = builders.udp_frame(CLIENT, "8.8.8.8", 5353, 53, b"abc")
  packet = parse_packet(frame)

  assert packet.l4.proto == PROTO_UDP
  assert packet.l4.length == 11
  assert packet.payload == b"abc"
  assert not packet.l4.is_tcp

def test_transport_checksum_verifies_to_zero():
  packet = parse_packet(_tcp(b"payload bytes"))

  assert transport_checksum(packet.ip.src_ip, packet.ip.dst_ip, PROTO_TCP, packet.ip.payload) == 0

def test_payload_stats():
  stats = payload_stats(b"AB\x00CDEFG")

  assert stats.len == 8
  assert stats.popcount_sum == 19
  assert stats.printable_count == 7
  assert stats.printable_run_max == 5
  assert stats.printable_prefix_len == 2

def test_payload_stats_edges():
  assert payload_stats(b"") == EMPTY_STATS
  printable = payload_stats(b"hello world")
  assert printable.printable_run_max == printable.printable_prefix_len == 11
  dense = payload_stats(bytes([0x0F]) * 200)
  assert dense.popcount_sum == 800
  assert dense.printable_count == 0 and dense.printable_prefix_len == 0
  # 0x7F is not printable, 0x20 and 0x7E are
  edges = payload_stats(b" ~\x7f")
  assert edges.printable_count == 2 and edges.printable_prefix_len == 2

def _naive_stats(payload):
  printable = [0x20 <= b <= 0x7E for b in payload]
  run = longest = 0
  for is_printable in printable:
    run = run + 1 if is_printable else 0
    longest = max(longest, run)
  prefix = next((i for i, is_printable in enumerate(printable) if not is_printable), len(payload))
  return (len(payload), sum(bin(b).count("1") for b in payload), sum(printable), longest, prefix)

def test_payload_stats_match_naive_reference():
  rng = random.Random(2024)
  mostly_text = list(range(0x20, 0x7F)) + [0x00, 0x0A, 0x7F, 0xFF]
  for _ in range(10000):
    alphabet = mostly_text if rng.random() < 0.5 else range(256)
    payload = bytes(rng.choice(alphabet) for _ in range(rng.randint(0, 64)))
    stats = payload_stats(payload)

    assert (stats.len, stats.popcount_sum, stats.printable_count, stats.printable_run_max,
            stats.printable_prefix_len) == _naive_stats(payload)

def test_random_bytes_average_four_set_bits():
  data = random.Random(5).randbytes(10**6)
  stats = payload_stats(data)

  assert abs(stats.popcount_sum / stats.len - 4.0) < 0.01

def test_tcp_flags():
  flags = TcpFlags(TCP_SYN | TCP_ACK)

  assert flags.syn and flags.ack
  assert not flags.rst
  assert flags == TcpFlags(TCP_SYN | TCP_ACK)
  assert repr(flags) == "TcpFlags(syn|ack)"

def test_raw_ip_link_type():
  frame = _tcp()
  packet = parse_packet(frame[14:], LINKTYPE_RAW)

  assert packet.eth is None
  assert packet.l4.dst_port == 443

def test_ipv6_fields():
  datagram = _ipv6_datagram(PROTO_TCP, _tcp_segment(), traffic_class = 0x2E, flow_label = 0x12345, hop_limit = 33)
  packet = parse_packet(datagram, LINKTYPE_RAW)

  assert packet.ip.version == 6
  assert packet.ip.ttl == 33
  assert packet.ip.traffic_class == 0x2E
  assert packet.ip.flow_label == 0x12345
  assert packet.l4.src_port == 5555
  assert packet.payload == b"data"

def test_ipv6_fragment_header():
  segment = _tcp_segment()
  first = struct.pack("!BBHI", PROTO_TCP, 0, 0x0001, 99) + segment
  packet = parse_packet(_ipv6_datagram(44, first), LINKTYPE_RAW)
  assert packet.ip.more_frags
  assert packet.l4 is not None

  tail = struct.pack("!BBHI", PROTO_TCP, 0, 10 << 3, 99) + segment
  packet = parse_packet(_ipv6_datagram(44, tail), LINKTYPE_RAW)
  assert packet.ip.frag_offset == 10
  assert packet.l4 is None
  assert packet.stats == EMPTY_STATS

def test_ipv4_fragment_tail_has_no_transport():
  tcp = dpkt.tcp.TCP(sport = 1, dport = 2, data = b"x")
  datagram = dpkt.ip.IP(src = pack_ip(CLIENT), dst = pack_ip(SERVER), p = PROTO_TCP, off = 5, data = tcp)
  datagram.len = len(datagram)
  packet = parse_packet(bytes(datagram), LINKTYPE_RAW)

  assert packet.ip.frag_offset == 5
  assert packet.ip.is_fragment_tail
  assert packet.l4 is None

def test_arp_frame():
  body = struct.pack("!HHBBH", 1, 0x0800, 6, 4, 1) + b"\x00" * 20
  frame = bytes.fromhex("ffffffffffff" "020000000001" "0806") + body
  packet = parse_packet(frame)

  assert packet.ip is None
  assert packet.arp.valid
  assert packet.arp.opcode == 1

def test_parse_errors():
  with pytest.raises(Truncated):
    parse_packet(b"\x00" * 10)
  with pytest.raises(Unsupported):
    parse_packet(bytes(12) + b"\x81\x00" + bytes(30))
  with pytest.raises(Unsupported):
    parse_packet(bytes(12) + b"\x00\x40" + bytes(30))
  with pytest.raises(BadVersion):
    parse_packet(bytes(12) + b"\x08\x00" + b"\x65" + bytes(30))
  with pytest.raises(BadVersion):
    parse_packet(b"\x50" + bytes(30), LINKTYPE_RAW)
  with pytest.raises(Truncated):
    parse_packet(b"", LINKTYPE_RAW)
  with pytest.raises(Unsupported):
    parse_packet(_tcp(), 999)

def test_transport_errors():
  short_offset = struct.pack("!HHIIBBHHH", 1, 2, 0, 0, 4 << 4, 0, 0, 0, 0)
  with pytest.raises(BadDataOffset):
    parse_l4(short_offset, PROTO_TCP)
  with pytest.raises(Truncated):
    parse_l4(b"\x00" * 5, PROTO_UDP)
  with pytest.raises(Unsupported):
    parse_l4(b"\x00" * 20, 1)
