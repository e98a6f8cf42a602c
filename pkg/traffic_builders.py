"""
Deterministic synthetic traffic for tests and experiments.

Every builder that draws random values takes a seed, so the same arguments
always produce the same bytes. Frames are Ethernet/IPv4 with valid IP and
transport checksums.
"""

import random
import string
import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import dpkt

from common_functions import pack_ip, pack_mac
from engine import write_frames
from packet import LINKTYPE_ETHERNET, PROTO_TCP, PROTO_UDP, TCP_ACK, TCP_PSH, TCP_SYN, transport_checksum

DEFAULT_TTL = 64
SHADOWSOCKS_PORT = 8388
WIREGUARD_PORT = 51820
TLS_CIPHER_SUITES = (0x1301, 0x1302, 0x1303, 0xC02B, 0xC02F, 0xC02C, 0xC030)

Frames = List[bytes]


@dataclass(frozen = True)
class FlowSpec:
  "Addresses of one client/server conversation"

  client_ip: str = "10.0.0.2"
  server_ip: str = "93.184.216.34"
  client_port: int = 40000
  server_port: int = 443
  client_mac: str = "02:00:00:00:00:01"
  server_mac: str = "02:00:00:00:00:02"
  client_isn: int = 1000
  server_isn: int = 5000


def flow_for(index: int, server_port: int = 443, seed: int = 0, server_ip: str = "93.184.216.34") -> FlowSpec:
  """
  The index-th flow of a corpus: distinct client address and port per index,
  seeded initial sequence numbers.
  """

  rng = random.Random(f"{seed}:{index}")
  host = index + 1
  client_ip = f"10.{(host >> 16) & 0xFF}.{(host >> 8) & 0xFF}.{host & 0xFF}"
  return FlowSpec(
    client_ip = client_ip,
    server_ip = server_ip,
    client_port = 20000 + index % 40000,
    server_port = server_port,
    client_isn = rng.getrandbits(32),
    server_isn = rng.getrandbits(32),
  )


# frames

def _ethernet(src_mac: str, dst_mac: str, datagram: dpkt.ip.IP) -> bytes:
  return bytes(dpkt.ethernet.Ethernet(
    src = pack_mac(src_mac), dst = pack_mac(dst_mac), type = dpkt.ethernet.ETH_TYPE_IP, data = datagram,
  ))

def _ipv4(src_ip: bytes, dst_ip: bytes, proto: int, segment, ttl: int) -> dpkt.ip.IP:
  datagram = dpkt.ip.IP(src = src_ip, dst = dst_ip, p = proto, ttl = ttl, data = segment)
  datagram.len = len(datagram)
  return datagram

def tcp_frame(src_ip: str, dst_ip: str, src_port: int, dst_port: int, seq: int, ack: int, flags: int,
              payload: bytes = b"", src_mac: str = "02:00:00:00:00:01", dst_mac: str = "02:00:00:00:00:02",
              ttl: int = DEFAULT_TTL) -> bytes:
  src, dst = pack_ip(src_ip), pack_ip(dst_ip)
  tcp = dpkt.tcp.TCP(sport = src_port, dport = dst_port, seq = seq & 0xFFFFFFFF, ack = ack & 0xFFFFFFFF,
                     flags = flags, win = 65535, data = payload)
  tcp.sum = 0
  tcp.sum = transport_checksum(src, dst, PROTO_TCP, bytes(tcp))
  return _ethernet(src_mac, dst_mac, _ipv4(src, dst, PROTO_TCP, tcp, ttl))

def udp_frame(src_ip: str, dst_ip: str, src_port: int, dst_port: int, payload: bytes = b"",
              src_mac: str = "02:00:00:00:00:01", dst_mac: str = "02:00:00:00:00:02",
              ttl: int = DEFAULT_TTL) -> bytes:
  src, dst = pack_ip(src_ip), pack_ip(dst_ip)
  udp = dpkt.udp.UDP(sport = src_port, dport = dst_port, data = payload)
  udp.ulen = len(udp)
  udp.sum = 0
  udp.sum = transport_checksum(src, dst, PROTO_UDP, bytes(udp))
  return _ethernet(src_mac, dst_mac, _ipv4(src, dst, PROTO_UDP, udp, ttl))


# tcp conversations

def tcp_handshake(flow: FlowSpec) -> Frames:
  "SYN, SYN-ACK, ACK"

  client = (flow.client_ip, flow.server_ip, flow.client_port, flow.server_port)
  server = (flow.server_ip, flow.client_ip, flow.server_port, flow.client_port)
  client_macs = {"src_mac": flow.client_mac, "dst_mac": flow.server_mac}
  server_macs = {"src_mac": flow.server_mac, "dst_mac": flow.client_mac}
  return [
    tcp_frame(*client, flow.client_isn, 0, TCP_SYN, **client_macs),
    tcp_frame(*server, flow.server_isn, flow.client_isn + 1, TCP_SYN | TCP_ACK, **server_macs),
    tcp_frame(*client, flow.client_isn + 1, flow.server_isn + 1, TCP_ACK, **client_macs),
  ]

def tcp_flow(flow: FlowSpec, payloads: Sequence[bytes], handshake: bool = True,
             responses: Optional[Sequence[bytes]] = None) -> Frames:
  """
  A TCP conversation: the optional handshake, then one PSH|ACK segment per
  client payload. When responses are given, the server answers the i-th
  payload with the i-th response. Sequence numbers advance by payload length.
  """

  frames = tcp_handshake(flow) if handshake else []
  client_seq = flow.client_isn + 1
  server_seq = flow.server_isn + 1
  for i, payload in enumerate(payloads):
    frames.append(tcp_frame(
      flow.client_ip, flow.server_ip, flow.client_port, flow.server_port,
      client_seq, server_seq, TCP_PSH | TCP_ACK, payload, flow.client_mac, flow.server_mac,
    ))
    client_seq += len(payload)
    if responses is not None and i < len(responses):
      reply = responses[i]
      frames.append(tcp_frame(
        flow.server_ip, flow.client_ip, flow.server_port, flow.client_port,
        server_seq, client_seq, TCP_PSH | TCP_ACK, reply, flow.server_mac, flow.client_mac,
      ))
      server_seq += len(reply)
  return frames


# udp exchanges

def udp_exchange(flow: FlowSpec, payloads: Sequence[bytes], responses: Sequence[bytes] = ()) -> Frames:
  "Client datagrams, the i-th answered by the server with the i-th response when there is one"

  frames = []
  for i, payload in enumerate(payloads):
    frames.append(udp_frame(
      flow.client_ip, flow.server_ip, flow.client_port, flow.server_port, payload, flow.client_mac, flow.server_mac,
    ))
    if i < len(responses):
      frames.append(udp_frame(
        flow.server_ip, flow.client_ip, flow.server_port, flow.client_port, responses[i],
        flow.server_mac, flow.client_mac,
      ))
  return frames


# payloads

def client_hello(sni: str, seed: int = 0) -> bytes:
  """
  A TLS 1.2-style ClientHello record (16 03 01) carrying a server_name
  extension for sni.
  """

  rng = random.Random(seed)
  host = sni.encode("ascii")
  server_name_list = struct.pack("!BH", 0, len(host)) + host
  server_name = struct.pack("!H", len(server_name_list)) + server_name_list
  extensions = struct.pack("!HH", 0, len(server_name)) + server_name
  ciphers = b"".join(struct.pack("!H", suite) for suite in TLS_CIPHER_SUITES)
  body = (
    b"\x03\x03" + rng.randbytes(32)
    + b"\x00"
    + struct.pack("!H", len(ciphers)) + ciphers
    + b"\x01\x00"
    + struct.pack("!H", len(extensions)) + extensions
  )
  handshake = b"\x01" + len(body).to_bytes(3, "big") + body
  return b"\x16\x03\x01" + struct.pack("!H", len(handshake)) + handshake

def random_payload(length: int, seed: int) -> bytes:
  return random.Random(seed).randbytes(length)

def printable_payload(length: int, seed: int) -> bytes:
  rng = random.Random(seed)
  alphabet = string.ascii_letters + string.digits + " .,-"
  return "".join(rng.choice(alphabet) for _ in range(length)).encode("ascii")

def http_get(words: Sequence[str], host: str = "example.org") -> bytes:
  "GET request whose path is the words joined by hyphens"

  path = "/" + "-".join(words)
  return (
    f"GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: censorlab\r\nAccept: */*\r\n\r\n"
  ).encode("ascii")

def dns_query(domain: str, qtype: str = "A", txid: int = 0) -> bytes:
  "A recursive DNS query for domain; qtype is A or AAAA"

  types = {"A": dpkt.dns.DNS_A, "AAAA": dpkt.dns.DNS_AAAA}
  if qtype.upper() not in types:
    raise ValueError(f"unsupported query type {qtype}")
  query = dpkt.dns.DNS(id = txid & 0xFFFF, op = dpkt.dns.DNS_RD)
  query.qd = [dpkt.dns.DNS.Q(name = domain, type = types[qtype.upper()], cls = dpkt.dns.DNS_IN)]
  return bytes(query)

def dns_wire_name(domain: str) -> bytes:
  "Length-prefixed label encoding of a domain, as it appears in a query"

  labels = [label for label in domain.strip(".").split(".") if label]
  return b"".join(bytes([len(label)]) + label.encode("ascii") for label in labels) + b"\x00"


# flows

def tls_flow(sni: str, index: int = 0, seed: int = 0, server_port: int = 443) -> Frames:
  return tcp_flow(flow_for(index, server_port, seed), [client_hello(sni, seed + index)])

def random_flow(index: int = 0, seed: int = 0, packets: int = 3, length: int = 400,
                server_port: int = 443) -> Frames:
  "Data segments of random bytes, as a fully encrypted protocol would send"

  flow = flow_for(index, server_port, seed)
  payloads = [random_payload(length, seed * 1000003 + index * 101 + i) for i in range(packets)]
  return tcp_flow(flow, payloads)

def printable_flow(index: int = 0, seed: int = 0, packets: int = 3, length: int = 400,
                   server_port: int = 443) -> Frames:
  flow = flow_for(index, server_port, seed)
  payloads = [printable_payload(length, seed * 1000003 + index * 101 + i) for i in range(packets)]
  return tcp_flow(flow, payloads)

def http_flow(words: Sequence[str], index: int = 0, seed: int = 0, host: str = "example.org") -> Frames:
  return tcp_flow(flow_for(index, 80, seed), [http_get(words, host)])

def counted_flow(packets: int, index: int = 0, seed: int = 0, server_port: int = 443,
                 payload: bytes = b"x") -> Frames:
  "A flow of exactly `packets` client data segments, no handshake"

  return tcp_flow(flow_for(index, server_port, seed), [payload] * packets, handshake = False)

def length_flow(lengths: Sequence[int], index: int = 0, seed: int = 0, server_port: int = 443) -> Frames:
  "Client data segments of the given payload lengths, no handshake"

  return tcp_flow(flow_for(index, server_port, seed), [b"a" * length for length in lengths], handshake = False)

def opening_payload_flow(first_length: int, index: int = 0, seed: int = 0, printable: bool = False,
                         packets: int = 3, length: int = 400, server_port: int = SHADOWSOCKS_PORT) -> Frames:
  """
  A proxied-looking flow: the first data segment carries first_length random
  (or printable) bytes, the remaining ones random bytes of the given length.
  """

  base = seed * 1000003 + index * 101
  opening = (printable_payload if printable else random_payload)(first_length, base)
  payloads = [opening] + [random_payload(length, base + i) for i in range(1, packets)]
  return tcp_flow(flow_for(index, server_port, seed), payloads)

def wireguard_flow(index: int = 0, seed: int = 0, transport_packets: int = 2) -> Frames:
  "Handshake initiation and response, then transport data messages"

  rng = random.Random(f"{seed}:{index}:wireguard")
  initiation = b"\x01\x00\x00\x00" + rng.randbytes(144)
  response = b"\x02\x00\x00\x00" + rng.randbytes(88)
  transport = [b"\x04\x00\x00\x00" + rng.randbytes(60) for _ in range(transport_packets)]
  return udp_exchange(flow_for(index, WIREGUARD_PORT, seed), [initiation] + transport, [response])

def opaque_udp_flow(index: int = 0, seed: int = 0, packets: int = 3, length: int = 120,
                    server_port: int = WIREGUARD_PORT) -> Frames:
  "Random datagrams whose first byte has the two high bits set, like QUIC long headers"

  rng = random.Random(f"{seed}:{index}:udp")
  payloads = [bytes([0xC0 | rng.getrandbits(6)]) + rng.randbytes(length - 1) for _ in range(packets)]
  return udp_exchange(flow_for(index, server_port, seed), payloads)

def dns_flow(domain: str, index: int = 0, seed: int = 0, qtype: str = "A",
             resolver: str = "8.8.8.8") -> Frames:
  flow = flow_for(index, 53, seed, resolver)
  txid = random.Random(f"{seed}:{index}:dns").getrandbits(16)
  return udp_exchange(flow, [dns_query(domain, qtype, txid)])


def timestamped(frames: Iterable[bytes], start: float = 0.0, step: float = 0.001) -> List[Tuple[float, bytes]]:
  return [(start + i * step, frame) for i, frame in enumerate(frames)]

def write_capture(path: str, flows: Iterable[Frames], start: float = 0.0, step: float = 0.001):
  "Writes flows back to back into a PCAP file, one frame every `step` seconds"

  frames = [frame for flow in flows for frame in flow]
  write_frames(path, timestamped(frames, start, step), LINKTYPE_ETHERNET)

