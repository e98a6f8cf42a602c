import threading
import time

import dpkt
import pytest

import traffic_builders as builders
from actions import ACCEPT, DROP, Action, ActionKind
from common_functions import pack_ip
from config import parse_config
from engine import (
  Endpoint,
  EventLog,
  EventRecord,
  VerdictSource,
  WireSimSession,
  make_rst_frames,
  make_rst_pair,
  read_capture,
  replay_wire_sim,
  run_pcap,
  write_frames,
)
from error_handler import BadCapture, BadConfig, EngineError, NotTcp
from filters import IdentifierClass, ListKind
from flows import OverrideKind, connection_key
from ipc import dispatch
from packet import LINKTYPE_ETHERNET, LINKTYPE_RAW, PROTO_TCP, TCP_ACK, TCP_PSH, Direction, parse_packet, transport_checksum

CLIENT, SERVER = "10.0.0.2", "93.184.216.34"

BY_LENGTH = """\
process:
if field:payload.len == 1: RETURN drop
if field:payload.len == 2: RETURN RESET(1)
if field:payload.len == 3: RETURN delay:0.2
"""


class FakeClock:
  def __init__(self, now = 0.0):
    self.now = now

  def __call__(self):
    return self.now


def _frame(payload = b"", src = CLIENT, dst = SERVER, sport = 40000, dport = 443, seq = 1000, ack = 500):
  return builders.tcp_frame(src, dst, sport, dport, seq, ack, TCP_PSH | TCP_ACK, payload)

def _reply(payload = b""):
  return _frame(payload, SERVER, CLIENT, 443, 40000, 500, 1000)


# pipeline

def test_l3_blocklist_short_circuits(engine_factory):
  config = parse_config({"blocklist": {"ip": {"action": "drop", "entries": [SERVER]}}})
  engine = engine_factory("process:\nRETURN reset(1)", config)
  verdict = engine.process_packet(_frame(b"x"))

  assert verdict.action == DROP
  assert verdict.source == VerdictSource.L3_LIST
  assert engine.counters["parsed_l4"] == 0
  assert engine.counters["program"] == 0
  assert verdict.injected_frames == []

def test_l2_blocklist(engine_factory):
  config = parse_config({"blocklist": {"mac": {"entries": ["02:00:00:00:00:01"]}}})
  verdict = engine_factory(None, config).process_packet(_frame())

  assert verdict.source == VerdictSource.L2_LIST
  assert verdict.action == DROP

def test_no_program_accepts(engine_factory):
  verdict = engine_factory().process_packet(_frame(b"x"))

  assert verdict.action == ACCEPT
  assert verdict.forwards

def test_allow_all_exempts_connection(engine_factory):
  engine = engine_factory("process:\nINC reg:u32:0\nRETURN ALLOW_ALL")
  first = engine.process_packet(_frame(b"x"), timestamp = 0.0)
  second = engine.process_packet(_reply(b"y"), timestamp = 0.1)

  assert first.source == VerdictSource.PROGRAM
  assert second.source == VerdictSource.CONNECTION_OVERRIDE
  assert second.action == ACCEPT
  assert engine.counters["program"] == 1
  state = engine.flows.get(connection_key(parse_packet(_frame())))
  assert state.verdict_override.kind == OverrideKind.EXEMPT

def test_drop_all_condemns_connection(engine_factory):
  engine = engine_factory("process:\nif field:payload.len > 0: RETURN DROP_ALL")
  verdicts = [
    engine.process_packet(_frame(), timestamp = 0.0),
    engine.process_packet(_frame(b"x"), timestamp = 0.1),
    engine.process_packet(_reply(), timestamp = 0.2),
  ]

  assert [v.action.kind for v in verdicts] == [ActionKind.ACCEPT, ActionKind.DROP, ActionKind.DROP]
  assert verdicts[2].source == VerdictSource.L4_LIST
  key = connection_key(parse_packet(_frame()))
  assert key in engine.condemned
  assert not engine.filters.get(ListKind.BLOCK, IdentifierClass.TCP_CONNECTION).contains(key)
  assert engine.flows.get(key).verdict_override.kind == OverrideKind.CONDEMNED
  assert engine.stats()["condemned"] == 1

def test_program_load_forgives_condemned_connections(tmp_path, engine_factory):
  engine = engine_factory("process:\nif field:payload.len > 5: RETURN DROP_ALL")
  assert engine.process_packet(_frame(b"x" * 9), timestamp = 0.0).action == DROP
  assert engine.process_packet(_frame(b"y"), timestamp = 0.1).source == VerdictSource.L4_LIST

  path = tmp_path / "accept.cl"
  path.write_text("process:\nRETURN accept")
  engine.load_program_file(str(path))
  verdict = engine.process_packet(_frame(b"z" * 9), timestamp = 0.2)

  assert verdict.action == ACCEPT
  assert verdict.source == VerdictSource.PROGRAM
  assert engine.condemned == set()

def test_reset_injects_both_directions(engine_factory):
  engine = engine_factory("process:\nRETURN RESET(2)")
  verdict = engine.process_packet(_frame(b"x" * 10))

  assert verdict.action == Action.reset(2)
  assert not verdict.forwards
  assert len(verdict.injected_frames) == 4
  assert len(verdict.rst_to_receiver) == len(verdict.rst_to_sender) == 2

def test_list_reset_before_transport_parsing(engine_factory):
  config = parse_config({"blocklist": {"ip": {"action": "reset", "entries": [SERVER]}}})
  verdict = engine_factory(None, config).process_packet(_frame(b"x"))

  assert verdict.source == VerdictSource.L3_LIST
  assert len(verdict.injected_frames) == 2

def test_reset_on_udp_drops_without_rst(engine_factory):
  engine = engine_factory("process:\nRETURN RESET(1)")
  verdict = engine.process_packet(builders.udp_frame(CLIENT, "8.8.8.8", 5000, 53, b"q"))

  assert verdict.action.kind == ActionKind.RESET
  assert verdict.injected_frames == []
  assert any(record.event == "fault" for record in verdict.log_events)

def test_unparsed_and_non_ip_frames_are_accepted(engine_factory):
  engine = engine_factory("process:\nRETURN drop")
  truncated = engine.process_packet(b"\x00" * 8)
  lldp = engine.process_packet(bytes(12) + b"\x88\xcc" + bytes(40))
  arp = engine.process_packet(
    bytes.fromhex("ffffffffffff020000000001" "0806") + bytes.fromhex("0001080006040001") + bytes(20)
  )

  assert truncated.action == ACCEPT and lldp.action == ACCEPT and arp.action == ACCEPT
  assert engine.counters["unparsed"] == 2
  assert engine.counters["arp"] == 1
  assert any(record.event == "fault" for record in engine.events)

def test_raw_ip_link_type(engine_factory):
  engine = engine_factory("process:\nif field:tcp.dst == 443: RETURN drop")

  assert engine.process_packet(_frame(b"x")[14:], LINKTYPE_RAW).action == DROP

def test_only_reset_injects(engine_factory):
  engine = engine_factory(BY_LENGTH)
  for length in range(5):
    verdict = engine.process_packet(_frame(b"a" * length), timestamp = float(length))
    assert bool(verdict.injected_frames) == (verdict.action.kind == ActionKind.RESET)

def test_event_record_line_format():
  record = EventRecord(1.5, "a:1-b:2/tcp", "program", "drop", "fault", 'said "no"', 99.0)

  assert record.to_line() == 'ts=1.500000 event=fault conn=a:1-b:2/tcp stage=program action=drop fault="said \\"no\\"" wall=99.000000'
  assert record.to_line(include_wall = False).endswith('fault="said \\"no\\""')

def test_event_log_file(tmp_path):
  path = tmp_path / "events.log"
  log = EventLog(str(path))
  log.append(EventRecord(2.0, "-", "default", "accept", "fault", "bad frame", 0.0))

  assert path.read_text().startswith("ts=2.000000 event=fault conn=-")
  assert len(log) == 1
  assert log.lines() == ['ts=2.000000 event=fault conn=- stage=default action=accept fault="bad frame"']


# rst synthesis

def test_rst_sequence_numbers():
  packet = parse_packet(_frame(b"a" * 100, seq = 1000, ack = 500))
  to_receiver, to_sender = make_rst_pair(packet, 1)
  receiver, sender = parse_packet(to_receiver[0]), parse_packet(to_sender[0])

  assert receiver.ip.src_ip == pack_ip(CLIENT) and receiver.l4.dst_port == 443
  assert receiver.l4.seq == 1100 and receiver.l4.ack == 500
  assert sender.ip.src_ip == pack_ip(SERVER) and sender.l4.dst_port == 40000
  assert sender.l4.seq == 500 and sender.l4.ack == 1100
  assert sender.eth.dst_mac == packet.eth.src_mac
  for rst in (receiver, sender):
    assert rst.l4.flags.rst
    assert rst.ip.checksum_ok()
    assert transport_checksum(rst.ip.src_ip, rst.ip.dst_ip, PROTO_TCP, rst.ip.payload) == 0

def test_rst_counts_and_errors():
  packet = parse_packet(_frame(b"x"))

  assert len(make_rst_frames(packet, 3)) == 6
  with pytest.raises(NotTcp):
    make_rst_frames(parse_packet(builders.udp_frame(CLIENT, SERVER, 1, 2, b"")), 1)

def test_rst_for_raw_ip_has_no_link_header():
  packet = parse_packet(_frame(b"x")[14:], LINKTYPE_RAW)
  frame = make_rst_frames(packet, 1)[0]

  assert parse_packet(frame, LINKTYPE_RAW).l4.flags.rst


# pcap mode

def _capture(tmp_path, frames, link_type = LINKTYPE_ETHERNET, name = "capture.pcap"):
  path = str(tmp_path / name)
  write_frames(path, frames, link_type)
  return path

def test_pcap_logs_without_interfering(tmp_path, engine_factory):
  program = "process:\nINC reg:u32:0\nif reg:u32:0 == 2: RETURN drop"
  path = _capture(tmp_path, [(0.0, _frame(b"a")), (0.1, _frame(b"b")), (0.2, _frame(b"c"))])
  engine = engine_factory(program)
  events = run_pcap(engine, path)

  verdicts = [record for record in events if record.event == "verdict"]
  assert len(verdicts) == 1
  assert verdicts[0].action == "drop" and verdicts[0].timestamp == pytest.approx(0.1)
  assert engine.counters["packets"] == 3

def test_pcap_delay_release_logged_before_later_packet(tmp_path, engine_factory):
  program = "process:\nINC reg:u32:0\nif reg:u32:0 == 1: RETURN delay:1.0\nif reg:u32:0 == 3: RETURN drop"
  path = _capture(tmp_path, [(0.0, _frame(b"a")), (0.5, _frame(b"b")), (1.5, _frame(b"c"))])
  events = list(run_pcap(engine_factory(program), path))

  assert [(record.event, record.action) for record in events] == [
    ("verdict", "delay:1"), ("delay-release", "delay:1"), ("verdict", "drop"),
  ]
  assert events[1].timestamp == pytest.approx(1.0)

def test_pcap_delay_pending_at_end(tmp_path, engine_factory):
  path = _capture(tmp_path, [(0.0, _frame(b"a")), (0.5, _frame(b"b"))])
  events = list(run_pcap(engine_factory("process:\nRETURN delay:5"), path))

  assert [record.event for record in events] == ["verdict", "verdict", "delay-release", "delay-release"]

def test_pcap_time_emulation_paces_replay(tmp_path, engine_factory):
  program = "process:\nINC reg:u32:0\nif reg:u32:0 == 1: RETURN delay:1.0"
  path = _capture(tmp_path, [(10.0, _frame(b"a")), (10.5, _frame(b"b")), (11.5, _frame(b"c"))])
  sleeps = []
  run_pcap(engine_factory(program), path, time_emulation = True, sleep = sleeps.append, clock = lambda: 0.0)

  assert sleeps == pytest.approx([0.5, 1.0, 1.5])

def test_pcap_replay_stops_at_shutdown(tmp_path, engine_factory):
  engine = engine_factory("process:\nRETURN delay:10")
  path = _capture(tmp_path, builders.timestamped(builders.counted_flow(5), step = 1.0))

  def shutdown_during_gap(seconds):
    engine.submit(dispatch, engine, ["shutdown"])
  events = run_pcap(engine, path, time_emulation = True, sleep = shutdown_during_gap, clock = lambda: 0.0)

  assert not engine.running
  assert engine.counters["packets"] == 2
  assert [record.event for record in events] == ["verdict", "verdict"]

def test_pcap_is_deterministic(tmp_path, engine_factory, packet_count_program):
  frames = builders.timestamped(builders.counted_flow(15) + builders.counted_flow(12, index = 1))
  path = _capture(tmp_path, frames)
  first = run_pcap(engine_factory(packet_count_program), path)
  second = run_pcap(engine_factory(packet_count_program), path)

  assert first.lines() == second.lines()
  assert len([line for line in first.lines() if "action=drop" in line]) == 7

def test_pcap_empty_and_raw(tmp_path, engine_factory):
  assert len(run_pcap(engine_factory("process:\nRETURN drop"), _capture(tmp_path, [], name = "empty.pcap"))) == 0

  raw = _capture(tmp_path, [(0.0, _frame(b"x")[14:])], LINKTYPE_RAW, "raw.pcap")
  assert [record.action for record in run_pcap(engine_factory("process:\nRETURN drop"), raw)] == ["drop"]

def test_pcapng_is_read(tmp_path):
  path = tmp_path / "capture.pcapng"
  with open(path, "wb") as f:
    writer = dpkt.pcapng.Writer(f, linktype = LINKTYPE_ETHERNET)
    writer.writepkt(_frame(b"x"), ts = 1.0)

  frames = list(read_capture(str(path)))
  assert len(frames) == 1
  assert frames[0][2] == LINKTYPE_ETHERNET

def test_bad_captures(tmp_path):
  with pytest.raises(BadCapture):
    list(read_capture(str(tmp_path / "missing.pcap")))
  garbage = tmp_path / "garbage.pcap"
  garbage.write_bytes(b"this is not a capture file at all")
  with pytest.raises(BadCapture):
    list(read_capture(str(garbage)))


# wire-sim mode

def _session(engine, clock = None):
  a, b = Endpoint("a"), Endpoint("b")
  return WireSimSession(engine, a, b, clock = clock or FakeClock(), threaded = False), a, b

def test_wire_sim_actions_and_conservation(engine_factory):
  clock = FakeClock()
  session, a, b = _session(engine_factory(BY_LENGTH), clock)

  accepted = session.ingest(_frame(), from_a = True)
  assert b.received() == [_frame()] and a.received() == []
  assert accepted.packet.iface_direction == Direction.EGRESS

  session.ingest(_frame(b"x"), from_a = True)
  assert len(b.received()) == 1

  session.ingest(_frame(b"xx"), from_a = True)
  assert len(b.received()) == 2 and len(a.received()) == 1
  assert parse_packet(a.received()[0]).l4.flags.rst
  assert session.conserved()

  session.ingest(_frame(b"xxx"), from_a = True)
  assert session.pending_delays == 1 and session.conserved()
  clock.now = 0.1
  session.pump()
  assert session.pending_delays == 1
  clock.now = 0.25
  session.pump()
  assert session.pending_delays == 0
  assert b.received()[-1] == _frame(b"xxx")
  assert b.received_at()[-1][0] >= 0.2
  assert session.conserved()
  assert session.counters["ingested"] == 4 and session.counters["injected"] == 2

def test_wire_sim_pump_and_ingress(engine_factory):
  session, a, b = _session(engine_factory())
  a.send(_frame(b"1"))
  b.send(_reply(b"2"))

  assert session.pump() == 2
  assert b.received() == [_frame(b"1")]
  assert a.received() == [_reply(b"2")]
  assert session.conserved()

def test_wire_sim_real_delay(engine_factory):
  a, b = Endpoint("a"), Endpoint("b")
  session = WireSimSession(engine_factory("process:\nRETURN delay:0.2"), a, b)
  start = time.monotonic()
  session.ingest(_frame(b"late"), from_a = True)

  deadline = start + 3.0
  while not b.received() and time.monotonic() < deadline:
    time.sleep(0.01)
  session.close()
  assert b.received() == [_frame(b"late")]
  assert b.received_at()[0][0] - start >= 0.2 - 0.01
  assert session.conserved()

def test_replay_wire_sim_writes_outputs(tmp_path, engine_factory):
  frames = builders.timestamped(builders.tcp_flow(builders.FlowSpec(), [b"hello"]))
  path = _capture(tmp_path, frames)
  out_a, out_b = str(tmp_path / "a.pcap"), str(tmp_path / "b.pcap")
  session = replay_wire_sim(engine_factory("process:\nif field:payload.len > 0: RETURN drop"), path, out_a, out_b)

  assert session.counters["ingested"] == 4
  assert session.counters["dropped"] == 1
  assert len(list(read_capture(out_b))) == 2
  assert len(list(read_capture(out_a))) == 1

def test_replay_wire_sim_stops_at_shutdown(tmp_path, engine_factory):
  path = _capture(tmp_path, builders.timestamped(builders.counted_flow(6)))
  engine = engine_factory()
  engine.submit(dispatch, engine, ["shutdown"])
  session = replay_wire_sim(engine, path)

  assert session.counters["ingested"] == 1
  assert session.conserved()


# control plane

def test_control_mutations_apply_at_packet_boundary(engine_factory):
  engine = engine_factory()
  future = engine.submit(engine.filters.configure, ListKind.BLOCK, IdentifierClass.TCP_PORT, "drop", [443])

  assert not future.done()
  verdict = engine.process_packet(_frame(b"x"))
  assert future.done()
  assert verdict.action == DROP

def test_control_loop_and_shutdown(engine_factory):
  engine = engine_factory()
  thread = threading.Thread(target = engine.control_loop, daemon = True)
  thread.start()

  assert engine.call(lambda: 41 + 1) == 42
  engine.call(engine.shutdown)
  assert engine.stopped.wait(2.0)
  thread.join(2.0)
  assert not engine.running

def test_call_timeout_withdraws_queued_work(engine_factory):
  engine = engine_factory()
  ran = []

  with pytest.raises(TimeoutError):
    engine.call(ran.append, 1, timeout = 0.01)
  assert engine.drain_control() == 0
  assert ran == []

def test_control_errors_reach_the_caller(engine_factory):
  engine = engine_factory()
  future = engine.submit(engine.models.remove, "nope")
  engine.drain_control()

  with pytest.raises(Exception):
    future.result(0)

def _write_config(tmp_path, program, entries):
  (tmp_path / "p.cl").write_text(program)
  path = tmp_path / "censor.toml"
  quoted = ", ".join(f'"{entry}"' for entry in entries)
  path.write_text(f'[program]\npath = "p.cl"\n\n[blocklist.ip]\nentries = [{quoted}]\n')
  return str(path)

def test_reload_restores_config_and_clears_state(tmp_path):
  from engine import Engine

  path = _write_config(tmp_path, "process:\nif field:payload.len > 0: RETURN DROP_ALL", ["192.0.2.1"])
  engine = Engine.from_config(path, event_log = EventLog())
  engine.filters.configure(ListKind.BLOCK, IdentifierClass.IP, None, ["192.0.2.2"])
  engine.process_packet(_frame(b"x"), timestamp = 0.0)
  assert engine.process_packet(_reply(), timestamp = 0.1).action == DROP

  engine.reload()
  assert engine.filters.get(ListKind.BLOCK, IdentifierClass.IP).list_entries() == ["192.0.2.1"]
  assert len(engine.flows) == 0
  verdict = engine.process_packet(_reply(), timestamp = 0.2)
  assert verdict.action == ACCEPT and verdict.source == VerdictSource.PROGRAM
  assert engine.condemned == set()

def test_reload_failure_keeps_state(tmp_path):
  from engine import Engine

  path = _write_config(tmp_path, "process:\nRETURN drop", ["192.0.2.1"])
  engine = Engine.from_config(path, event_log = EventLog())
  program = engine.program
  (tmp_path / "censor.toml").write_text("[blocklist.ip\n")

  with pytest.raises(BadConfig):
    engine.reload()
  assert engine.program is program
  assert engine.filters.get(ListKind.BLOCK, IdentifierClass.IP).list_entries() == ["192.0.2.1"]

def test_load_program_clears_connections(tmp_path, engine_factory):
  engine = engine_factory("process:\nRETURN accept")
  engine.process_packet(_frame(b"x"))
  path = tmp_path / "drop.cl"
  path.write_text("process:\nRETURN drop")

  engine.load_program_file(str(path))
  assert len(engine.flows) == 0
  assert engine.process_packet(_frame(b"x")).action == DROP
  with pytest.raises(EngineError):
    engine.load_program_file(str(path), "python")

def test_debug_dump_and_stats(engine_factory):
  engine = engine_factory("process:\nINC reg:u32:0")
  engine.process_packet(_frame(b"x"), timestamp = 1.0)
  engine.process_packet(_reply(b"y"), timestamp = 2.0)

  dump = engine.debug_dump(CLIENT, SERVER, 40000, 443, "tcp")
  assert dump["packets"] == 2
  assert dump["initiator"] == f"{CLIENT}:40000"
  assert dump["registers"] == {"reg:u32:0": "2"}
  assert engine.debug_dump(CLIENT, SERVER, 1, 2, "udp") is None

  stats = engine.stats()
  assert stats["connections"] == 1
  assert stats["packets"] == 2
  assert stats["action.accept"] == 2

def test_service_exemption_bypasses_program(engine_factory):
  engine = engine_factory("process:\nRETURN drop")
  engine.exempt_service(SERVER, 443, PROTO_TCP)

  assert engine.process_packet(_frame(b"x")).action == ACCEPT
  assert engine.counters["program"] == 0
