"""
Runtime control over a loopback TCP line protocol.

Requests are one UTF-8 line of at most 4096 bytes, the client's arguments
joined by single spaces. Responses:

  OK
  OK <n>            followed by n lines and a blank line
  ERR <code> <message>

Commands:
  shutdown
  reload
  allowlist|blocklist action <class> <action>
  allowlist|blocklist add|remove <class> <args...>
  allowlist|blocklist list <class>
  program load censorlang <path>
  program info
  debug dump <ip> <ip> <port> <port> <tcp|udp>
  debug stats
  model add <name> <path>
  model remove <name>
  model list
"""

import ipaddress
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence

from actions import parse_action
from censorlang import analyze
from common_functions import get_logger
from config import DEFAULT_IPC_PORT
from error_handler import BindFailed, CensorLabError, IpcError, IpcParseError
from filters import ListKind, identifier_class, parse_identifier
from flows import PROTO_NUMBERS
from packet import PROTO_TCP

logger = get_logger(__name__, "ipc.log")

DEFAULT_PORT = DEFAULT_IPC_PORT
MAX_LINE = 4096
CONTROL_TIMEOUT = 5.0

NOT_FOUND = "not-found"


class NotFound(CensorLabError):
  code = NOT_FOUND


@dataclass
class IpcResponse:
  ok: bool
  lines: List[str] = field(default_factory = list)
  code: str = ""
  message: str = ""

  def encode(self) -> bytes:
    if not self.ok:
      return f"ERR {self.code} {_one_line(self.message)}\n".encode("utf-8")
    if not self.lines:
      return b"OK\n"
    body = "".join(_one_line(line) + "\n" for line in self.lines)
    return f"OK {len(self.lines)}\n{body}\n".encode("utf-8")


def _one_line(text: str) -> str:
  return str(text).replace("\r", " ").replace("\n", " ")

def ok(lines: Optional[List[str]] = None) -> IpcResponse:
  return IpcResponse(True, list(lines or []))

def error(code: str, message: str) -> IpcResponse:
  return IpcResponse(False, code = code, message = message)


def _list_kind(word: str) -> ListKind:
  return ListKind.ALLOW if word == "allowlist" else ListKind.BLOCK

def _need(args: Sequence[str], count: int, usage: str):
  if len(args) < count:
    raise IpcParseError(f"usage: {usage}")

def _exact(args: Sequence[str], count: int, usage: str):
  if len(args) != count:
    raise IpcParseError(f"usage: {usage}")


def _list_command(engine, verb: str, args: List[str]) -> IpcResponse:
  _need(args, 2, f"{verb} action|add|remove|list <class> ...")
  sub, cls = args[0].lower(), identifier_class(args[1])
  filter_list = engine.filters.get(_list_kind(verb), cls)
  rest = args[2:]
  if sub == "action":
    _exact(rest, 1, f"{verb} action <class> <action>")
    try:
      action = parse_action(rest[0])
    except ValueError as e:
      raise IpcParseError(str(e)) from None
    filter_list.set_action(action)
    return ok()
  if sub == "add":
    filter_list.add(parse_identifier(cls, rest))
    return ok()
  if sub == "remove":
    if not filter_list.remove(parse_identifier(cls, rest)):
      raise NotFound(f"{' '.join(rest)} is not on the {cls} {verb}")
    return ok()
  if sub == "list":
    _exact(rest, 0, f"{verb} list <class>")
    return ok(filter_list.list_entries())
  raise IpcParseError(f"unknown {verb} command {sub!r}")

def _program_command(engine, args: List[str]) -> IpcResponse:
  _need(args, 1, "program load <language> <path> | program info")
  sub = args[0].lower()
  if sub == "load":
    _exact(args, 3, "program load censorlang <path>")
    language, path = args[1].lower(), args[2]
    if language != "censorlang":
      raise IpcParseError(f"language {language!r} is not supported; load censorlang programs")
    engine.load_program_file(path, language)
    return ok()
  if sub == "info":
    if engine.program is None:
      raise NotFound("no program loaded")
    report = analyze(engine.program, engine.config.cost_table, engine.models.shapes())
    return ok(report.to_lines())
  raise IpcParseError(f"unknown program command {sub!r}")

def _debug_command(engine, args: List[str]) -> IpcResponse:
  _need(args, 1, "debug dump <ip> <ip> <port> <port> <proto> | debug stats")
  sub = args[0].lower()
  if sub == "stats":
    return ok([f"{name}={value}" for name, value in engine.stats().items()])
  if sub == "dump":
    _exact(args, 6, "debug dump <ip> <ip> <port> <port> <tcp|udp>")
    ip_a, ip_b, port_a, port_b, proto = args[1:]
    if proto.lower() not in PROTO_NUMBERS:
      raise IpcParseError(f"protocol must be tcp or udp, not {proto!r}")
    try:
      snapshot = engine.debug_dump(ip_a, ip_b, int(port_a), int(port_b), proto)
    except ValueError as e:
      raise IpcParseError(f"bad connection tuple: {e}") from None
    if snapshot is None:
      raise NotFound(f"no connection {ip_a}:{port_a} {ip_b}:{port_b}/{proto}")
    registers = snapshot.pop("registers")
    lines = [f"{name}={value}" for name, value in snapshot.items()]
    lines += [f"{name}={value}" for name, value in registers.items()]
    return ok(lines)
  raise IpcParseError(f"unknown debug command {sub!r}")

def _model_command(engine, args: List[str]) -> IpcResponse:
  _need(args, 1, "model add <name> <path> | model remove <name> | model list")
  sub = args[0].lower()
  if sub == "add":
    _exact(args, 3, "model add <name> <path>")
    engine.models.load(args[1], args[2])
    return ok()
  if sub == "remove":
    _exact(args, 2, "model remove <name>")
    engine.models.remove(args[1])
    return ok()
  if sub == "list":
    return ok([f"{name} {inputs} {outputs} {backend}" for name, inputs, outputs, backend in engine.models.list()])
  raise IpcParseError(f"unknown model command {sub!r}")


def dispatch(engine, tokens: List[str]) -> IpcResponse:
  verb, args = tokens[0].lower(), tokens[1:]
  if verb == "shutdown":
    _exact(args, 0, "shutdown")
    engine.shutdown()
    return ok()
  if verb == "reload":
    _exact(args, 0, "reload")
    engine.reload()
    return ok()
  if verb in ("allowlist", "blocklist"):
    return _list_command(engine, verb, args)
  if verb == "program":
    return _program_command(engine, args)
  if verb == "debug":
    return _debug_command(engine, args)
  if verb == "model":
    return _model_command(engine, args)
  raise IpcParseError(f"unknown command {tokens[0]!r}")


def handle_command(engine, line: str, inline: bool = False, timeout: float = CONTROL_TIMEOUT) -> IpcResponse:
  """
  Parses and runs one request line. The command runs on the engine's
  control queue, so it is applied between packets, unless inline is set,
  in which case it runs directly under the engine lock. A command still
  queued after timeout seconds is withdrawn and answered with ERR io.
  """

  if len(line.encode("utf-8")) > MAX_LINE:
    return error("parse", f"line longer than {MAX_LINE} bytes")
  tokens = line.split()
  if not tokens:
    return error("parse", "empty command")
  try:
    if inline:
      with engine._lock:
        response = dispatch(engine, tokens)
    else:
      response = engine.call(dispatch, engine, tokens, timeout = timeout)
  except CensorLabError as e:
    logger.warning(f"{line.strip()!r}: ERR {e.code} {e}")
    return error(e.code, str(e))
  except (OSError, TimeoutError) as e:
    logger.warning(f"{line.strip()!r}: ERR io {e}")
    return error("io", str(e))
  except ValueError as e:
    return error("parse", str(e))
  except Exception as e:
    logger.error(f"{line.strip()!r}: unexpected {type(e).__name__}: {e}", exc_info = True)
    return error("io", f"internal error: {e}")
  logger.info(f"{line.strip()!r}: OK")
  return response


class _RequestHandler(socketserver.StreamRequestHandler):

  def handle(self):
    server: IpcServer = self.server
    while True:
      raw = self.rfile.readline(MAX_LINE + 1)
      if not raw:
        return
      if len(raw) > MAX_LINE and not raw.endswith(b"\n"):
        while raw and not raw.endswith(b"\n"):
          raw = self.rfile.readline(MAX_LINE + 1)
        self.wfile.write(error("parse", f"line longer than {MAX_LINE} bytes").encode())
        continue
      try:
        line = raw.decode("utf-8")
      except UnicodeDecodeError:
        self.wfile.write(error("parse", "request is not UTF-8").encode())
        continue
      response = handle_command(server.engine, line, server.inline)
      self.wfile.write(response.encode())
      self.wfile.flush()
      if response.ok and line.split()[:1] == ["shutdown"]:
        server.stop_async()
        return


class IpcServer(socketserver.ThreadingTCPServer):
  allow_reuse_address = True
  daemon_threads = True

  def __init__(self, engine, bind: str = "127.0.0.1", port: int = DEFAULT_PORT, inline: bool = False):
    self.engine = engine
    self.inline = inline
    self._thread: Optional[threading.Thread] = None
    super().__init__((bind, port), _RequestHandler)

  @property
  def address(self):
    return self.server_address[0], self.server_address[1]

  def start(self):
    self._thread = threading.Thread(target = self.serve_forever, name = "ipc", daemon = True)
    self._thread.start()

  def stop_async(self):
    threading.Thread(target = self.close, name = "ipc-stop", daemon = True).start()

  def close(self):
    self.shutdown()
    self.server_close()
    logger.info("IPC server stopped")


def serve(engine, bind_addr: str = "127.0.0.1", port: int = DEFAULT_PORT, inline: bool = False) -> IpcServer:
  """
  Starts the control server on a loopback address and exempts its own
  service from packet processing.

  Raises:
    BindFailed: the address is not loopback or the port is taken.
  """

  try:
    if not ipaddress.ip_address(bind_addr).is_loopback:
      raise BindFailed(f"IPC only binds loopback addresses, not {bind_addr}")
  except ValueError:
    raise BindFailed(f"not an IP address: {bind_addr}") from None
  try:
    server = IpcServer(engine, bind_addr, port, inline)
  except OSError as e:
    raise BindFailed(f"cannot bind {bind_addr}:{port}: {e}") from None
  host, bound_port = server.address
  engine.exempt_service(host, bound_port, PROTO_TCP)
  server.start()
  logger.info(f"IPC listening on {host}:{bound_port}")
  return server


class IpcClient:
  """
  Client for the control protocol. Each request opens a connection.

  Raises ConnectionRefusedError when no daemon listens.
  """

  def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 10.0):
    self.host = host
    self.port = port
    self.timeout = timeout

  def request(self, *tokens: Any) -> IpcResponse:
    line = " ".join(str(token) for token in tokens)
    with socket.create_connection((self.host, self.port), timeout = self.timeout) as sock:
      sock.sendall(line.encode("utf-8") + b"\n")
      reader = sock.makefile("rb")
      header = reader.readline().decode("utf-8").rstrip("\n")
      if header.startswith("ERR"):
        parts = header.split(" ", 2)
        return IpcResponse(False, code = parts[1] if len(parts) > 1 else "", message = parts[2] if len(parts) > 2 else "")
      if not header.startswith("OK"):
        raise IpcError(f"malformed response {header!r}")
      count = int(header[3:]) if len(header) > 3 else 0
      lines = [reader.readline().decode("utf-8").rstrip("\n") for _ in range(count)]
      if count:
        reader.readline()
      return IpcResponse(True, lines)

  def _checked(self, *tokens: Any) -> List[str]:
    response = self.request(*tokens)
    if not response.ok:
      raise IpcError(f"{response.code}: {response.message}")
    return response.lines

  def shutdown(self):
    self._checked("shutdown")

  def reload(self):
    self._checked("reload")

  def add(self, kind: str, cls: str, *args: Any):
    self._checked(kind, "add", cls, *args)

  def remove(self, kind: str, cls: str, *args: Any):
    self._checked(kind, "remove", cls, *args)

  def set_action(self, kind: str, cls: str, action: str):
    self._checked(kind, "action", cls, action)

  def list_entries(self, kind: str, cls: str) -> List[str]:
    return self._checked(kind, "list", cls)

  def load_program(self, path: str, language: str = "censorlang"):
    self._checked("program", "load", language, path)

  def program_info(self) -> List[str]:
    return self._checked("program", "info")

  def dump(self, ip_a: str, ip_b: str, port_a: int, port_b: int, proto: str) -> List[str]:
    return self._checked("debug", "dump", ip_a, ip_b, port_a, port_b, proto)

  def stats(self) -> List[str]:
    return self._checked("debug", "stats")

  def model_add(self, name: str, path: str):
    self._checked("model", "add", name, path)

  def model_remove(self, name: str):
    self._checked("model", "remove", name)

  def model_list(self) -> List[str]:
    return self._checked("model", "list")
