"""
CensorLang: a loop-free, register-based language for per-connection censor
programs.

A program is a list of statements separated by newlines or `;`. Everything
before the `process:` label runs once when a connection's environment is
created; everything after it runs for every packet of the connection. A
statement is an operation, optionally guarded by `if <condition>:`. The guard
controls exactly one operation, written either after the colon or as the next
statement.

    REGEX tls = "^[\\x16\\x17]\\x03[\\x00-\\x09]"
    COPY reg:u32:0 0
    process:
    if reg:u32:0 GEQ 10:
      RETURN DROP
    INC reg:u32:0

Statements are parsed once into an immutable Program and compiled to
closures, so per-packet execution does no parsing.
"""

import functools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np
import regex
from strenum import StrEnum

from actions import ACCEPT, DROP, Action, Escalation, parse_action
from common_functions import get_logger, read_text_file
from error_handler import (
  CensorLabError,
  CensorLangSyntaxError,
  MissingProcessLabel,
  ModelNotLoaded,
  UnknownField,
)
from flows import ConnectionState, HostStore, Role, direction
from packet import Direction, ParsedPacket

logger = get_logger(__name__, "censorlang.log")

REGEX_TIMEOUT = 0.05


class RegisterClass(StrEnum):
  REG = "reg"
  SRC = "src"
  DST = "dst"
  MODEL_IN = "model-in"
  MODEL_OUT = "model-out"


class ValueType(StrEnum):
  F32 = "f32"
  F64 = "f64"
  I32 = "i32"
  U32 = "u32"
  I64 = "i64"
  U64 = "u64"
  B = "b"


TYPE_WIDTH = {
  ValueType.F32: 4, ValueType.I32: 4, ValueType.U32: 4,
  ValueType.F64: 8, ValueType.I64: 8, ValueType.U64: 8,
  ValueType.B: 1,
}

ZERO = {
  ValueType.F32: 0.0, ValueType.F64: 0.0,
  ValueType.I32: 0, ValueType.U32: 0, ValueType.I64: 0, ValueType.U64: 0,
  ValueType.B: False,
}

INT_RANGES = {
  ValueType.I32: (-2**31, 2**31 - 1),
  ValueType.U32: (0, 2**32 - 1),
  ValueType.I64: (-2**63, 2**63 - 1),
  ValueType.U64: (0, 2**64 - 1),
}

F32_MAX = float(np.finfo(np.float32).max)

ARITHMETIC = ("ADD", "SUB", "MUL", "DIV", "MOD", "AND", "OR", "XOR")
OPCODES = ("COPY",) + ARITHMETIC + ("RETURN", "MODEL")
SUGAR = {"INC": "ADD", "DEC": "SUB"}

OPERATORS = {
  "<=": "LEQ", "<": "LT", "!=": "NEQ", "==": "EQ", ">=": "GEQ", ">": "GT",
  "LEQ": "LEQ", "LT": "LT", "NEQ": "NEQ", "EQ": "EQ", "GEQ": "GEQ", "GT": "GT",
  "AND": "AND", "OR": "OR", "XOR": "XOR",
}

DEFAULT_COST_TABLE: Dict[str, float] = {op: 1.0 for op in OPCODES}

_JUMP_WORDS = {"JMP", "JUMP", "GOTO", "LOOP", "CALL", "BR", "BRANCH", "WHILE", "FOR"}


# values

def _coerce_int(value: Any, low: int, high: int) -> int:
  if isinstance(value, float):
    if math.isnan(value):
      return 0
    if value >= high:
      return high
    if value <= low:
      return low
    value = int(value)
  return min(max(int(value), low), high)

def _coerce_f32(value: Any) -> float:
  value = float(value)
  if math.isfinite(value) and abs(value) > F32_MAX:
    value = math.copysign(F32_MAX, value)
  return float(np.float32(value))

def coerce(value: Any, value_type: ValueType) -> Any:
  """
  Converts a computed value to a register type by saturating cast. Floats
  are truncated toward zero when written to integer registers; NaN becomes 0.
  """

  if value_type == ValueType.B:
    return bool(value)
  if value_type == ValueType.F64:
    return float(value)
  if value_type == ValueType.F32:
    return _coerce_f32(value)
  low, high = INT_RANGES[value_type]
  return _coerce_int(value, low, high)


# syntax tree

@dataclass(frozen = True, slots = True)
class RegisterRef:
  cls: RegisterClass
  value_type: ValueType
  index: int
  model: Optional[str] = None

  @property
  def key(self) -> Tuple[str, int]:
    return (self.value_type.value, self.index)

  @property
  def width(self) -> int:
    return TYPE_WIDTH[self.value_type]

  def __str__(self) -> str:
    if self.cls == RegisterClass.MODEL_IN:
      return f"model:{self.model}:in:{self.index}"
    if self.cls == RegisterClass.MODEL_OUT:
      return f"model:{self.model}:out:{self.index}"
    return f"{self.cls}:{self.value_type}:{self.index}"


@dataclass(frozen = True, slots = True)
class Literal:
  value: Union[int, float, bool]


@dataclass(frozen = True, slots = True)
class FieldRef:
  name: str


Operand = Union[Literal, FieldRef, RegisterRef]


@dataclass(frozen = True, slots = True)
class Comparison:
  left: Operand
  operator: str
  right: Operand


@dataclass(frozen = True, slots = True)
class RegexMatch:
  name: str


Condition = Union[Comparison, RegexMatch]


@dataclass(frozen = True, slots = True)
class Operation:
  opcode: str
  operands: Tuple[Operand, ...] = ()
  dest: Optional[RegisterRef] = None
  action: Optional[Action] = None
  escalation: Escalation = Escalation.NONE
  model: Optional[str] = None
  line: int = 0


@dataclass(frozen = True, slots = True)
class Statement:
  guard: Optional[Condition]
  operation: Operation
  line: int = 0


@dataclass(eq = False)
class Program:
  init_ops: Tuple[Statement, ...]
  process_ops: Tuple[Statement, ...]
  named_regexes: Dict[str, Any]
  referenced_registers: FrozenSet[RegisterRef]
  referenced_models: FrozenSet[str]
  source: str = ""
  compiled_init: Tuple[Callable, ...] = field(default = (), repr = False)
  compiled_process: Tuple[Callable, ...] = field(default = (), repr = False)

  def model_extent(self, name: str) -> Tuple[int, int]:
    "Number of in/out registers the program touches for a model (highest index + 1)"

    inputs = outputs = 0
    for ref in self.referenced_registers:
      if ref.model != name:
        continue
      if ref.cls == RegisterClass.MODEL_IN:
        inputs = max(inputs, ref.index + 1)
      else:
        outputs = max(outputs, ref.index + 1)
    return inputs, outputs


class ExecOutcome(NamedTuple):
  action: Action
  escalation: Escalation
  faults: Tuple[str, ...] = ()
  ops_executed: int = 0


# packet fields

def _tcp_field(getter: Callable) -> Callable:
  def read(packet: ParsedPacket, state: Optional[ConnectionState]):
    l4 = packet.l4
    if l4 is None or not l4.is_tcp:
      return None
    return getter(l4)
  return read

def _udp_field(getter: Callable) -> Callable:
  def read(packet: ParsedPacket, state: Optional[ConnectionState]):
    l4 = packet.l4
    if l4 is None or l4.is_tcp:
      return None
    return getter(l4)
  return read

def _ip_field(getter: Callable, version: Optional[int] = None) -> Callable:
  def read(packet: ParsedPacket, state: Optional[ConnectionState]):
    ip = packet.ip
    if ip is None or (version is not None and ip.version != version):
      return None
    return getter(ip)
  return read

def _conn_field(getter: Callable) -> Callable:
  def read(packet: ParsedPacket, state: Optional[ConnectionState]):
    if state is None:
      return None
    return getter(packet, state)
  return read

def _direction(packet: ParsedPacket, state: Optional[ConnectionState]) -> Optional[int]:
  if state is None or packet.l4 is None:
    return None
  return 0 if direction(packet, state) == Role.INITIATOR else 1


_IFACE_DIRECTION = {Direction.INGRESS: 0, Direction.EGRESS: 1, Direction.UNKNOWN: 2}

FIELDS: Dict[str, Callable[[ParsedPacket, Optional[ConnectionState]], Any]] = {
  "payload.len": lambda p, s: p.stats.len,
  "payload.popcount": lambda p, s: p.stats.popcount_sum,
  "payload.printable": lambda p, s: p.stats.printable_count,
  "payload.printable_run": lambda p, s: p.stats.printable_run_max,
  "payload.printable_prefix": lambda p, s: p.stats.printable_prefix_len,
  "direction": _direction,
  "tcp.src": _tcp_field(lambda l4: l4.src_port),
  "tcp.dst": _tcp_field(lambda l4: l4.dst_port),
  "tcp.seq": _tcp_field(lambda l4: l4.seq),
  "tcp.ack": _tcp_field(lambda l4: l4.ack),
  "tcp.flags.syn": _tcp_field(lambda l4: l4.flags.syn),
  "tcp.flags.ack": _tcp_field(lambda l4: l4.flags.ack),
  "tcp.flags.fin": _tcp_field(lambda l4: l4.flags.fin),
  "tcp.flags.rst": _tcp_field(lambda l4: l4.flags.rst),
  "tcp.flags.psh": _tcp_field(lambda l4: l4.flags.psh),
  "tcp.flags.urg": _tcp_field(lambda l4: l4.flags.urg),
  "udp.src": _udp_field(lambda l4: l4.src_port),
  "udp.dst": _udp_field(lambda l4: l4.dst_port),
  "udp.len": _udp_field(lambda l4: l4.length),
  "ip.ttl": _ip_field(lambda ip: ip.ttl),
  "ip.version": _ip_field(lambda ip: ip.version),
  "ip.len": _ip_field(lambda ip: ip.total_len),
  "ip.dscp": _ip_field(lambda ip: ip.dscp, 4),
  "ip.ecn": _ip_field(lambda ip: ip.ecn, 4),
  "ip.ipid": _ip_field(lambda ip: ip.ipid, 4),
  "ip.df": _ip_field(lambda ip: ip.dont_frag, 4),
  "ip.mf": _ip_field(lambda ip: ip.more_frags, 4),
  "ip.traffic_class": _ip_field(lambda ip: ip.traffic_class, 6),
  "ip.flow_label": _ip_field(lambda ip: ip.flow_label, 6),
  "iface.direction": lambda p, s: _IFACE_DIRECTION[p.iface_direction],
  "conn.packet_count": _conn_field(lambda p, s: s.packet_count),
  "conn.duration": _conn_field(lambda p, s: p.timestamp - s.created_at),
  "timestamp": lambda p, s: p.timestamp,
}


class PacketView:
  """
  Read-only named fields of one packet in the context of its connection.
  A field that does not exist on the packet reads as None.
  """

  __slots__ = ("packet", "state")

  def __init__(self, packet: Optional[ParsedPacket], state: Optional[ConnectionState] = None):
    self.packet = packet
    self.state = state

  @property
  def payload(self) -> bytes:
    return self.packet.payload if self.packet is not None else b""

  def get(self, name: str) -> Any:
    getter = FIELDS.get(name)
    if getter is None:
      raise UnknownField(f"unknown field: {name}")
    if self.packet is None:
      return None
    return getter(self.packet, self.state)


_NO_PACKET = PacketView(None)


# environment

class Env:
  """
  The registers of one connection.

  Per-connection registers are allocated up front for every (type, index)
  the program names and read as the type's zero until written. src/dst
  registers live in the HostStore and are bound to the packet's addresses
  before each run. Model scratch registers are per referenced model.
  """

  __slots__ = (
    "program", "conn_state", "host_store", "model_store", "registers",
    "src_registers", "dst_registers", "model_in", "model_out", "faults", "init_faults",
  )

  def __init__(self, program: Program, conn_state: Optional[ConnectionState] = None,
               host_store: Optional[HostStore] = None, model_store: Any = None):
    self.program = program
    self.conn_state = conn_state
    self.host_store = host_store
    self.model_store = model_store
    self.registers: Dict[Tuple[str, int], Any] = {
      ref.key: ZERO[ref.value_type]
      for ref in program.referenced_registers if ref.cls == RegisterClass.REG
    }
    self.src_registers: Dict[Tuple[str, int], Any] = {}
    self.dst_registers: Dict[Tuple[str, int], Any] = {}
    self.model_in: Dict[str, List[float]] = {}
    self.model_out: Dict[str, List[float]] = {}
    self.faults: List[str] = []
    self.init_faults: Tuple[str, ...] = ()

  def bind_hosts(self, src_ip: Optional[bytes], dst_ip: Optional[bytes]):
    if self.host_store is None or src_ip is None or dst_ip is None:
      return
    self.src_registers = self.host_store.registers(src_ip)
    self.dst_registers = self.host_store.registers(dst_ip)

  def state_bytes(self) -> int:
    "Bytes of per-connection registers held; matches the analyzer's count"

    return sum(TYPE_WIDTH[ValueType(value_type)] for value_type, _ in self.registers)

  def dump_registers(self) -> Dict[str, str]:
    dump = {f"reg:{value_type}:{index}": str(value) for (value_type, index), value in sorted(self.registers.items())}
    for name in sorted(self.model_in):
      for index, value in enumerate(self.model_in[name]):
        dump[f"model:{name}:in:{index}"] = str(value)
      for index, value in enumerate(self.model_out[name]):
        dump[f"model:{name}:out:{index}"] = str(value)
    return dump


class _ProgramFault(Exception):
  "Terminates the current run with the default Accept"


_SKIPPED = object()


# lexer

class Token(NamedTuple):
  kind: str
  text: str
  line: int
  column: int


_TOKEN = regex.compile(r"""
    (?P<ws>\s+)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<arrow>->)
  | (?P<cmp><=|>=|!=|==|<|>)
  | (?P<number>[-+]?(?:0[xX][0-9a-fA-F]+|\d+(?:\.\d+)?(?:[eE][-+]?\d+)?))
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)
  | (?P<punct>[:,()=.])
""", regex.VERBOSE)


def _split_statements(source: str) -> List[Tuple[str, int, int]]:
  "Splits source into (text, line, column) statements, dropping comments"

  statements = []
  for line_no, line in enumerate(source.splitlines(), start = 1):
    start = 0
    in_string = escaped = False
    end = len(line)
    for i, char in enumerate(line):
      if in_string:
        if escaped:
          escaped = False
        elif char == "\\":
          escaped = True
        elif char == '"':
          in_string = False
        continue
      if char == '"':
        in_string = True
      elif char == "#":
        end = i
        break
      elif char == ";":
        statements.append((line[start:i], line_no, start + 1))
        start = i + 1
    statements.append((line[start:end], line_no, start + 1))
  return [(text, line_no, column) for text, line_no, column in statements if text.strip()]

def tokenize(text: str, line: int = 1, column: int = 1) -> List[Token]:
  tokens = []
  position = 0
  while position < len(text):
    match = _TOKEN.match(text, position)
    if match is None:
      raise CensorLangSyntaxError(f"unexpected character {text[position]!r}", line, column + position)
    kind = match.lastgroup
    if kind != "ws":
      tokens.append(Token(kind, match.group(), line, column + position))
    position = match.end()
  return tokens


# parser

def _parse_number(text: str) -> Union[int, float]:
  body = text.lstrip("+-")
  sign = -1 if text.startswith("-") else 1
  if body[:2].lower() == "0x":
    return sign * int(body, 16)
  if any(c in body for c in ".eE"):
    return float(text)
  return int(text, 10)

def _check_pattern(pattern: str, line: int, column: int):
  "Rejects backreferences, which have no linear-time matching"

  i = 0
  while i < len(pattern):
    char = pattern[i]
    if char == "\\" and i + 1 < len(pattern):
      following = pattern[i + 1]
      if following in "123456789gk":
        raise CensorLangSyntaxError("backreferences are not supported in patterns", line, column)
      i += 2
      continue
    if pattern.startswith("(?P=", i):
      raise CensorLangSyntaxError("backreferences are not supported in patterns", line, column)
    i += 1

def compile_pattern(text: str, line: int = 0, column: int = 0):
  "Compiles a pattern body as written between the quotes of a REGEX declaration"

  pattern = text.replace('\\"', '"')
  _check_pattern(pattern, line, column)
  try:
    return regex.compile(pattern.encode("utf-8"))
  except regex.error as e:
    raise CensorLangSyntaxError(f"bad pattern: {e}", line, column) from None


class _StatementParser:
  "Recursive-descent parser over the tokens of one statement"

  def __init__(self, tokens: List[Token], line: int, column: int,
               regexes: Mapping[str, Any], models: Optional[Mapping[str, Tuple[int, int]]]):
    self.tokens = tokens
    self.position = 0
    self.line = line
    self.column = column
    self.regexes = regexes
    self.models = models

  def error(self, message: str, expected: str = "", token: Optional[Token] = None) -> CensorLangSyntaxError:
    token = token or self.peek()
    if token is None:
      last = self.tokens[-1] if self.tokens else None
      column = last.column + len(last.text) if last else self.column
      return CensorLangSyntaxError(message, self.line, column, expected)
    return CensorLangSyntaxError(message, token.line, token.column, expected)

  def peek(self, offset: int = 0) -> Optional[Token]:
    index = self.position + offset
    return self.tokens[index] if index < len(self.tokens) else None

  def next(self, expected: str) -> Token:
    token = self.peek()
    if token is None:
      raise self.error("unexpected end of statement", expected)
    self.position += 1
    return token

  def expect(self, text: str) -> Token:
    token = self.next(repr(text))
    if token.text.lower() != text.lower():
      raise self.error(f"unexpected {token.text!r}", repr(text), token)
    return token

  def accept(self, text: str) -> bool:
    token = self.peek()
    if token is not None and token.text.lower() == text.lower():
      self.position += 1
      return True
    return False

  @property
  def done(self) -> bool:
    return self.position >= len(self.tokens)

  def expect_end(self):
    if not self.done:
      raise self.error(f"unexpected {self.peek().text!r}", "end of statement")

  def index(self) -> int:
    token = self.next("register index")
    if token.kind != "number" or not regex.fullmatch(r"\+?\d+", token.text):
      raise self.error(f"bad register index {token.text!r}", "unsigned integer", token)
    return int(token.text)

  def value_type(self) -> ValueType:
    token = self.next("register type")
    try:
      return ValueType(token.text.lower())
    except ValueError:
      raise self.error(f"unknown register type {token.text!r}", "f32, f64, i32, u32, i64, u64 or b", token) from None

  def register(self, first: Token) -> RegisterRef:
    cls_name = first.text.lower()
    self.expect(":")
    if cls_name == "model":
      name = self.next("model name")
      if name.kind != "word":
        raise self.error(f"bad model name {name.text!r}", "model name", name)
      self.expect(":")
      side = self.next("in or out")
      if side.text.lower() not in ("in", "out"):
        raise self.error(f"unexpected {side.text!r}", "in or out", side)
      self.expect(":")
      index_token = self.peek()
      index = self.index()
      is_input = side.text.lower() == "in"
      if self.models is not None and name.text in self.models:
        inputs, outputs = self.models[name.text]
        bound = inputs if is_input else outputs
        if index >= bound:
          raise self.error(f"model {name.text} has {bound} {side.text.lower()}puts", f"index below {bound}", index_token)
      cls = RegisterClass.MODEL_IN if is_input else RegisterClass.MODEL_OUT
      return RegisterRef(cls, ValueType.F32, index, name.text)

    cls = RegisterClass(cls_name)
    following = self.peek()
    if following is not None and following.kind == "number":
      # class:index.type
      index = self.index()
      self.expect(".")
      return RegisterRef(cls, self.value_type(), index)
    value_type = self.value_type()
    self.expect(":")
    return RegisterRef(cls, value_type, self.index())

  def operand(self) -> Operand:
    token = self.next("input")
    if token.kind == "number":
      return Literal(_parse_number(token.text))
    if token.kind == "word":
      word = token.text.lower()
      if word in ("true", "false"):
        return Literal(word == "true")
      following = self.peek()
      if following is not None and following.text == ":":
        if word == "field":
          self.expect(":")
          name = self.next("field name")
          if name.text.lower() not in FIELDS:
            raise UnknownField(f"line {name.line}, column {name.column}: unknown field {name.text!r}")
          return FieldRef(name.text.lower())
        if word in ("reg", "src", "dst", "model"):
          return self.register(token)
    raise self.error(f"unexpected {token.text!r}", "field, register or literal", token)

  def destination(self) -> RegisterRef:
    token = self.peek()
    operand = self.operand()
    if not isinstance(operand, RegisterRef):
      raise self.error("operation result must go to a register", "register", token)
    if operand.cls == RegisterClass.MODEL_OUT:
      raise self.error("model output registers are read-only", "writable register", token)
    return operand

  def condition(self) -> Condition:
    if self.accept("regex"):
      token = self.next("pattern name")
      if token.text not in self.regexes:
        raise self.error(f"undeclared pattern {token.text!r}", "declared REGEX name", token)
      return RegexMatch(token.text)
    left = self.operand()
    token = self.next("operator")
    operator = OPERATORS.get(token.text.upper())
    if operator is None:
      raise self.error(f"unexpected {token.text!r}", "comparison operator", token)
    return Comparison(left, operator, self.operand())

  def action(self) -> Tuple[Action, Escalation]:
    token = self.next("action")
    name = token.text.lower()
    if name == "allow_all":
      return ACCEPT, Escalation.ALLOW_ALL
    if name == "drop_all":
      return DROP, Escalation.DROP_ALL
    text = name
    if self.accept(":"):
      text += ":" + self.next("action argument").text
    elif self.accept("("):
      text += "(" + self.next("action argument").text + ")"
      self.expect(")")
    try:
      return parse_action(text), Escalation.NONE
    except ValueError as e:
      raise self.error(str(e), "allow, ignore, drop, reset, delay:<seconds>, ALLOW_ALL or DROP_ALL", token) from None

  def operation(self) -> Operation:
    token = self.next("operation")
    word = token.text.upper()
    line = token.line
    if token.kind != "word":
      raise self.error(f"unexpected {token.text!r}", "operation", token)
    if word in _JUMP_WORDS:
      raise self.error(f"{token.text} is not supported: programs cannot jump or loop", "operation", token)

    if word == "COPY":
      first = self.operand()
      if self.accept("->"):
        dest = self.destination()
        return Operation("COPY", (first,), dest, line = line)
      second_token = self.peek()
      second = self.operand()
      # two-operand form: the register operand is the destination, the second one when both are
      if isinstance(second, RegisterRef) and second.cls != RegisterClass.MODEL_OUT:
        return Operation("COPY", (first,), second, line = line)
      if isinstance(first, RegisterRef) and first.cls != RegisterClass.MODEL_OUT:
        return Operation("COPY", (second,), first, line = line)
      raise self.error("COPY needs a writable register", "register", second_token)

    if word in ARITHMETIC:
      left = self.operand()
      self.expect(",")
      right = self.operand()
      self.expect("->")
      return Operation(word, (left, right), self.destination(), line = line)

    if word in SUGAR:
      dest = self.destination()
      return Operation(SUGAR[word], (dest, Literal(1)), dest, line = line)

    if word == "RETURN":
      action, escalation = self.action()
      return Operation("RETURN", action = action, escalation = escalation, line = line)

    if word == "MODEL":
      name = self.next("model name")
      if name.kind != "word":
        raise self.error(f"bad model name {name.text!r}", "model name", name)
      return Operation("MODEL", model = name.text, line = line)

    raise self.error(f"unknown operation {token.text!r}", "operation", token)


def _registers_of(statement: Statement) -> List[RegisterRef]:
  operation = statement.operation
  operands = list(operation.operands)
  if isinstance(statement.guard, Comparison):
    operands += [statement.guard.left, statement.guard.right]
  refs = [operand for operand in operands if isinstance(operand, RegisterRef)]
  if operation.dest is not None:
    refs.append(operation.dest)
  return refs


def parse(source: str, models: Optional[Mapping[str, Tuple[int, int]]] = None) -> Program:
  """
  Parses CensorLang source into a compiled Program.

  Arguments:
    source: program text.
    models: optional map of model name to (input_len, output_len); when a
      referenced model is in it, register indices are bounds-checked.
  """

  regexes: Dict[str, Any] = {}
  init_ops: List[Statement] = []
  process_ops: List[Statement] = []
  in_process = False
  pending_guard: Optional[Tuple[Condition, int]] = None

  for text, line, column in _split_statements(source):
    tokens = tokenize(text, line, column)
    parser = _StatementParser(tokens, line, column, regexes, models)
    first, second = parser.peek(), parser.peek(1)

    is_label = (
      first is not None and first.kind == "word" and second is not None and second.text == ":"
      and first.text.upper() not in OPCODES and first.text.upper() not in SUGAR
      and first.text.lower() not in ("if", "regex")
    )
    if is_label:
      if pending_guard is not None:
        raise parser.error("a guard must be followed by an operation", "operation", first)
      if first.text.lower() != "process":
        raise parser.error(f"unknown label {first.text!r}: programs cannot jump", "process:", first)
      if in_process:
        raise parser.error("duplicate process label", "one process: label", first)
      in_process = True
      parser.position = 2
      if parser.done:
        continue

    elif first.kind == "word" and first.text.lower() == "regex" and second is not None and second.kind == "word" \
        and parser.peek(2) is not None and parser.peek(2).text == "=":
      if pending_guard is not None:
        raise parser.error("a guard must be followed by an operation", "operation", first)
      if init_ops or process_ops or in_process:
        raise parser.error("REGEX declarations must precede the first operation", "operation", first)
      parser.position = 3
      pattern_token = parser.next("quoted pattern")
      if pattern_token.kind != "string":
        raise parser.error(f"unexpected {pattern_token.text!r}", "quoted pattern", pattern_token)
      parser.expect_end()
      if second.text in regexes:
        raise parser.error(f"duplicate pattern name {second.text!r}", "new name", second)
      regexes[second.text] = compile_pattern(pattern_token.text[1:-1], pattern_token.line, pattern_token.column)
      continue

    guard = None
    guard_line = line
    if pending_guard is not None:
      guard, guard_line = pending_guard
      pending_guard = None
    elif parser.accept("if"):
      guard = parser.condition()
      parser.expect(":")
      if parser.done:
        pending_guard = (guard, line)
        continue

    operation = parser.operation()
    parser.expect_end()
    if not in_process and operation.opcode == "RETURN":
      raise parser.error("RETURN is not allowed before process:", "operation", first)
    statement = Statement(guard, operation, guard_line)
    (process_ops if in_process else init_ops).append(statement)

  if pending_guard is not None:
    raise CensorLangSyntaxError("a guard must be followed by an operation", pending_guard[1], 0, "operation")
  if not in_process:
    raise MissingProcessLabel("program has no process: label")

  registers = frozenset(ref for statement in init_ops + process_ops for ref in _registers_of(statement))
  models_used = frozenset(
    [ref.model for ref in registers if ref.model is not None]
    + [s.operation.model for s in init_ops + process_ops if s.operation.model is not None]
  )
  program = Program(
    init_ops = tuple(init_ops),
    process_ops = tuple(process_ops),
    named_regexes = regexes,
    referenced_registers = registers,
    referenced_models = models_used,
    source = source,
  )
  program.compiled_init = tuple(_compile_statement(s, program) for s in program.init_ops)
  program.compiled_process = tuple(_compile_statement(s, program) for s in program.process_ops)
  logger.info(
    f"Parsed program: {len(init_ops)} init ops, {len(process_ops)} process ops, "
    f"{len(registers)} registers, {len(regexes)} patterns"
  )
  return program

def load_program(path: str, models: Optional[Mapping[str, Tuple[int, int]]] = None) -> Program:
  return parse(read_text_file(path), models)


# evaluation

def _saturate_i64(value: int) -> int:
  low, high = INT_RANGES[ValueType.I64]
  return min(max(value, low), high)

def apply_arithmetic(opcode: str, left: Any, right: Any) -> Any:
  """
  Evaluates a binary operation in f64 when either operand is floating and in
  i64 otherwise. DIV truncates toward zero and MOD takes the dividend's sign.
  AND/OR/XOR are logical on two booleans and bitwise on integers.
  """

  floating = isinstance(left, float) or isinstance(right, float)
  if opcode in ("AND", "OR", "XOR"):
    if floating:
      raise _ProgramFault(f"{opcode} on floating operand")
    if isinstance(left, bool) and isinstance(right, bool):
      if opcode == "AND":
        return left and right
      if opcode == "OR":
        return left or right
      return left != right
    left, right = int(left), int(right)
    if opcode == "AND":
      return left & right
    if opcode == "OR":
      return left | right
    return left ^ right

  if floating:
    left, right = float(left), float(right)
    if opcode == "ADD":
      return left + right
    if opcode == "SUB":
      return left - right
    if opcode == "MUL":
      return left * right
    if right == 0.0:
      raise _ProgramFault(f"{opcode} by zero")
    if opcode == "DIV":
      return left / right
    return math.fmod(left, right)

  left, right = int(left), int(right)
  if opcode == "ADD":
    return _saturate_i64(left + right)
  if opcode == "SUB":
    return _saturate_i64(left - right)
  if opcode == "MUL":
    return _saturate_i64(left * right)
  if right == 0:
    raise _ProgramFault(f"{opcode} by zero")
  if opcode == "DIV":
    quotient = abs(left) // abs(right)
    return _saturate_i64(-quotient if (left < 0) != (right < 0) else quotient)
  remainder = abs(left) % abs(right)
  return -remainder if left < 0 else remainder

def compare(operator: str, left: Any, right: Any) -> bool:
  "Raises TypeError when a logical operator gets a non-boolean operand"

  if operator in ("AND", "OR", "XOR"):
    if not (isinstance(left, bool) and isinstance(right, bool)):
      raise TypeError(f"{operator} needs boolean operands, got {left!r} and {right!r}")
    if operator == "AND":
      return left and right
    if operator == "OR":
      return left or right
    return left != right
  if isinstance(left, float) or isinstance(right, float):
    left, right = float(left), float(right)
  else:
    left, right = int(left), int(right)
  if operator == "LT":
    return left < right
  if operator == "LEQ":
    return left <= right
  if operator == "EQ":
    return left == right
  if operator == "NEQ":
    return left != right
  if operator == "GEQ":
    return left >= right
  return left > right


def _reader(operand: Operand) -> Callable[[Env, PacketView], Any]:
  if isinstance(operand, Literal):
    value = operand.value
    return lambda env, view: value

  if isinstance(operand, FieldRef):
    name = operand.name
    getter = FIELDS[name]

    def read_field(env: Env, view: PacketView):
      packet = view.packet
      value = getter(packet, view.state) if packet is not None else None
      if value is None:
        env.faults.append(f"field {name} unavailable")
        return 0
      return value
    return read_field

  key, zero = operand.key, ZERO[operand.value_type]
  if operand.cls == RegisterClass.REG:
    return lambda env, view: env.registers.get(key, zero)
  if operand.cls == RegisterClass.SRC:
    return lambda env, view: env.src_registers.get(key, zero)
  if operand.cls == RegisterClass.DST:
    return lambda env, view: env.dst_registers.get(key, zero)
  name, index = operand.model, operand.index
  if operand.cls == RegisterClass.MODEL_IN:
    return lambda env, view: env.model_in[name][index]
  return lambda env, view: env.model_out[name][index]

def _writer(ref: RegisterRef) -> Callable[[Env, Any], None]:
  key = ref.key
  cast = functools.partial(coerce, value_type = ref.value_type)
  if ref.cls == RegisterClass.REG:
    def write(env: Env, value: Any):
      env.registers[key] = cast(value)
  elif ref.cls == RegisterClass.SRC:
    def write(env: Env, value: Any):
      env.src_registers[key] = cast(value)
  elif ref.cls == RegisterClass.DST:
    def write(env: Env, value: Any):
      env.dst_registers[key] = cast(value)
  else:
    name, index = ref.model, ref.index

    def write(env: Env, value: Any):
      env.model_in[name][index] = cast(value)
  return write

def _compile_condition(condition: Condition, program: Program) -> Callable[[Env, PacketView], bool]:
  if isinstance(condition, RegexMatch):
    name = condition.name
    pattern = program.named_regexes[name]

    def match(env: Env, view: PacketView) -> bool:
      try:
        return pattern.search(view.payload, timeout = REGEX_TIMEOUT) is not None
      except TimeoutError:
        env.faults.append(f"pattern {name} timed out")
        return False
    return match

  left, right, operator = _reader(condition.left), _reader(condition.right), condition.operator

  def evaluate(env: Env, view: PacketView) -> bool:
    try:
      return compare(operator, left(env, view), right(env, view))
    except TypeError as e:
      env.faults.append(f"type fault: {e}")
      return False
  return evaluate

def _compile_operation(operation: Operation) -> Callable[[Env, PacketView], Any]:
  opcode = operation.opcode
  if opcode == "COPY":
    read, write = _reader(operation.operands[0]), _writer(operation.dest)

    def copy(env: Env, view: PacketView):
      write(env, read(env, view))
    return copy

  if opcode in ARITHMETIC:
    left, right = (_reader(operand) for operand in operation.operands)
    write = _writer(operation.dest)

    def arithmetic(env: Env, view: PacketView):
      write(env, apply_arithmetic(opcode, left(env, view), right(env, view)))
    return arithmetic

  if opcode == "RETURN":
    result = (operation.action, operation.escalation)
    return lambda env, view: result

  name = operation.model

  def model(env: Env, view: PacketView):
    if env.model_store is None:
      raise _ProgramFault(f"MODEL {name}: no model store")
    try:
      run_model_op(env, env.model_store, name)
    except CensorLabError as e:
      raise _ProgramFault(f"MODEL {name}: {e}") from None
  return model

def _compile_statement(statement: Statement, program: Program) -> Callable[[Env, PacketView], Any]:
  run = _compile_operation(statement.operation)
  if statement.guard is None:
    return run
  guard = _compile_condition(statement.guard, program)

  def guarded(env: Env, view: PacketView):
    if not guard(env, view):
      return _SKIPPED
    return run(env, view)
  return guarded


def run_model_op(env: Env, model_store: Any, name: str):
  "Runs a model over its in-registers and writes the out-registers"

  inputs = env.model_in.get(name)
  if inputs is None:
    raise ModelNotLoaded(f"program has no registers for model {name}")
  outputs = model_store.run(name, inputs)
  out_registers = env.model_out[name]
  if len(outputs) != len(out_registers):
    raise ModelNotLoaded(f"model {name} returned {len(outputs)} outputs, expected {len(out_registers)}")
  for index, value in enumerate(outputs):
    out_registers[index] = _coerce_f32(value)

def eval_condition(env: Env, packet_view: PacketView, condition: Condition) -> bool:
  return _compile_condition(condition, env.program)(env, packet_view)


def _bind_view(env: Env, view: PacketView):
  packet = view.packet
  if packet is not None and packet.ip is not None:
    env.bind_hosts(packet.ip.src_ip, packet.ip.dst_ip)

def new_env(program: Program, conn_state: Optional[ConnectionState] = None,
            host_store: Optional[HostStore] = None, model_store: Any = None) -> Env:
  """
  Allocates a connection's registers and runs the init section once.

  Raises:
    ModelNotLoaded: the program references a model the store does not hold,
      or uses more of its registers than the model has.
  """

  env = Env(program, conn_state, host_store, model_store)
  for name in sorted(program.referenced_models):
    handle = model_store.get(name) if model_store is not None else None
    if handle is None:
      raise ModelNotLoaded(f"model {name} is not loaded")
    inputs, outputs = program.model_extent(name)
    if inputs > handle.input_len or outputs > handle.output_len:
      raise ModelNotLoaded(
        f"model {name} is {handle.input_len}x{handle.output_len}, program uses {inputs} inputs and {outputs} outputs"
      )
    env.model_in[name] = [0.0] * handle.input_len
    env.model_out[name] = [0.0] * handle.output_len

  if conn_state is not None:
    key = conn_state.key
    responder = key.ip2 if key.ip1 == conn_state.initiator_ip and key.port1 == conn_state.initiator_port else key.ip1
    env.bind_hosts(conn_state.initiator_ip, responder)

  try:
    for step in program.compiled_init:
      step(env, _NO_PACKET)
  except _ProgramFault as fault:
    env.faults.append(str(fault))
  if env.faults:
    env.init_faults = tuple(env.faults)
    logger.warning(f"Init faults: {'; '.join(env.init_faults)}")
    env.faults = []
  return env

def execute(env: Env, program: Program, packet_view: PacketView) -> ExecOutcome:
  """
  Runs the process section for one packet. Falls through to Accept. A fault
  that stops an operation ends the run with Accept and the fault noted.
  """

  env.faults = []
  _bind_view(env, packet_view)
  executed = 0
  try:
    for step in program.compiled_process:
      result = step(env, packet_view)
      if result is _SKIPPED:
        continue
      executed += 1
      if result is not None:
        action, escalation = result
        return ExecOutcome(action, escalation, tuple(env.faults), executed)
  except _ProgramFault as fault:
    env.faults.append(str(fault))
    logger.warning(f"Program fault, accepting packet: {fault}")
    return ExecOutcome(ACCEPT, Escalation.NONE, tuple(env.faults), executed + 1)
  if env.faults:
    logger.warning(f"Program faults: {'; '.join(env.faults)}")
  return ExecOutcome(ACCEPT, Escalation.NONE, tuple(env.faults), executed)


# static analysis

@dataclass(frozen = True)
class AnalysisReport:
  state_bytes: int
  host_bytes: int
  model_bytes: int
  op_histogram: Dict[str, int]
  guard_histogram: Dict[str, int]
  init_histogram: Dict[str, int]
  cost: float
  models_used: Tuple[str, ...]
  max_ops_per_packet: int

  def to_lines(self) -> List[str]:
    lines = [
      f"state_bytes={self.state_bytes}",
      f"host_bytes={self.host_bytes}",
      f"model_bytes={self.model_bytes}",
      f"cost={self.cost:g}",
      f"max_ops_per_packet={self.max_ops_per_packet}",
      f"models={','.join(self.models_used) or '-'}",
    ]
    lines += [f"op.{op}={count}" for op, count in sorted(self.op_histogram.items())]
    lines += [f"guard.{kind}={count}" for kind, count in sorted(self.guard_histogram.items())]
    lines += [f"init.{op}={count}" for op, count in sorted(self.init_histogram.items())]
    return lines


def _histogram(statements: Tuple[Statement, ...]) -> Dict[str, int]:
  histogram: Dict[str, int] = {}
  for statement in statements:
    histogram[statement.operation.opcode] = histogram.get(statement.operation.opcode, 0) + 1
  return histogram

def _guard_histogram(statements: Tuple[Statement, ...]) -> Dict[str, int]:
  histogram: Dict[str, int] = {}
  for statement in statements:
    if statement.guard is not None:
      kind = "REGEX" if isinstance(statement.guard, RegexMatch) else "IF"
      histogram[kind] = histogram.get(kind, 0) + 1
  return histogram

def analyze(program: Program, cost_table: Optional[Mapping[str, float]] = None,
            model_shapes: Optional[Mapping[str, Tuple[int, int]]] = None) -> AnalysisReport:
  """
  Static resource report for a program.

  Arguments:
    program: parsed program.
    cost_table: per-op weights keyed by opcode; ops it leaves out weigh 1.
      Guards are counted in guard_histogram and carry no cost, so a unit
      table gives cost == max_ops_per_packet.
    model_shapes: (input_len, output_len) per model, for scratch bytes.
      Without it the program's highest register indices are used.
  """

  weights = dict(DEFAULT_COST_TABLE)
  if cost_table:
    weights.update({op.upper(): weight for op, weight in cost_table.items()})

  state = {ref.key: ref.width for ref in program.referenced_registers if ref.cls == RegisterClass.REG}
  host = {
    (ref.cls, ref.key): ref.width
    for ref in program.referenced_registers if ref.cls in (RegisterClass.SRC, RegisterClass.DST)
  }
  model_bytes = 0
  for name in program.referenced_models:
    if model_shapes is not None and name in model_shapes:
      inputs, outputs = model_shapes[name]
    else:
      inputs, outputs = program.model_extent(name)
    model_bytes += 4 * (inputs + outputs)

  histogram = _histogram(program.process_ops)
  return AnalysisReport(
    state_bytes = sum(state.values()),
    host_bytes = sum(host.values()),
    model_bytes = model_bytes,
    op_histogram = histogram,
    guard_histogram = _guard_histogram(program.process_ops),
    init_histogram = _histogram(program.init_ops),
    cost = sum(count * weights.get(op, 1.0) for op, count in histogram.items()),
    models_used = tuple(sorted(program.referenced_models)),
    max_ops_per_packet = len(program.process_ops),
  )
