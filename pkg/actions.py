"""
The verdict vocabulary shared by lists, censor programs and the engine.
"""

from dataclasses import dataclass
from typing import Union

import regex
from strenum import StrEnum


class ActionKind(StrEnum):
  NONE = "none"
  ACCEPT = "accept"
  DROP = "drop"
  RESET = "reset"
  DELAY = "delay"


class Escalation(StrEnum):
  NONE = "none"
  ALLOW_ALL = "allow_all"
  DROP_ALL = "drop_all"


@dataclass(frozen = True, slots = True)
class Action:
  kind: ActionKind
  count: int = 0
  seconds: float = 0.0

  def __post_init__(self):
    if self.kind == ActionKind.RESET and self.count < 1:
      raise ValueError("reset needs at least one RST")
    if self.kind == ActionKind.DELAY and not self.seconds >= 0:
      raise ValueError("delay must be non-negative")

  @classmethod
  def none(cls) -> "Action":
    return NONE

  @classmethod
  def accept(cls) -> "Action":
    return ACCEPT

  @classmethod
  def drop(cls) -> "Action":
    return DROP

  @classmethod
  def reset(cls, count: int = 1) -> "Action":
    return cls(ActionKind.RESET, count = count)

  @classmethod
  def delay(cls, seconds: float) -> "Action":
    return cls(ActionKind.DELAY, seconds = float(seconds))

  @property
  def blocks(self) -> bool:
    return self.kind in (ActionKind.DROP, ActionKind.RESET)

  def __str__(self) -> str:
    if self.kind == ActionKind.RESET:
      return f"reset({self.count})"
    if self.kind == ActionKind.DELAY:
      return f"delay:{self.seconds:g}"
    return self.kind.value


NONE = Action(ActionKind.NONE)
ACCEPT = Action(ActionKind.ACCEPT)
DROP = Action(ActionKind.DROP)

_ACTION_TEXT = regex.compile(
  r"^\s*(?P<name>[a-z_]+)\s*(?:(?:\(\s*(?P<paren>[^)]*)\s*\))|(?::\s*(?P<colon>\S+)))?\s*$",
  regex.IGNORECASE,
)


def parse_action(text: Union[str, Action]) -> Action:
  """
  Parses action text as written in configs, IPC commands and programs:
  none/ignore, accept/allow, drop, reset, reset(3), reset:3, delay:0.5, delay(0.5).
  """

  if isinstance(text, Action):
    return text
  match = _ACTION_TEXT.match(text)
  if not match:
    raise ValueError(f"not an action: {text!r}")
  name = match.group("name").lower()
  argument = match.group("paren") or match.group("colon")
  if name in ("none", "ignore"):
    return NONE
  if name in ("accept", "allow"):
    return ACCEPT
  if name == "drop":
    return DROP
  if name == "reset":
    return Action.reset(int(argument) if argument else 1)
  if name == "delay":
    if argument is None:
      raise ValueError("delay needs a duration, e.g. delay:0.5")
    return Action.delay(float(argument))
  raise ValueError(f"unknown action: {name}")
