import inspect
import logging
import os
import traceback

logger = logging.getLogger(__name__)
logger.setLevel(logging.CRITICAL)

formatter = logging.Formatter('%(asctime)s %(levelname)s:%(message)s')
logger.propagate = False


class CensorLabError(Exception):
  "Base class for every error raised by censorlab"

  code = "error"

  def __init__(self, message: str = ""):
    super().__init__(message)
    self.message = message


# packet

class PacketError(CensorLabError):
  code = "parse"

class Truncated(PacketError):
  pass

class Unsupported(PacketError):
  "Frame is well formed but of a kind the pipeline ignores"

class BadVersion(PacketError):
  pass

class BadLength(PacketError):
  pass

class BadDataOffset(PacketError):
  pass


# filters

class FilterError(CensorLabError):
  code = "shape"

class ShapeMismatch(FilterError):
  code = "shape"

class UnknownClass(FilterError):
  code = "unknown-class"


# flows

class FlowError(CensorLabError):
  code = "flow"

class NoTransportLayer(FlowError):
  pass

class TableFull(FlowError):
  pass


# censorlang

class CensorLangError(CensorLabError):
  code = "parse"

class CensorLangSyntaxError(CensorLangError):

  def __init__(self, message: str, line: int = 0, column: int = 0, expected: str = ""):
    self.line = line
    self.column = column
    self.expected = expected
    detail = f"line {line}, column {column}: {message}"
    if expected:
      detail += f" (expected {expected})"
    super().__init__(detail)

class MissingProcessLabel(CensorLangError):
  pass

class UnknownField(CensorLangError):
  pass

class ModelNotLoaded(CensorLangError):
  code = "model"


# models

class ModelError(CensorLabError):
  code = "model"

class BadFormat(ModelError):
  pass

class BadShape(ModelError):
  pass

class UnknownModel(ModelError):
  code = "not-found"

class ModelShapeMismatch(ModelError):
  code = "shape"

class DuplicateLoadInProgress(ModelError):
  pass

class InferenceBudgetExceeded(ModelError):
  pass


# engine

class EngineError(CensorLabError):
  code = "engine"

class NotTcp(EngineError):
  pass

class BadCapture(EngineError):
  code = "io"

class BadConfig(EngineError):
  code = "io"


# ipc

class IpcError(CensorLabError):
  code = "io"

class BindFailed(IpcError):
  pass

class IpcParseError(IpcError):
  code = "parse"


class ErrorHandler:
  current_file = None

  @classmethod
  def set_current_file(cls, file):
    cls.current_file = file

  @classmethod
  def attach_log_file(cls, path: str):
    "Sends critical records to the given file in addition to stderr"

    target = os.path.abspath(path)
    if any(getattr(handler, "baseFilename", None) == target for handler in logger.handlers):
      return
    os.makedirs(os.path.dirname(target), exist_ok = True)
    file_handler = logging.FileHandler(target)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

  @classmethod
  def kill_app(cls, e):
    stack_info = traceback.format_exc()
    frame = inspect.currentframe().f_back
    file_name = frame.f_code.co_filename
    line_no = frame.f_lineno
    function_name = frame.f_code.co_name

    function_details = f"Error in {function_name} at line {line_no} in {file_name}:"
    file_details = f"File path: {cls.current_file if cls.current_file else 'No file info available'}"
    traceback_message = f"{function_details}\nStack Trace:\n{stack_info}"
    error_message = f"Error: {e}.\n{traceback_message}\n for censorlab in {file_details} "
    if not logger.handlers:
      stream_handler = logging.StreamHandler()
      stream_handler.setFormatter(formatter)
      logger.addHandler(stream_handler)
    logger.critical(error_message)
    exit(1)
