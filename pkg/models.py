"""
The model store: named inference functions from N 32-bit floats to M.

Two backends are recognized by file extension:

  .onnx    run with onnxruntime; the graph must take one float tensor of
           shape [1, N] (or [batch, N]) and return one float tensor [1, M].
  .affine  a text file "N M", then M*N row-major weights, then M biases.
           Computes y = W.x + b. Lines may carry # comments.
"""

import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from strenum import StrEnum

from common_functions import get_logger, read_text_file
from error_handler import (
  BadFormat,
  BadShape,
  DuplicateLoadInProgress,
  InferenceBudgetExceeded,
  ModelShapeMismatch,
  UnknownModel,
)

logger = get_logger(__name__, "models.log")

DEFAULT_BUDGET_SECONDS = 0.05


class ModelBackend(StrEnum):
  ONNX = "onnx"
  AFFINE = "affine"


@dataclass(frozen = True)
class ModelHandle:
  name: str
  input_len: int
  output_len: int
  backend: ModelBackend
  path: str
  infer: Callable[[np.ndarray], np.ndarray] = field(repr = False, compare = False)


def parse_affine(text: str) -> Tuple[np.ndarray, np.ndarray]:
  "Returns (weights M x N, bias M) as float64 arrays"

  numbers = []
  for line in text.splitlines():
    numbers += line.split("#", 1)[0].split()
  if len(numbers) < 2:
    raise BadFormat("affine model needs 'N M' dimensions")
  try:
    inputs, outputs = int(numbers[0]), int(numbers[1])
  except ValueError:
    raise BadFormat(f"bad affine dimensions {numbers[0]} {numbers[1]}") from None
  if inputs < 1 or outputs < 1:
    raise BadShape(f"affine model must be at least 1x1, got {inputs}x{outputs}")
  expected = outputs * inputs + outputs
  if len(numbers) - 2 != expected:
    raise BadFormat(f"affine model {inputs}x{outputs} needs {expected} values, found {len(numbers) - 2}")
  try:
    values = np.array([float(number) for number in numbers[2:]], dtype = np.float64)
  except ValueError as e:
    raise BadFormat(f"bad affine value: {e}") from None
  weights = values[:outputs * inputs].reshape(outputs, inputs)
  bias = values[outputs * inputs:]
  return weights, bias

def affine_infer(weights: np.ndarray, bias: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
  def infer(x: np.ndarray) -> np.ndarray:
    return (weights @ x.astype(np.float64) + bias).astype(np.float32)
  return infer

def _load_affine(name: str, path: str) -> ModelHandle:
  weights, bias = parse_affine(read_text_file(path))
  outputs, inputs = weights.shape
  return ModelHandle(name, inputs, outputs, ModelBackend.AFFINE, path, affine_infer(weights, bias))


def _dimension(value) -> Optional[int]:
  "Fixed dimension size, or None when symbolic"

  return value if isinstance(value, int) and value > 0 else None

def _load_onnx(name: str, path: str) -> ModelHandle:
  import onnxruntime

  try:
    session = onnxruntime.InferenceSession(path, providers = ["CPUExecutionProvider"])
  except Exception as e:
    raise BadFormat(f"cannot load ONNX model {path}: {e}") from None

  model_inputs, model_outputs = session.get_inputs(), session.get_outputs()
  if len(model_inputs) != 1 or not model_outputs:
    raise BadShape(f"model must have one input and an output, has {len(model_inputs)} and {len(model_outputs)}")
  shapes = []
  for tensor in (model_inputs[0], model_outputs[0]):
    if tensor.type != "tensor(float)":
      raise BadShape(f"{tensor.name} is {tensor.type}, expected tensor(float)")
    if len(tensor.shape) != 2:
      raise BadShape(f"{tensor.name} has shape {tensor.shape}, expected [1, n]")
    batch, width = tensor.shape
    if _dimension(batch) not in (None, 1) or _dimension(width) is None:
      raise BadShape(f"{tensor.name} has shape {tensor.shape}, expected [1, n]")
    shapes.append(width)

  input_name = model_inputs[0].name
  output_name = model_outputs[0].name
  inputs, outputs = shapes

  def infer(x: np.ndarray) -> np.ndarray:
    result = session.run([output_name], {input_name: x.astype(np.float32).reshape(1, inputs)})[0]
    return np.asarray(result, dtype = np.float32).reshape(-1)

  return ModelHandle(name, inputs, outputs, ModelBackend.ONNX, path, infer)


LOADERS = {".affine": _load_affine, ".onnx": _load_onnx}


class ModelStore:
  """
  Named models shared by every connection. Handles are immutable; loading
  under an existing name swaps the handle in one step.

  Arguments:
    budget_seconds: wall-clock cap per inference; slower results are discarded.
  """

  def __init__(self, budget_seconds: float = DEFAULT_BUDGET_SECONDS):
    self.budget_seconds = budget_seconds
    self._models: Dict[str, ModelHandle] = {}
    self._loading: Set[str] = set()
    self._lock = threading.Lock()

  def get(self, name: str) -> Optional[ModelHandle]:
    with self._lock:
      return self._models.get(name)

  def load(self, name: str, path: str) -> ModelHandle:
    extension = os.path.splitext(path)[1].lower()
    loader = LOADERS.get(extension)
    if loader is None:
      raise BadFormat(f"unrecognized model format {extension or '(none)'}: expected .onnx or .affine")
    with self._lock:
      if name in self._loading:
        raise DuplicateLoadInProgress(f"model {name} is already being loaded")
      self._loading.add(name)
    try:
      try:
        handle = loader(name, path)
      except OSError as e:
        raise BadFormat(f"cannot read {path}: {e}") from None
      with self._lock:
        replaced = name in self._models
        self._models[name] = handle
    finally:
      with self._lock:
        self._loading.discard(name)
    logger.info(
      f"{'Replaced' if replaced else 'Loaded'} model {name} ({handle.backend}, "
      f"{handle.input_len} -> {handle.output_len}) from {path}"
    )
    return handle

  def run(self, name: str, inputs: Sequence[float]) -> List[float]:
    """
    Runs one inference on the calling thread. The latency budget is checked
    once inference returns: a slow call still blocks the packet for its full
    duration, and its output is then discarded with InferenceBudgetExceeded.
    """

    handle = self.get(name)
    if handle is None:
      raise UnknownModel(f"model {name} is not loaded")
    if len(inputs) != handle.input_len:
      raise ModelShapeMismatch(f"model {name} takes {handle.input_len} inputs, got {len(inputs)}")
    x = np.asarray(inputs, dtype = np.float32)
    start = time.perf_counter()
    output = handle.infer(x)
    elapsed = time.perf_counter() - start
    if self.budget_seconds and elapsed > self.budget_seconds:
      raise InferenceBudgetExceeded(f"model {name} took {elapsed * 1000:.1f} ms")
    if output.shape != (handle.output_len,):
      raise ModelShapeMismatch(f"model {name} returned shape {output.shape}")
    return [float(value) for value in output]

  def remove(self, name: str):
    with self._lock:
      if name not in self._models:
        raise UnknownModel(f"model {name} is not loaded")
      del self._models[name]
    logger.info(f"Removed model {name}")

  def list(self) -> List[Tuple[str, int, int, str]]:
    with self._lock:
      return [
        (handle.name, handle.input_len, handle.output_len, handle.backend.value)
        for handle in sorted(self._models.values(), key = lambda h: h.name)
      ]

  def shapes(self) -> Dict[str, Tuple[int, int]]:
    with self._lock:
      return {name: (handle.input_len, handle.output_len) for name, handle in self._models.items()}

  def clear(self):
    with self._lock:
      self._models.clear()

  def __contains__(self, name: str) -> bool:
    with self._lock:
      return name in self._models

  def __len__(self) -> int:
    with self._lock:
      return len(self._models)


def load_model(store: ModelStore, name: str, path: str) -> ModelHandle:
  return store.load(name, path)

def run(store: ModelStore, name: str, inputs: Sequence[float]) -> List[float]:
  return store.run(name, inputs)

def remove_model(store: ModelStore, name: str):
  store.remove(name)

def list_models(store: ModelStore) -> List[Tuple[str, int, int, str]]:
  return store.list()
