import threading

import numpy as np
import pytest

import models
from error_handler import (
  BadFormat,
  BadShape,
  DuplicateLoadInProgress,
  InferenceBudgetExceeded,
  ModelShapeMismatch,
  UnknownModel,
)
from models import ModelBackend, ModelStore, affine_infer, list_models, load_model, parse_affine, remove_model, run


def _write(tmp_path, name, text):
  path = tmp_path / name
  path.write_text(text)
  return str(path)

def _onnx_affine(path, weights, bias, input_type = None):
  "Saves MatMul+Add as an ONNX graph taking [1, N] floats"

  onnx = pytest.importorskip("onnx")
  from onnx import TensorProto, helper, numpy_helper

  weights = np.asarray(weights, dtype = np.float32)
  inputs, outputs = weights.shape[1], weights.shape[0]
  elem = input_type if input_type is not None else TensorProto.FLOAT
  graph = helper.make_graph(
    [helper.make_node("MatMul", ["x", "w"], ["xw"]), helper.make_node("Add", ["xw", "b"], ["y"])],
    "affine",
    [helper.make_tensor_value_info("x", elem, [1, inputs])],
    [helper.make_tensor_value_info("y", TensorProto.FLOAT, [1, outputs])],
    [numpy_helper.from_array(weights.T.copy(), "w"), numpy_helper.from_array(np.asarray(bias, dtype = np.float32), "b")],
  )
  model = helper.make_model(graph, opset_imports = [helper.make_opsetid("", 13)])
  model.ir_version = 8
  onnx.save(model, path)
  return path


def test_affine_load_and_run(affine_model):
  store = ModelStore()
  handle = load_model(store, "wf", affine_model)

  assert (handle.input_len, handle.output_len) == (2, 1)
  assert handle.backend == ModelBackend.AFFINE
  assert run(store, "wf", [3, 1]) == [2.0]
  assert run(store, "wf", [0, 0]) == [0.0]

def test_affine_comments_and_bias(tmp_path):
  path = _write(tmp_path, "two.affine", "# 3 in, 2 out\n3 2\n1 0 0\n0 2 0  # second row\n0.5 -1\n")
  store = ModelStore()
  store.load("two", path)

  assert store.run("two", [1, 2, 3]) == [1.5, 3.0]

def test_affine_format_errors(tmp_path):
  store = ModelStore()
  with pytest.raises(BadFormat):
    store.load("m", _write(tmp_path, "short.affine", "2 1\n1\n"))
  with pytest.raises(BadFormat):
    store.load("m", _write(tmp_path, "words.affine", "2 1\n1 x\n0\n"))
  with pytest.raises(BadShape):
    store.load("m", _write(tmp_path, "empty.affine", "0 1\n0\n"))
  with pytest.raises(BadFormat):
    store.load("m", _write(tmp_path, "model.pkl", "2 1\n1 -1\n0\n"))
  with pytest.raises(BadFormat):
    store.load("m", str(tmp_path / "missing.affine"))

def test_run_errors(affine_model):
  store = ModelStore()
  with pytest.raises(UnknownModel):
    store.run("wf", [1, 2])
  store.load("wf", affine_model)
  with pytest.raises(ModelShapeMismatch):
    store.run("wf", [1, 2, 3])

def test_remove_and_list(affine_model, tmp_path):
  store = ModelStore()
  store.load("wf", affine_model)
  store.load("other", _write(tmp_path, "other.affine", "1 1\n2\n1\n"))
  assert [entry[0] for entry in list_models(store)] == ["other", "wf"]
  assert store.shapes() == {"wf": (2, 1), "other": (1, 1)}

  remove_model(store, "wf")
  with pytest.raises(UnknownModel):
    store.run("wf", [1, 2])
  with pytest.raises(UnknownModel):
    remove_model(store, "wf")
  assert "wf" not in store and len(store) == 1

def test_reload_replaces_handle(affine_model, tmp_path):
  store = ModelStore()
  store.load("wf", affine_model)
  store.load("wf", _write(tmp_path, "swap.affine", "2 1\n-1 1\n0\n"))

  assert store.run("wf", [3, 1]) == [-2.0]
  assert len(store) == 1

def test_budget_exceeded(affine_model):
  store = ModelStore(budget_seconds = 1e-12)
  store.load("wf", affine_model)

  with pytest.raises(InferenceBudgetExceeded):
    store.run("wf", [1, 2])

def test_concurrent_load_of_same_name_is_refused(monkeypatch, affine_model):
  entered, release = threading.Event(), threading.Event()

  def slow_loader(name, path):
    entered.set()
    release.wait(5.0)
    return models._load_affine(name, affine_model)
  monkeypatch.setitem(models.LOADERS, ".slow", slow_loader)
  store = ModelStore()
  first = threading.Thread(target = store.load, args = ("wf", "wf.slow"))
  first.start()
  assert entered.wait(5.0)

  with pytest.raises(DuplicateLoadInProgress):
    store.load("wf", affine_model)
  release.set()
  first.join(5.0)
  assert store.get("wf").input_len == 2
  store.load("wf", affine_model)

def test_affine_matches_naive_reference():
  rng = np.random.default_rng(1234)
  for _ in range(1000):
    inputs, outputs = rng.integers(1, 6, size = 2)
    weights = rng.normal(size = (outputs, inputs))
    bias = rng.normal(size = outputs)
    x = rng.normal(size = inputs).astype(np.float32)
    result = affine_infer(weights, bias)(x)
    expected = np.array([
      sum(weights[i][j] * float(x[j]) for j in range(inputs)) + bias[i] for i in range(outputs)
    ], dtype = np.float32)
    np.testing.assert_array_max_ulp(result, expected, maxulp = 1)

def test_parse_affine_layout():
  weights, bias = parse_affine("3 2\n1 2 3\n4 5 6\n7 8\n")

  assert weights.tolist() == [[1, 2, 3], [4, 5, 6]]
  assert bias.tolist() == [7, 8]

def test_onnx_matches_affine(tmp_path, affine_model):
  pytest.importorskip("onnxruntime")
  path = _onnx_affine(str(tmp_path / "wf.onnx"), [[1, -1]], [0])
  store = ModelStore()
  handle = store.load("onnx", path)
  store.load("affine", affine_model)

  assert (handle.input_len, handle.output_len) == (2, 1)
  assert handle.backend == ModelBackend.ONNX
  for x in ([3, 1], [0, 0], [0.25, -7.5], [1e3, 2e3]):
    assert abs(store.run("onnx", x)[0] - store.run("affine", x)[0]) <= 1e-6

def test_onnx_integer_input_is_rejected(tmp_path):
  pytest.importorskip("onnxruntime")
  onnx = pytest.importorskip("onnx")
  from onnx import TensorProto, helper

  graph = helper.make_graph(
    [helper.make_node("Identity", ["x"], ["y"])],
    "ints",
    [helper.make_tensor_value_info("x", TensorProto.INT64, [1, 2])],
    [helper.make_tensor_value_info("y", TensorProto.INT64, [1, 2])],
  )
  model = helper.make_model(graph, opset_imports = [helper.make_opsetid("", 13)])
  model.ir_version = 8
  path = str(tmp_path / "ints.onnx")
  onnx.save(model, path)

  with pytest.raises(BadShape):
    ModelStore().load("ints", path)

def test_corrupt_onnx(tmp_path):
  pytest.importorskip("onnxruntime")
  with pytest.raises(BadFormat):
    ModelStore().load("junk", _write(tmp_path, "junk.onnx", "not a model"))
