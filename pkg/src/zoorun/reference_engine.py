"""Deterministic interpreted op-graph engine (weights tag ``reference_graph``).

A graph document is YAML/JSON::

    inputs: [raw]
    outputs: [{name: out, data_type: float32}]
    ops:
      - {op: affine, input: raw, output: h, a: [1, 2], b: 0}
      - {op: blur3, input: h, output: out}

Ops run in document order with float64 arithmetic in a fixed evaluation
order, so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GraphError, OddSizeError, ProcessingError
from .model_spec import load_document
from .ndtensor import DType, Tensor, cast, from_array
from .processing import _per_channel, sigmoid

OP_KINDS = ("affine", "relu", "sigmoid", "avgpool2", "upsample2", "blur3")
_OP_PARAMS = {"affine": {"a", "b"}}


@dataclass(frozen=True)
class RefOp:
    kind: str
    input: str
    output: str
    params: dict


@dataclass(frozen=True)
class RefGraph:
    inputs: tuple[str, ...]
    outputs: tuple[tuple[str, DType], ...]
    ops: tuple[RefOp, ...]

    @property
    def output_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.outputs)


def _number_or_list(value, where):
    if isinstance(value, list) and value and all(_is_number(v) for v in value):
        return [float(v) for v in value]
    if _is_number(value):
        return float(value)
    raise GraphError(f"{where}: expected a number or list of numbers, got {value!r}")


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def parse_graph(text) -> RefGraph:
    """Validate a graph from document text, or from an already parsed document."""
    doc = text if isinstance(text, (dict, list)) else load_document(text)
    if not isinstance(doc, dict):
        raise GraphError("graph document must be a mapping")
    extra = set(doc) - {"inputs", "outputs", "ops"}
    if extra:
        raise GraphError(f"unknown graph fields: {sorted(extra)}")
    inputs = doc.get("inputs")
    if not isinstance(inputs, list) or not inputs or not all(isinstance(n, str) and n for n in inputs):
        raise GraphError("inputs must be a non-empty list of names")
    if len(set(inputs)) != len(inputs):
        raise GraphError("duplicate graph input name")

    outputs = []
    for i, entry in enumerate(doc.get("outputs") or []):
        if isinstance(entry, str):
            entry = {"name": entry}
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            raise GraphError(f"outputs[{i}] must be a name or {{name, data_type}}")
        if set(entry) - {"name", "data_type"}:
            raise GraphError(f"outputs[{i}]: unknown fields {sorted(set(entry) - {'name', 'data_type'})}")
        try:
            dtype = DType.parse(entry.get("data_type", "float32"))
        except ValueError as exc:
            raise GraphError(f"outputs[{i}]: {exc}") from None
        outputs.append((entry["name"], dtype))
    if not outputs:
        raise GraphError("outputs must be a non-empty list")

    defined = set(inputs)
    ops = []
    for i, entry in enumerate(doc.get("ops") or []):
        where = f"ops[{i}]"
        if not isinstance(entry, dict):
            raise GraphError(f"{where} must be a mapping")
        kind = entry.get("op")
        if kind not in OP_KINDS:
            raise GraphError(f"{where}: unknown op {kind!r}")
        src, dst = entry.get("input"), entry.get("output")
        if not isinstance(src, str) or not isinstance(dst, str) or not dst:
            raise GraphError(f"{where}: input and output names are required")
        if src not in defined:
            raise GraphError(f"{where}: input {src!r} is not defined by an earlier op or graph input")
        if dst in defined:
            raise GraphError(f"{where}: output {dst!r} is already defined")
        allowed = _OP_PARAMS.get(kind, set())
        params = {k: v for k, v in entry.items() if k not in ("op", "input", "output")}
        if set(params) != allowed:
            raise GraphError(f"{where}: {kind} takes parameters {sorted(allowed)}, got {sorted(params)}")
        params = {k: _number_or_list(v, f"{where}.{k}") for k, v in params.items()}
        defined.add(dst)
        ops.append(RefOp(kind, src, dst, params))

    for name, _ in outputs:
        if name not in defined:
            raise GraphError(f"graph output {name!r} is never produced")
    return RefGraph(tuple(inputs), tuple(outputs), tuple(ops))


def load_graph(path) -> RefGraph:
    return parse_graph(Path(path).read_text(encoding="utf-8"))


def _spatial(axes: str, kind: str) -> tuple[int, int]:
    if "y" not in axes or "x" not in axes:
        raise GraphError(f"{kind} needs y and x axes, tensor has {axes!r}")
    return axes.index("y"), axes.index("x")


def _take(x: np.ndarray, picks: dict) -> np.ndarray:
    index = [slice(None)] * x.ndim
    for axis, s in picks.items():
        index[axis] = s
    return x[tuple(index)]


def avgpool2(x: np.ndarray, axes: str) -> np.ndarray:
    ya, xa = _spatial(axes, "avgpool2")
    if x.shape[ya] % 2 or x.shape[xa] % 2:
        raise OddSizeError(f"avgpool2 needs even y/x sizes, got {x.shape[ya]}x{x.shape[xa]}")
    s0, s1 = slice(0, None, 2), slice(1, None, 2)
    total = _take(x, {ya: s0, xa: s0}) + _take(x, {ya: s0, xa: s1})
    total = total + _take(x, {ya: s1, xa: s0})
    total = total + _take(x, {ya: s1, xa: s1})
    return total / 4.0


def upsample2(x: np.ndarray, axes: str) -> np.ndarray:
    ya, xa = _spatial(axes, "upsample2")
    return np.repeat(np.repeat(x, 2, axis=ya), 2, axis=xa)


def blur3(x: np.ndarray, axes: str) -> np.ndarray:
    """3x3 box mean over y,x with edge replication, summed row by row."""
    ya, xa = _spatial(axes, "blur3")
    ny, nx = x.shape[ya], x.shape[xa]
    if ny < 1 or nx < 1:
        raise GraphError("blur3 needs spatial sizes >= 1")
    pad = [(0, 0)] * x.ndim
    pad[ya] = (1, 1)
    pad[xa] = (1, 1)
    p = np.pad(x, pad, mode="edge")
    total = None
    for dy in range(3):
        for dx in range(3):
            term = _take(p, {ya: slice(dy, dy + ny), xa: slice(dx, dx + nx)})
            total = term.copy() if total is None else total + term
    return total / 9.0


def _apply(op: RefOp, x: np.ndarray, axes: str) -> np.ndarray:
    if op.kind == "affine":
        try:
            a = _per_channel(op.params["a"], x, axes, "a")
            b = _per_channel(op.params["b"], x, axes, "b")
        except ProcessingError as exc:
            raise GraphError(str(exc)) from None
        return a * x + b
    if op.kind == "relu":
        return np.maximum(x, 0.0)
    if op.kind == "sigmoid":
        return sigmoid(x)
    if op.kind == "avgpool2":
        return avgpool2(x, axes)
    if op.kind == "upsample2":
        return upsample2(x, axes)
    return blur3(x, axes)


def run_graph(graph: RefGraph, inputs: Sequence[Tensor]) -> list[Tensor]:
    if len(inputs) != len(graph.inputs):
        raise GraphError(f"graph takes {len(graph.inputs)} inputs, got {len(inputs)}")
    env: dict[str, tuple[str, np.ndarray]] = {}
    by_name = {t.name: t for t in inputs}
    for name in graph.inputs:
        if name not in by_name:
            raise GraphError(f"missing graph input {name!r} (got {sorted(by_name)})")
        t = by_name[name]
        env[name] = (t.axes, t.data.astype(np.float64))
    for i, op in enumerate(graph.ops):
        axes, x = env[op.input]
        try:
            env[op.output] = (axes, _apply(op, x, axes))
        except GraphError as exc:
            raise type(exc)(f"op {i} ({op.kind}): {exc}") from None
    out = []
    for name, dtype in graph.outputs:
        axes, x = env[name]
        out.append(cast(from_array(name, axes, x, DType.F64), dtype))
    return out


class ReferenceBackend:
    """Adapter used by the engine worker process."""

    weights_tag = "reference_graph"

    def __init__(self):
        self.graph = None

    def load(self, weights_path) -> dict:
        self.graph = load_graph(weights_path)
        return {"inputs": list(self.graph.inputs), "outputs": list(self.graph.output_names)}

    def run(self, tensors: Sequence[Tensor]) -> list[Tensor]:
        if self.graph is None:
            raise GraphError("no model loaded")
        return run_graph(self.graph, tensors)
