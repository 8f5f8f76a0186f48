"""End-to-end inference: engine selection, preprocessing, (tiled) inference
in a worker process, postprocessing.

    from zoorun import Model
    with Model.load("models/blur", engines_dir="engines", registry=reg) as m:
        (out,) = m.predict([read_zrt("input.zrt")])
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .engine_worker import ModelSession, open_session
from .engines import (
    EngineRegistry,
    InstalledEngine,
    Platform,
    engine_for_model,
    install_engine,
    list_installed,
)
from .errors import (
    BadAxes,
    BadTile,
    ChecksumMismatch,
    NonIntegralScale,
    NoCompatibleEngine,
    ShapeMismatch,
    UsageError,
)
from .fetch import Fetcher, sha256_file
from .model_spec import DESCRIPTOR_NAME, Implicit, ModelDescriptor, load_descriptor, validate_input_shape
from .ndtensor import SPATIAL_AXES, Tensor, read_zrt, reorder_axes
from .processing import ProcContext, apply_chain
from .tiling import DEFAULT_TILE, TilePlan, plan_tiles, run_tiled

log = logging.getLogger(__name__)

FLOAT_TOLERANCE = 1e-4


def prepare_inputs(descriptor: ModelDescriptor, inputs: Sequence[Tensor]) -> list[Tensor]:
    """Match inputs to the descriptor (by name, else by position), bring them
    into the declared axes order and check their shapes."""
    if len(inputs) != len(descriptor.inputs):
        raise ShapeMismatch(f"model {descriptor.name!r} takes {len(descriptor.inputs)} inputs, got {len(inputs)}")
    by_name = {t.name: t for t in inputs}
    ordered = []
    for i, spec in enumerate(descriptor.inputs):
        t = by_name.get(spec.name, inputs[i])
        if sorted(t.axes) != sorted(spec.axes):
            raise BadAxes(f"input {spec.name!r}: axes {t.axes!r} cannot be arranged as {spec.axes!r}")
        t = reorder_axes(t, spec.axes).renamed(spec.name)
        check = validate_input_shape(spec, t.shape)
        if not check:
            raise ShapeMismatch(f"input {spec.name!r} shape {list(t.shape)} rejected: {check.reason}")
        ordered.append(t)
    return ordered


def tiling_halo(descriptor: ModelDescriptor, letters) -> dict:
    """Input-side overlap per tiled axis: the largest output halo over scale."""
    halo = {}
    missing = False
    for letter in letters:
        need = Fraction(0)
        for out in descriptor.outputs:
            if letter not in out.axes or not isinstance(out.shape, Implicit):
                continue
            pos = out.axes.index(letter)
            if out.halo is None:
                missing = True
                continue
            h_in = Fraction(out.halo[pos]) / out.shape.scale[pos]
            if h_in.denominator != 1:
                raise NonIntegralScale(letter, f"output {out.name!r}: halo {out.halo[pos]} over scale "
                                               f"{out.shape.scale[pos]} is not an integer on axis {letter!r}")
            need = max(need, h_in)
        halo[letter] = int(need)
    if missing:
        log.warning("descriptor declares no halo; tiled outputs may show seams")
    return halo


def choose_tiles(input_shape, axes: str, requested: Optional[Mapping[str, int]], tiling: bool) -> dict:
    """Tile extent per spatial axis: explicit request, else DEFAULT_TILE for
    axes larger than it."""
    if not tiling:
        return {}
    if requested:
        return {a: int(n) for a, n in requested.items() if a in axes}
    return {a: DEFAULT_TILE for a, n in zip(axes, input_shape) if a in SPATIAL_AXES and n > DEFAULT_TILE}


def _check_tile_shape(descriptor: ModelDescriptor, plan: TilePlan):
    for spec in descriptor.inputs:
        shape = plan.tile_shape
        check = validate_input_shape(spec, shape)
        if not check:
            raise BadTile(f"tile shape {list(shape)} is not accepted by input {spec.name!r}: {check.reason}")


@dataclass
class Model:
    """A model loaded into a worker process."""

    descriptor: ModelDescriptor
    model_dir: Path
    session: ModelSession

    @classmethod
    def load(
        cls,
        model_dir,
        engines_dir,
        registry: Optional[EngineRegistry] = None,
        fetcher: Optional[Fetcher] = None,
        auto_install: bool = True,
        plat: Optional[Platform] = None,
        session_options: Optional[dict] = None,
    ) -> "Model":
        model_dir = Path(model_dir)
        descriptor = load_descriptor(model_dir / DESCRIPTOR_NAME)
        tag, engine = select_engine(descriptor, engines_dir, registry, fetcher, auto_install, plat)
        session = open_session(engine, model_dir, tag, **(session_options or {}))
        return cls(descriptor, model_dir, session)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        self.session.close()

    def predict(self, inputs: Sequence[Tensor], tile: Optional[Mapping[str, int]] = None,
                tiling: bool = True) -> list[Tensor]:
        return predict(self.descriptor, self.session.run, inputs, tile=tile, tiling=tiling)


def select_engine(descriptor, engines_dir, registry, fetcher=None, auto_install=True,
                  plat=None) -> tuple[str, InstalledEngine]:
    installed = list_installed(engines_dir)
    tag, spec, needed = engine_for_model(
        descriptor, installed, registry or EngineRegistry(()), plat
    )
    if not needed:
        return tag, next(ie for ie in installed if ie.spec == spec)
    if not auto_install:
        raise NoCompatibleEngine(f"{spec.label} is required but not installed (installation disabled)")
    return tag, install_engine(spec, engines_dir, fetcher)


def predict(descriptor: ModelDescriptor, infer, inputs: Sequence[Tensor],
            tile: Optional[Mapping[str, int]] = None, tiling: bool = True) -> list[Tensor]:
    """Preprocess, infer (tiled when requested or needed), postprocess."""
    ctx = ProcContext()
    prepared = prepare_inputs(descriptor, inputs)
    pre = [apply_chain(spec.processing, t, ctx, spec.data_type) for spec, t in zip(descriptor.inputs, prepared)]

    first = pre[0]
    extents = choose_tiles(first.shape, first.axes, tile, tiling)
    if extents:
        halo = tiling_halo(descriptor, list(extents))
        plan = plan_tiles(first.shape, first.axes, extents, halo)
        _check_tile_shape(descriptor, plan)
        log.info("running %d tiles of shape %s", len(plan.tiles), list(plan.tile_shape))
        raw = run_tiled(infer, pre, plan, descriptor.outputs)
    else:
        raw = list(infer(pre))
    return [
        apply_chain(spec.processing, t.renamed(spec.name), ctx, spec.data_type)
        for spec, t in zip(descriptor.outputs, raw)
    ]


@dataclass(frozen=True)
class OutputVerdict:
    name: str
    passed: bool
    max_abs_diff: float
    tolerance: float
    expected: Tensor
    actual: Tensor


def compare_output(expected: Tensor, actual: Tensor, name: str) -> OutputVerdict:
    """Integer outputs must match bit for bit; floats within FLOAT_TOLERANCE."""
    tol = FLOAT_TOLERANCE if expected.dtype.is_float else 0.0
    if expected.shape != actual.shape or expected.axes != actual.axes or expected.dtype != actual.dtype:
        return OutputVerdict(name, False, float("inf"), tol, expected, actual)
    if expected.data.size == 0:
        return OutputVerdict(name, True, 0.0, tol, expected, actual)
    e = expected.data.astype(np.float64)
    a = actual.data.astype(np.float64)
    diff = np.abs(e - a)
    diff[np.isnan(e) & np.isnan(a)] = 0.0
    worst = float(diff.max())
    if expected.dtype.is_float:
        ok = worst <= tol
    else:
        ok = expected.tobytes() == actual.tobytes()
    return OutputVerdict(name, ok, worst, tol, expected, actual)


def load_test_tensors(model_dir: Path, descriptor: ModelDescriptor):
    if not descriptor.test_inputs or not descriptor.test_outputs:
        raise UsageError(f"model {descriptor.name!r} bundles no test tensors: nothing to test")
    tensors = []
    for group in (descriptor.test_inputs, descriptor.test_outputs):
        loaded = []
        for ref in group:
            path = model_dir / ref.source
            if not path.is_file():
                raise UsageError(f"test tensor {ref.source} is missing")
            digest = sha256_file(path)
            if digest != ref.sha256:
                raise ChecksumMismatch(f"test tensor {ref.source}", ref.sha256, digest)
            loaded.append(read_zrt(path))
        tensors.append(loaded)
    if len(tensors[1]) != len(descriptor.outputs):
        raise ShapeMismatch(f"{len(tensors[1])} test outputs for {len(descriptor.outputs)} model outputs")
    return tensors[0], tensors[1]


def test_model(model: Model, tile=None, tiling: bool = True) -> list[OutputVerdict]:
    """Run the bundled test inputs and compare against the bundled outputs."""
    inputs, expected = load_test_tensors(model.model_dir, model.descriptor)
    actual = model.predict(inputs, tile=tile, tiling=tiling)
    return [
        compare_output(reorder_axes(e, spec.axes) if sorted(e.axes) == sorted(spec.axes) else e,
                       a, spec.name)
        for spec, e, a in zip(model.descriptor.outputs, expected, actual)
    ]


test_model.__test__ = False  # not a pytest test
