"""Halo-aware tiling and stitching.

Along each tiled axis an input of size N is cut into tiles of a fixed extent
T (the size the model sees), each carrying ``h_in`` samples of context on both
sides around a core of C = T - 2*h_in samples. Cores partition [0, N); only
the core of each tile's output is kept. Samples outside the image are edge
replicated. The last tile is shifted left so that it still has extent T;
its stitched core is cut short where it overlaps the previous tile's core.

With a halo at least the model's receptive-field radius the stitched result
equals the untiled result exactly.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import BadTile, NonIntegralScale, ShapeMismatch
from .model_spec import Explicit, Implicit, TensorSpecEntry, output_shape_for
from .ndtensor import SPATIAL_AXES, Tensor, _frozen, blit, pad_edge

log = logging.getLogger(__name__)

DEFAULT_TILE = 512


@dataclass(frozen=True)
class AxisPlan:
    letter: str
    size: int
    extent: int
    halo: int  # in input samples
    core: int
    scale: Fraction
    starts: tuple[int, ...]  # tile input starts (may be negative)
    cores: tuple[tuple[int, int], ...]  # stitched cores, input coordinates

    @property
    def count(self) -> int:
        return len(self.starts)

    @property
    def tiled(self) -> bool:
        return self.count > 1 or self.extent != self.size


@dataclass(frozen=True)
class Tile:
    index: tuple[int, ...]
    input_ranges: dict  # letter -> (start, stop), may extend past the image
    core_ranges: dict  # letter -> (start, stop), input coordinates
    crop: dict  # letter -> offset of the core inside the tile, input samples

    def output_core(self, letter: str, scale) -> tuple[int, int]:
        a, b = self.core_ranges[letter]
        return _integral(scale * a, letter), _integral(scale * b, letter)


@dataclass(frozen=True)
class TilePlan:
    axes: str
    input_shape: tuple[int, ...]
    axis_plans: tuple[AxisPlan, ...]
    tiles: tuple[Tile, ...]

    def axis(self, letter: str) -> AxisPlan:
        for ap in self.axis_plans:
            if ap.letter == letter:
                return ap
        raise KeyError(letter)

    @property
    def tiled_letters(self) -> list[str]:
        return [ap.letter for ap in self.axis_plans]

    @property
    def tile_shape(self) -> tuple[int, ...]:
        extents = {ap.letter: ap.extent for ap in self.axis_plans}
        return tuple(extents.get(a, n) for a, n in zip(self.axes, self.input_shape))


def _integral(value: Fraction, letter: str) -> int:
    if Fraction(value).denominator != 1:
        raise NonIntegralScale(letter, f"axis {letter!r}: {value} is not an integer")
    return int(value)


def _as_map(value, letters, default):
    if value is None:
        return {a: default for a in letters}
    if isinstance(value, Mapping):
        return dict(value)
    return dict(zip(letters, value))


def plan_axis(letter: str, size: int, extent: int, halo: int = 0, scale=1) -> AxisPlan:
    """Plan one axis. ``halo`` is in output samples; input overlap is halo/scale."""
    scale = Fraction(scale)
    if size < 1:
        raise BadTile(f"axis {letter!r}: cannot tile an empty axis")
    if scale <= 0:
        raise BadTile(f"axis {letter!r}: scale must be positive to tile")
    h_in = Fraction(halo) / scale
    if h_in.denominator != 1:
        raise NonIntegralScale(letter, f"axis {letter!r}: halo {halo} / scale {scale} is not an integer")
    h_in = int(h_in)
    if extent <= 2 * h_in:
        raise BadTile(f"axis {letter!r}: tile extent {extent} leaves no core after halo {h_in} on each side")
    core = extent - 2 * h_in
    _integral(scale * core, letter)
    count = math.ceil(size / core)
    starts, cores = [], []
    for j in range(count):
        core_start = j * core if j < count - 1 else max(size - core, 0)
        starts.append(core_start - h_in)
        cores.append((j * core, min((j + 1) * core, size)))
    return AxisPlan(letter, size, extent, h_in, core, scale, tuple(starts), tuple(cores))


def plan_tiles(
    input_shape: Sequence[int],
    axes: str,
    tile_extent,
    halo=None,
    scale=None,
) -> TilePlan:
    """Tile the spatial axes named in ``tile_extent`` (mapping letter -> T, or
    a sequence over the spatial axes in order). Other axes pass through whole.
    ``halo`` is in output samples; ``scale`` is output/input size per axis."""
    input_shape = tuple(int(n) for n in input_shape)
    spatial = [a for a in axes if a in SPATIAL_AXES]
    extents = _as_map(tile_extent, spatial, None)
    for letter in extents:
        if letter not in SPATIAL_AXES:
            raise BadTile(f"only z, y, x axes can be tiled, not {letter!r}")
        if letter not in axes:
            raise BadTile(f"tile axis {letter!r} not in {axes!r}")
    halos = _as_map(halo, spatial, 0)
    scales = _as_map(scale, spatial, 1)
    plans = []
    for letter in axes:
        if letter in extents and extents[letter] is not None:
            n = input_shape[axes.index(letter)]
            plans.append(plan_axis(letter, n, int(extents[letter]), int(halos.get(letter, 0)),
                                   scales.get(letter, 1)))
    tiles = []
    for idx in itertools.product(*(range(ap.count) for ap in plans)):
        inp, cores, crop = {}, {}, {}
        for j, ap in zip(idx, plans):
            start = ap.starts[j]
            inp[ap.letter] = (start, start + ap.extent)
            cores[ap.letter] = ap.cores[j]
            crop[ap.letter] = ap.cores[j][0] - start
        tiles.append(Tile(tuple(idx), inp, cores, crop))
    return TilePlan(axes, input_shape, tuple(plans), tuple(tiles))


def _output_scale(spec: TensorSpecEntry, position: int) -> tuple[Fraction, int]:
    rule = spec.shape
    if isinstance(rule, Implicit):
        return rule.scale[position], rule.offset[position]
    raise BadTile(f"output {spec.name!r} has an explicit shape and cannot be stitched from tiles")


def run_tiled(
    infer: Callable[[list[Tensor]], Sequence[Tensor]],
    inputs: Sequence[Tensor],
    plan: TilePlan,
    output_specs: Sequence[TensorSpecEntry],
) -> list[Tensor]:
    """Run ``infer`` tile by tile and stitch the cores of every output."""
    letters = plan.tiled_letters
    ref_index = {t.name: i for i, t in enumerate(inputs)}
    for t in inputs:
        for ap in plan.axis_plans:
            if t.size_of(ap.letter) != ap.size:
                raise BadTile(f"input {t.name!r} axis {ap.letter!r} has size {t.size_of(ap.letter)}, plan expects {ap.size}")

    layout = []
    for spec in output_specs:
        if isinstance(spec.shape, Explicit) and not plan.axis_plans:
            ref = None
        elif isinstance(spec.shape, Implicit):
            ref = ref_index.get(spec.shape.reference_input, 0)
        else:
            raise BadTile(f"output {spec.name!r} has an explicit shape and cannot be stitched from tiles")
        per_axis = {}
        for letter in letters:
            in_axes = inputs[ref].axes
            pos = in_axes.index(letter)
            if pos >= len(spec.axes) or spec.axes[pos] != letter:
                raise BadTile(f"output {spec.name!r} does not carry tiled axis {letter!r} at position {pos}")
            s, off = _output_scale(spec, pos)
            if off:
                raise BadTile(f"output {spec.name!r} has a nonzero offset on tiled axis {letter!r}")
            per_axis[letter] = s
        full_shape = output_shape_for(spec, inputs[ref].shape) if ref is not None else spec.shape.sizes
        layout.append((spec, ref, per_axis, full_shape))

    buffers: list[Optional[np.ndarray]] = [None] * len(output_specs)
    for k, tile in enumerate(plan.tiles):
        tile_inputs = [pad_edge(t, tile.input_ranges) for t in inputs]
        try:
            outs = list(infer(tile_inputs))
        except Exception as exc:
            exc.args = (f"tile {k} {tile.index}: {exc}",)
            raise
        if len(outs) != len(output_specs):
            raise ShapeMismatch(f"tile {k}: model returned {len(outs)} outputs, expected {len(output_specs)}")
        for o, (out, (spec, ref, per_axis, full_shape)) in enumerate(zip(outs, layout)):
            want = output_shape_for(spec, tile_inputs[ref].shape) if ref is not None else full_shape
            if out.shape != tuple(want):
                raise ShapeMismatch(f"tile {k}: output {spec.name!r} has shape {out.shape}, shape law gives {want}")
            if buffers[o] is None:
                buffers[o] = np.empty(full_shape, dtype=out.data.dtype)
            index, offsets = [], []
            for pos, letter in enumerate(spec.axes):
                if letter in per_axis:
                    s = per_axis[letter]
                    a, b = tile.core_ranges[letter]
                    c0 = _integral(s * tile.crop[letter], letter)
                    n = _integral(s * (b - a), letter)
                    index.append(slice(c0, c0 + n))
                    offsets.append(_integral(s * a, letter))
                else:
                    index.append(slice(None))
                    offsets.append(0)
            blit(buffers[o], out.data[tuple(index)], offsets)
        del tile_inputs, outs
    return [
        Tensor(spec.name, spec.axes, _frozen(buf))
        for buf, (spec, *_rest) in zip(buffers, layout)
    ]
