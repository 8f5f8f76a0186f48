import math
import weakref
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import zoorun.tiling as tiling
from descriptor_corpus import SHA
from oracles import blur3 as blur3_oracle
from zoorun.errors import BadTile, NonIntegralScale, ShapeMismatch
from zoorun.model_spec import descriptor_from_dict
from zoorun.ndtensor import from_array
from zoorun.reference_engine import parse_graph, run_graph
from zoorun.tiling import plan_axis, plan_tiles, run_tiled


def out_spec(axes, scale=None, halo=None, name="out", ref="raw"):
    scale = scale or [1] * len(axes)
    doc = {
        "name": "t", "format_version": "0.4.10",
        "weights": {"reference_graph": {"source": "w", "sha256": SHA}},
        "inputs": [{"name": ref, "axes": axes, "data_type": "float32", "shape": [1] * len(axes)}],
        "outputs": [{"name": name, "axes": axes, "data_type": "float32",
                     "shape": {"reference_tensor": ref, "scale": list(scale), "offset": [0] * len(axes)}}],
    }
    if halo:
        doc["outputs"][0]["halo"] = list(halo)
    return descriptor_from_dict(doc).outputs[0]


def graph_infer(op, out="out", dtype="float64"):
    ops = [{"op": op, "input": "raw", "output": out}] if op else []
    g = parse_graph({"inputs": ["raw"], "outputs": [{"name": out, "data_type": dtype}],
                     "ops": ops or [{"op": "affine", "input": "raw", "output": out, "a": 1.0, "b": 0.0}]})
    return lambda ts: run_graph(g, ts)


def image(shape, seed=0, axes="yx"):
    rng = np.random.default_rng(seed)
    return from_array("raw", axes, rng.normal(size=shape))


# -- plan examples ------------------------------------------------------------

def test_plan_two_tiles_with_halo():
    ap = plan_axis("x", 8, 6, halo=1)
    assert ap.core == 4 and ap.count == 2
    assert ap.cores == ((0, 4), (4, 8))
    assert [(s, s + 6) for s in ap.starts] == [(-1, 5), (3, 9)]


def test_plan_border_replication():
    x = from_array("raw", "x", np.arange(8, dtype=np.float64))
    plan = plan_tiles(x.shape, "x", {"x": 6}, halo={"x": 1})
    from zoorun.ndtensor import pad_edge
    first, last = (pad_edge(x, t.input_ranges).data.tolist() for t in plan.tiles)
    assert first == [0, 0, 1, 2, 3, 4]
    assert last == [3, 4, 5, 6, 7, 7]


def test_plan_single_tile():
    ap = plan_axis("y", 8, 10, halo=1)
    assert ap.count == 1
    assert ap.cores == ((0, 8),)
    assert ap.starts == (-1,)


def test_plan_no_halo():
    ap = plan_axis("x", 8, 4)
    assert ap.cores == ((0, 4), (4, 8))
    assert ap.starts == (0, 4)


def test_plan_last_tile_shifted_left():
    ap = plan_axis("x", 10, 4)
    assert ap.starts == (0, 4, 6)
    assert ap.cores == ((0, 4), (4, 8), (8, 10))


def test_extent_too_small_for_halo():
    with pytest.raises(BadTile):
        plan_axis("x", 8, 2, halo=1)


def test_halo_not_integral_in_input():
    with pytest.raises(NonIntegralScale):
        plan_axis("x", 8, 6, halo=1, scale=2)


def test_core_not_integral_in_output():
    with pytest.raises(NonIntegralScale):
        plan_axis("x", 8, 3, scale=Fraction(1, 2))


def test_only_spatial_axes_tiled():
    with pytest.raises(BadTile):
        plan_tiles((2, 8, 8), "cyx", {"c": 1})
    with pytest.raises(BadTile):
        plan_tiles((8, 8), "yx", {"z": 4})


def test_untiled_axes_pass_through():
    plan = plan_tiles((1, 3, 10, 12), "bcyx", {"y": 4, "x": 6})
    assert plan.tile_shape == (1, 3, 4, 6)
    assert len(plan.tiles) == math.ceil(10 / 4) * 2


# -- plan properties ----------------------------------------------------------

@st.composite
def axis_cases(draw):
    scale = draw(st.sampled_from([Fraction(1), Fraction(2), Fraction(1, 2)]))
    h_in = draw(st.integers(0, 4))
    if scale == Fraction(1, 2):
        h_in *= 2
    core = draw(st.integers(1, 12))
    if scale == Fraction(1, 2):
        core *= 2
    n = draw(st.integers(1, 60))
    if scale == Fraction(1, 2):
        n = 2 * ((n + 1) // 2)  # a half-scale model needs even sizes
    return n, core + 2 * h_in, int(h_in * scale), scale


@settings(max_examples=300)
@given(axis_cases())
def test_plan_axis_laws(case):
    n, extent, halo, scale = case
    ap = plan_axis("x", n, extent, halo, scale)
    h = ap.halo
    assert ap.count == math.ceil(n / ap.core)
    assert ap.core >= 1
    # cores partition [0, n)
    written = np.zeros(n, int)
    for a, b in ap.cores:
        written[a:b] += 1
    assert (written == 1).all()
    covered = np.zeros(n, bool)
    for start, (a, b) in zip(ap.starts, ap.cores):
        stop = start + extent
        covered[max(start, 0):min(stop, n)] = True
        # the kept core sits inside the tile with full context on both sides
        # unless the context would come from padding anyway
        assert start <= a and b <= stop
        assert a - start >= h or start < 0
        assert stop - b >= h or stop > n
    assert covered.all()
    # output cores are integral and partition [0, scale*n)
    out = [(scale * a, scale * b) for a, b in ap.cores]
    assert all(Fraction(v).denominator == 1 for pair in out for v in pair)
    assert out[0][0] == 0 and out[-1][1] == scale * n


@settings(max_examples=100)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 8), st.integers(1, 8))
def test_plan_tiles_every_tile_has_extent(ny, nx, ty, tx):
    plan = plan_tiles((ny, nx), "yx", {"y": ty, "x": tx})
    for t in plan.tiles:
        for letter, (a, b) in t.input_ranges.items():
            assert b - a == plan.axis(letter).extent


# -- stitching ----------------------------------------------------------------

def test_identity_any_plan_byte_identical():
    x = image((13, 9))
    for ty, tx, h in [(4, 4, 0), (5, 3, 1), (13, 9, 0), (7, 6, 2)]:
        plan = plan_tiles(x.shape, "yx", {"y": ty, "x": tx}, halo={"y": h, "x": h})
        (y,) = run_tiled(graph_infer(None), [x], plan, [out_spec("yx")])
        assert y.tobytes() == x.tobytes()


def test_blur_tiled_matches_untiled():
    x = image((16, 16), seed=3)
    spec = out_spec("yx", halo=[1, 1])
    infer = graph_infer("blur3")
    (whole,) = infer([x])
    plan = plan_tiles(x.shape, "yx", {"y": 10, "x": 10}, halo={"y": 1, "x": 1})
    assert len(plan.tiles) == 4
    (tiled,) = run_tiled(infer, [x], plan, [spec])
    assert tiled.tobytes() == whole.tobytes()
    # and against the nested-loop oracle
    ref = blur3_oracle(x.data.tolist())
    assert np.array_equal(tiled.data, np.array(ref))


def test_blur_without_halo_shows_seams():
    x = image((16, 16), seed=3)
    infer = graph_infer("blur3")
    (whole,) = infer([x])
    plan = plan_tiles(x.shape, "yx", {"y": 8, "x": 8})
    (tiled,) = run_tiled(infer, [x], plan, [out_spec("yx")])
    diff = tiled.data != whole.data
    assert diff.any()
    # the damage is confined to rows and columns next to the seam at 8
    rows, cols = np.nonzero(diff)
    assert all(r in (7, 8) or c in (7, 8) for r, c in zip(rows, cols))


@settings(max_examples=60, deadline=None)
@given(
    ny=st.integers(1, 24), nx=st.integers(1, 24),
    cy=st.integers(1, 10), cx=st.integers(1, 10),
    h=st.integers(1, 3), seed=st.integers(0, 2**16),
)
def test_seamless_when_halo_covers_receptive_field(ny, nx, cy, cx, h, seed):
    x = image((1, ny, nx, 2), seed, axes="byxc")
    infer = graph_infer("blur3")
    (whole,) = infer([x])
    plan = plan_tiles(x.shape, "byxc", {"y": cy + 2 * h, "x": cx + 2 * h}, halo={"y": h, "x": h})
    (tiled,) = run_tiled(infer, [x], plan, [out_spec("byxc", halo=[0, h, h, 0])])
    assert tiled.tobytes() == whole.tobytes()


@pytest.mark.parametrize("ny,nx,t", [(16, 20, 8), (18, 18, 4), (6, 10, 6), (2, 2, 2)])
def test_avgpool_half_scale(ny, nx, t):
    x = image((1, ny, nx, 1), axes="byxc")
    infer = graph_infer("avgpool2")
    (whole,) = infer([x])
    spec = out_spec("byxc", scale=[1, 0.5, 0.5, 1])
    plan = plan_tiles(x.shape, "byxc", {"y": t, "x": t}, scale={"y": Fraction(1, 2), "x": Fraction(1, 2)})
    (tiled,) = run_tiled(infer, [x], plan, [spec])
    assert tiled.shape == (1, ny // 2, nx // 2, 1)
    assert tiled.tobytes() == whole.tobytes()


@pytest.mark.parametrize("ny,nx,t", [(9, 7, 4), (5, 5, 2), (3, 8, 3)])
def test_upsample_double_scale(ny, nx, t):
    x = image((1, ny, nx, 1), axes="byxc")
    infer = graph_infer("upsample2")
    (whole,) = infer([x])
    spec = out_spec("byxc", scale=[1, 2, 2, 1])
    plan = plan_tiles(x.shape, "byxc", {"y": t, "x": t}, scale={"y": 2, "x": 2})
    (tiled,) = run_tiled(infer, [x], plan, [spec])
    assert tiled.shape == (1, 2 * ny, 2 * nx, 1)
    assert tiled.tobytes() == whole.tobytes()


@settings(max_examples=40, deadline=None)
@given(ny=st.integers(1, 20), nx=st.integers(1, 20), ty=st.integers(1, 7), tx=st.integers(1, 7),
       h=st.integers(0, 2))
def test_every_output_element_written_once(ny, nx, ty, tx, h):
    assume(ty > 2 * h and tx > 2 * h)
    x = image((ny, nx))
    counts = {}
    real_blit = tiling.blit

    def counting_blit(dst, src, offsets):
        shadow = counts.setdefault(id(dst), np.zeros(dst.shape, int))
        shadow[tuple(slice(o, o + n) for o, n in zip(offsets, src.shape))] += 1
        real_blit(dst, src, offsets)

    tiling.blit = counting_blit
    try:
        plan = plan_tiles(x.shape, "yx", {"y": ty, "x": tx}, halo={"y": h, "x": h})
        run_tiled(graph_infer(None), [x], plan, [out_spec("yx", halo=[h, h])])
    finally:
        tiling.blit = real_blit
    (shadow,) = counts.values()
    assert (shadow == 1).all()


def test_memory_bound_one_tile_live():
    x = image((1, 40, 40, 1), axes="byxc")
    plan = plan_tiles(x.shape, "byxc", {"y": 12, "x": 12}, halo={"y": 1, "x": 1})
    base = graph_infer("blur3")
    seen_in, seen_out, peaks = [], [], []

    def infer(ts):
        peaks.append((sum(r() is not None for r in seen_in), sum(r() is not None for r in seen_out)))
        outs = base(ts)
        seen_in.extend(weakref.ref(t.data) for t in ts)
        seen_out.extend(weakref.ref(o.data) for o in outs)
        return outs

    run_tiled(infer, [x], plan, [out_spec("byxc", halo=[0, 1, 1, 0])])
    assert len(peaks) == len(plan.tiles) > 4
    # on entry to each tile: no earlier tile input is alive, at most the
    # previous tile's output is
    assert all(live_in == 0 and live_out <= 1 for live_in, live_out in peaks)


def test_infer_error_names_tile():
    x = image((8, 8))
    plan = plan_tiles(x.shape, "yx", {"y": 4, "x": 4})
    calls = []

    def infer(ts):
        calls.append(1)
        if len(calls) == 3:
            raise ValueError("boom")
        return [ts[0].renamed("out")]

    with pytest.raises(ValueError, match=r"tile 2 \(1, 0\): boom"):
        run_tiled(infer, [x], plan, [out_spec("yx")])


def test_tile_output_violating_shape_law():
    x = image((8, 8))
    plan = plan_tiles(x.shape, "yx", {"y": 4, "x": 4})

    def infer(ts):
        return [from_array("out", "yx", np.zeros((4, 3)))]

    with pytest.raises(ShapeMismatch, match="tile 0"):
        run_tiled(infer, [x], plan, [out_spec("yx")])


def test_wrong_output_count():
    x = image((8, 8))
    plan = plan_tiles(x.shape, "yx", {"y": 4, "x": 4})
    with pytest.raises(ShapeMismatch, match="outputs"):
        run_tiled(lambda ts: [], [x], plan, [out_spec("yx")])


def test_offset_on_tiled_axis_rejected():
    doc_spec = out_spec("yx")
    from dataclasses import replace
    shape = replace(doc_spec.shape, offset=(0, 2))
    spec = replace(doc_spec, shape=shape)
    x = image((8, 8))
    plan = plan_tiles(x.shape, "yx", {"x": 4})
    with pytest.raises(BadTile, match="offset"):
        run_tiled(graph_infer(None), [x], plan, [spec])


def test_input_size_must_match_plan():
    plan = plan_tiles((8, 8), "yx", {"x": 4})
    with pytest.raises(BadTile):
        run_tiled(graph_infer(None), [image((8, 9))], plan, [out_spec("yx")])
