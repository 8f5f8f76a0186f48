"""Pre- and post-processing steps.

All arithmetic runs in float64 regardless of the input dtype; the chain's
result is cast once, at the end, to the declared data type. Each step is a
plain function over a float64 array plus the tensor's axes string, so the
steps can be used and tested on their own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ProcessingError
from .model_spec import ProcStep
from .ndtensor import DType, Tensor, cast, from_array

DEFAULT_EPS = 1e-6


@dataclass
class ProcContext:
    """Per-execution record of statistics computed by per-sample steps."""

    sample_stats: dict = field(default_factory=dict)

    def record(self, key, stats: dict):
        if key in self.sample_stats:
            raise ProcessingError(f"statistics for {key} already recorded in this execution")
        self.sample_stats[key] = stats


def _reduce_axes(tensor_axes: str, stat_axes: Optional[str]) -> tuple[int, ...]:
    if stat_axes is None:
        return tuple(range(len(tensor_axes)))
    missing = [a for a in stat_axes if a not in tensor_axes]
    if missing:
        raise ProcessingError(f"statistics axes {stat_axes!r} not all in tensor axes {tensor_axes!r}")
    return tuple(tensor_axes.index(a) for a in stat_axes)


def _per_channel(value, x: np.ndarray, tensor_axes: str, what: str):
    """Scalar, or a list broadcast along the ``c`` axis."""
    if not isinstance(value, (list, tuple)):
        return float(value)
    if len(value) == 1:
        return float(value[0])
    if "c" not in tensor_axes:
        raise ProcessingError(f"{what} has {len(value)} entries but the tensor has no channel axis")
    c = tensor_axes.index("c")
    if x.shape[c] != len(value):
        raise ProcessingError(f"{what} has {len(value)} entries for {x.shape[c]} channels")
    shape = [1] * x.ndim
    shape[c] = len(value)
    return np.asarray(value, dtype=np.float64).reshape(shape)


def binarize(x: np.ndarray, threshold: float) -> np.ndarray:
    return (x > threshold).astype(np.float64)


def clip(x: np.ndarray, min: float, max: float) -> np.ndarray:
    return np.minimum(np.maximum(x, min), max)


def scale_linear(x: np.ndarray, tensor_axes: str, gain=1.0, offset=0.0) -> np.ndarray:
    g = _per_channel(gain, x, tensor_axes, "gain")
    o = _per_channel(offset, x, tensor_axes, "offset")
    return g * x + o


def sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def zero_mean_unit_variance(
    x: np.ndarray,
    tensor_axes: str,
    mode: str = "per_sample",
    axes: Optional[str] = None,
    eps: float = DEFAULT_EPS,
    mean=None,
    std=None,
    stats: Optional[dict] = None,
) -> np.ndarray:
    """(x - mean) / (std + eps) with population std.

    In per_sample mode, statistics are taken over ``axes`` (all axes when
    omitted) and written into ``stats`` if a dict is given.
    """
    if mode == "fixed":
        if mean is None or std is None:
            raise ProcessingError("fixed mode needs mean and std")
        m = _per_channel(mean, x, tensor_axes, "mean")
        s = _per_channel(std, x, tensor_axes, "std")
    elif mode == "per_sample":
        if x.size == 0:
            return x.copy()
        red = _reduce_axes(tensor_axes, axes)
        m = np.mean(x, axis=red, keepdims=True)
        s = np.sqrt(np.mean((x - m) ** 2, axis=red, keepdims=True))
        if stats is not None:
            stats.update(mean=m, std=s)
    else:
        raise ProcessingError(f"unsupported statistics mode {mode!r}")
    return (x - m) / (s + eps)


def scale_range(
    x: np.ndarray,
    tensor_axes: str,
    min_percentile: float = 0.0,
    max_percentile: float = 100.0,
    axes: Optional[str] = None,
    eps: float = DEFAULT_EPS,
    mode: str = "per_sample",
    stats: Optional[dict] = None,
) -> np.ndarray:
    """(x - p_lo) / (p_hi - p_lo + eps) with linearly interpolated percentiles."""
    if mode != "per_sample":
        raise ProcessingError(f"scale_range supports only per_sample mode, got {mode!r}")
    if x.size == 0:
        return x.copy()
    red = _reduce_axes(tensor_axes, axes)
    lo, hi = np.percentile(
        x, [min_percentile, max_percentile], axis=red, keepdims=True, method="linear"
    )
    if stats is not None:
        stats.update(lo=lo, hi=hi)
    return (x - lo) / (hi - lo + eps)


def apply_step(step: ProcStep, x: np.ndarray, tensor_axes: str, stats: Optional[dict] = None) -> np.ndarray:
    kw = step.kwargs
    if step.name == "binarize":
        return binarize(x, kw["threshold"])
    if step.name == "clip":
        return clip(x, kw["min"], kw["max"])
    if step.name == "scale_linear":
        return scale_linear(x, tensor_axes, kw.get("gain", 1.0), kw.get("offset", 0.0))
    if step.name == "sigmoid":
        return sigmoid(x)
    if step.name == "zero_mean_unit_variance":
        return zero_mean_unit_variance(x, tensor_axes, stats=stats, **kw)
    if step.name == "scale_range":
        return scale_range(x, tensor_axes, stats=stats, **kw)
    raise ProcessingError(f"unknown processing step {step.name!r}")


def apply_chain(
    steps: Sequence[ProcStep],
    t: Tensor,
    ctx: Optional[ProcContext] = None,
    data_type: DType | str | None = None,
) -> Tensor:
    """Apply ``steps`` in order and cast the result to ``data_type``
    (the input dtype when omitted)."""
    target = DType.parse(data_type) if data_type is not None else t.dtype
    if not steps:
        return cast(t, target)
    x = t.data.astype(np.float64)
    for i, step in enumerate(steps):
        stats = {} if step.mode == "per_sample" else None
        try:
            x = apply_step(step, x, t.axes, stats)
        except ProcessingError as exc:
            raise ProcessingError(f"{t.name}: step {i} ({step.name}): {exc}") from None
        if stats and ctx is not None:
            ctx.record((t.name, i), stats)
    return cast(from_array(t.name, t.axes, x, DType.F64), target)
