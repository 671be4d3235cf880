"""Gradient attribution proxies: integrated gradients and its cheap variants.

All three methods share one output type carrying signed per-(variable, cell)
scores plus provenance.  Signs are preserved here; absolute values are taken
only at the aggregation step (variable/spatial importance), because the
detection side of the pipeline needs direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Climatology, FieldTensor, StationGrid

METHODS = ("ig", "gti", "vg")
BASELINES = ("climatology", "zero", "persistence")


@dataclass(frozen=True)
class AttributionConfig:
    """Method plus baseline choice; `steps` only matters for "ig"."""

    method: str = "ig"
    baseline: str = "climatology"
    steps: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class AttributionMap:
    """Signed scores, same shape as the input field, with provenance."""

    values: np.ndarray
    method: str
    baseline: str
    steps: int
    timestamp: int
    model_id: str
    n_gradient_evals: int

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("attribution map contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)


def _check_shapes(model, x: np.ndarray, baseline: np.ndarray | None = None):
    if x.shape != model.grid.shape:
        raise ValueError(f"input shape {x.shape} does not match model grid {model.grid.shape}")
    if baseline is not None and baseline.shape != x.shape:
        raise ValueError(f"baseline shape {baseline.shape} does not match input {x.shape}")


def integrated_gradients(model, x: FieldTensor, baseline: np.ndarray, steps: int = 50,
                         baseline_name: str = "climatology") -> AttributionMap:
    """Path-integrated gradients from the baseline to the input.

    Trapezoidal quadrature over steps+1 nodes at k/steps along the straight
    path, endpoint weights 0.5, interior weights 1, so the method costs
    steps+1 gradient evaluations.  Scores are (x - baseline) times the
    averaged path gradient; for a linear model this is exact at any step
    count, and the signed scores sum to F(x) - F(baseline) up to quadrature
    error (completeness).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    xv = x.values
    _check_shapes(model, xv, baseline)
    diff = xv - baseline
    alphas = np.arange(steps + 1) / steps
    points = baseline[None] + alphas[:, None, None, None] * diff[None]
    grads = model.gradient_many(points)
    weights = np.ones(steps + 1)
    weights[0] = weights[-1] = 0.5
    avg = np.tensordot(weights, grads, axes=1) / steps
    return AttributionMap(values=diff * avg, method="ig", baseline=baseline_name,
                          steps=steps, timestamp=x.timestamp, model_id=model.model_id,
                          n_gradient_evals=steps + 1)


def gradient_times_input(model, x: FieldTensor, baseline: np.ndarray,
                         baseline_name: str = "climatology") -> AttributionMap:
    """(x - baseline) times the gradient at x; exactly one backward pass."""
    xv = x.values
    _check_shapes(model, xv, baseline)
    g = model.gradient_values(xv)
    return AttributionMap(values=(xv - baseline) * g, method="gti", baseline=baseline_name,
                          steps=1, timestamp=x.timestamp, model_id=model.model_id,
                          n_gradient_evals=1)


def vanilla_gradient(model, x: FieldTensor) -> AttributionMap:
    """Raw input gradient at x, no input-relative scaling; one backward pass."""
    xv = x.values
    _check_shapes(model, xv)
    g = model.gradient_values(xv)
    return AttributionMap(values=g, method="vg", baseline="none", steps=1,
                          timestamp=x.timestamp, model_id=model.model_id,
                          n_gradient_evals=1)


def persistence_baseline(fields: list[FieldTensor], t: int) -> np.ndarray:
    """The previous timestamp's field; undefined at t = 0."""
    if t < 1:
        raise ValueError("persistence baseline needs a predecessor (t >= 1)")
    if t >= len(fields):
        raise IndexError(f"timestamp {t} out of range")
    return fields[t - 1].values


def baseline_values(config: AttributionConfig, clim: Climatology,
                    fields: list[FieldTensor] | None, t: int) -> np.ndarray:
    if config.baseline == "climatology":
        return clim.values
    if config.baseline == "zero":
        return np.zeros(clim.grid.shape)
    if fields is None:
        raise ValueError("persistence baseline needs the ordered field list")
    return persistence_baseline(fields, t)


def attribute(model, x: FieldTensor, config: AttributionConfig, clim: Climatology,
              fields: list[FieldTensor] | None = None) -> AttributionMap:
    """Dispatch one attribution computation according to `config`."""
    if config.method == "vg":
        return vanilla_gradient(model, x)
    base = baseline_values(config, clim, fields, x.timestamp)
    if config.method == "ig":
        return integrated_gradients(model, x, base, config.steps, config.baseline)
    return gradient_times_input(model, x, base, config.baseline)


def variable_importance(attr: AttributionMap) -> np.ndarray:
    """Per-variable importance: absolute scores summed over all cells."""
    return np.abs(attr.values).sum(axis=(1, 2))


def spatial_importance(attr: AttributionMap, stations: StationGrid) -> np.ndarray:
    """Per-station importance: absolute scores summed over variables at the cell."""
    if stations.grid.shape != attr.values.shape:
        raise ValueError("station grid does not match attribution shape")
    return np.abs(attr.values).sum(axis=0)[stations.lat_idx, stations.lon_idx]


def spatial_signed(attr: AttributionMap, stations: StationGrid) -> np.ndarray:
    """Signed per-station sum over variables (kept for detection diagnostics)."""
    if stations.grid.shape != attr.values.shape:
        raise ValueError("station grid does not match attribution shape")
    return attr.values.sum(axis=0)[stations.lat_idx, stations.lon_idx]


def time_average(vectors: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Unweighted mean of equal-length score vectors."""
    if len(vectors) == 0:
        raise ValueError("cannot average an empty list")
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("vectors must share one length")
    return arr.mean(axis=0)
