"""Baseline load forecasting: hour-of-week profile plus AR(1) residual.

Operates on regularly sampled series (epoch second 0 is Monday 00:00).
The model is deliberately simple — a per-slot seasonal mean with an AR(1)
carry-over — because the quantity of interest downstream is forecast
uncertainty and how it shrinks under aggregation, not squeezing out the
last percent of accuracy.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

WEEK_SLOTS = 168
WEEK_S = 7 * 24 * 3600

__all__ = [
    "ForecastModel",
    "ForecastResult",
    "CvCurvePoint",
    "fit_baseline",
    "forecast",
    "cv_curve",
]


@dataclass(frozen=True)
class ForecastModel:
    """Hour-of-week mean profile plus AR(1) residual dynamics."""

    profile: np.ndarray  # 168 per-slot means
    phi: float  # AR(1) coefficient, |phi| < 1
    innovation_std: float
    interval_s: int
    window: tuple[int, int]  # [start, end] timestamps of the training data
    residuals: np.ndarray  # deseasonalized training residuals
    timestamps: np.ndarray  # training timestamps, uniform grid
    target_id: str = ""

    def slot_of(self, ts: np.ndarray | int) -> np.ndarray | int:
        return (ts // 3600) % WEEK_SLOTS

    def residual_at(self, origin: int) -> float:
        """Training residual at the last tick <= origin, 0 if none stored."""
        i = int(np.searchsorted(self.timestamps, origin, side="right")) - 1
        if i < 0:
            return 0.0
        return float(self.residuals[i])


@dataclass(frozen=True)
class ForecastResult:
    timestamps: np.ndarray  # forecast tick times, origin + h * interval
    mean: np.ndarray
    std: np.ndarray  # non-decreasing in horizon


@dataclass(frozen=True)
class CvCurvePoint:
    size: int  # meters aggregated
    mean_load: float  # per-unit, over the evaluation window
    cv: float  # RMSE / mean load at the stated horizon
    horizon: int  # ticks ahead


def _uniform_interval(timestamps: np.ndarray) -> int:
    steps = np.unique(np.diff(timestamps))
    if len(timestamps) < 2 or len(steps) != 1 or steps[0] <= 0:
        raise ValueError("series timestamps must be a uniform increasing grid")
    return int(steps[0])


def fit_baseline(
    series: np.ndarray,
    timestamps: np.ndarray,
    target_id: str = "",
) -> ForecastModel:
    """Fit the seasonal-mean + AR(1) baseline to one series.

    Requires at least two weeks of uniformly sampled data.  The profile is
    the per-slot mean; phi and the innovation std come from least squares
    on the deseasonalized residuals.
    """
    series = np.asarray(series, dtype=float)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if series.shape != timestamps.shape or series.ndim != 1:
        raise ValueError("series and timestamps must be equal-length 1-d arrays")
    if not np.all(np.isfinite(series)):
        raise ValueError("series contains non-finite values")
    interval = _uniform_interval(timestamps)
    span = int(timestamps[-1] - timestamps[0]) + interval
    if span < 2 * WEEK_S:
        raise ValueError(
            f"training window must cover >= 2 weeks, got {span / 86400:.1f} days"
        )

    slots = (timestamps // 3600) % WEEK_SLOTS
    profile = np.full(WEEK_SLOTS, series.mean())
    sums = np.bincount(slots, weights=series, minlength=WEEK_SLOTS)
    counts = np.bincount(slots, minlength=WEEK_SLOTS)
    filled = counts > 0
    profile[filled] = sums[filled] / counts[filled]

    residuals = series - profile[slots]
    denom = float(residuals[:-1] @ residuals[:-1])
    if denom > 0:
        phi = float(residuals[1:] @ residuals[:-1]) / denom
    else:
        phi = 0.0
    phi = float(np.clip(phi, -0.999, 0.999))
    innov = residuals[1:] - phi * residuals[:-1]
    innovation_std = float(np.sqrt(np.mean(innov * innov))) if len(innov) else 0.0

    profile.flags.writeable = False
    residuals.flags.writeable = False
    return ForecastModel(
        profile=profile,
        phi=phi,
        innovation_std=innovation_std,
        interval_s=interval,
        window=(int(timestamps[0]), int(timestamps[-1])),
        residuals=residuals,
        timestamps=timestamps,
        target_id=target_id,
    )


def forecast(
    model: ForecastModel,
    origin: int,
    horizon: int,
    origin_value: Optional[float] = None,
) -> ForecastResult:
    """Forecast ``horizon`` ticks past ``origin`` with per-tick stds.

    mean(h) = profile(t+h) + phi^h * r(origin);
    std(h) = innovation_std * sqrt((1 - phi^(2h)) / (1 - phi^2)).

    The origin residual comes from the training window; pass
    ``origin_value`` (the observed series value at the origin tick) to
    condition on data past the window instead.  Origins before the window
    are rejected; far beyond it, with no observation supplied, the carry
    term decays to zero and the forecast is the bare profile.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if origin < model.window[0]:
        raise ValueError(
            f"origin {origin} precedes the training window start {model.window[0]}"
        )
    if origin_value is not None:
        r0 = float(origin_value) - float(model.profile[model.slot_of(origin)])
        steps_since = 0
    elif origin <= model.window[1]:
        r0 = model.residual_at(origin)
        steps_since = 0
    else:
        r0 = model.residual_at(model.window[1])
        steps_since = (origin - model.window[1]) // model.interval_s

    h = np.arange(1, horizon + 1)
    ts = origin + h * model.interval_s
    slots = model.slot_of(ts)
    carry = model.phi ** (h + steps_since) * r0
    mean = model.profile[slots] + carry
    phi2 = model.phi * model.phi
    if phi2 >= 1.0:
        var_scale = h.astype(float)
    else:
        var_scale = (1.0 - phi2 ** (h + steps_since)) / (1.0 - phi2)
    std = model.innovation_std * np.sqrt(var_scale)
    return ForecastResult(timestamps=ts, mean=mean, std=std)


def _backtest_rmse(
    model: ForecastModel,
    series: np.ndarray,
    timestamps: np.ndarray,
    horizon: int,
    start: int,
) -> float:
    """RMSE of ``horizon``-tick-ahead forecasts over origins from ``start``.

    Vectorized equivalent of calling forecast() per origin with
    origin_value = the observed sample.
    """
    idx = np.arange(start, len(timestamps) - horizon)
    slots_o = (timestamps[idx] // 3600) % WEEK_SLOTS
    slots_t = (timestamps[idx + horizon] // 3600) % WEEK_SLOTS
    r0 = series[idx] - model.profile[slots_o]
    pred = model.profile[slots_t] + model.phi**horizon * r0
    err = pred - series[idx + horizon]
    return float(np.sqrt(np.mean(err * err)))


def cv_curve(
    meters: Sequence[np.ndarray],
    timestamps: np.ndarray,
    sizes: Sequence[int],
    horizon: int = 8,
    seed: int = 0,
    n_subsets: int = 20,
) -> list[CvCurvePoint]:
    """Forecast error (CV = RMSE / mean) versus aggregation size.

    For each size N, draws ``n_subsets`` random N-meter subsets (all
    distinct subsets when there are fewer), sums each subset's series,
    fits on the first two weeks, backtests ``horizon`` ticks ahead over
    the remaining weeks, and reports the median CV with the matching
    mean load.
    """
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    timestamps = np.asarray(timestamps, dtype=np.int64)
    interval = _uniform_interval(timestamps)
    matrix = np.column_stack([np.asarray(m, dtype=float) for m in meters])
    if matrix.shape[0] != len(timestamps):
        raise ValueError("every meter series must match the timestamp grid")
    n_meters = matrix.shape[1]
    for size in sizes:
        if not 1 <= size <= n_meters:
            raise ValueError(f"size {size} outside [1, {n_meters}]")
    span = int(timestamps[-1] - timestamps[0]) + interval
    if span < 4 * WEEK_S:
        raise ValueError(
            f"cv_curve needs >= 4 weeks (2 train + 2 test), got {span / 86400:.1f} days"
        )

    train_mask = timestamps < timestamps[0] + 2 * WEEK_S
    n_train = int(train_mask.sum())
    rng = np.random.default_rng(seed)

    points = []
    for size in sizes:
        if math.comb(n_meters, size) <= n_subsets:
            subsets = [np.array(c) for c in itertools.combinations(range(n_meters), size)]
        else:
            subsets = []
            seen = set()
            while len(subsets) < n_subsets:
                pick = np.sort(rng.choice(n_meters, size=size, replace=False))
                key = pick.tobytes()
                if key not in seen:
                    seen.add(key)
                    subsets.append(pick)
        cvs = []
        mean_loads = []
        for subset in subsets:
            agg = matrix[:, subset].sum(axis=1)
            model = fit_baseline(agg[:n_train], timestamps[:n_train])
            rmse = _backtest_rmse(model, agg, timestamps, horizon, n_train)
            test_mean = float(agg[n_train:].mean())
            cvs.append(rmse / test_mean)
            mean_loads.append(test_mean)
        order = np.argsort(cvs)
        mid = order[len(order) // 2]
        points.append(
            CvCurvePoint(
                size=int(size),
                mean_load=float(mean_loads[mid]),
                cv=float(cvs[mid]),
                horizon=horizon,
            )
        )
    return points
