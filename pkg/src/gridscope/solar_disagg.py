"""Behind-the-meter PV disaggregation from net-metered series.

A net meter records gross consumption minus local PV generation.  Given one
or more irradiance-like proxy series, the separation is posed as a small
source-separation problem: gross load follows an hour-of-week profile and
PV follows the proxies through one nonnegative coefficient each,

    net(t) ~= profile[slot(t)] - sum_k alpha_k * proxy_k(t).

Day-to-day proxy variability (clouds) is what makes ``alpha`` identifiable
next to the weekly profile; a perfectly periodic proxy would be absorbed by
it.  Fitting alternates an exact profile solve with a projected-gradient
nonnegative solve for ``alpha``.  The same linear map then splits batch
history or live frame cells; live outputs carry a std that combines the
model residual with the input cell stds in quadrature.

Proxy samples are clamped at zero throughout: irradiance cannot be
negative, and measured proxies dip below zero only through sensor noise.
Sign convention: ``net_load`` is consumption-positive (gross minus PV), so
injection-metered series must be negated by the caller.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .load_forecast import WEEK_SLOTS, WEEK_S
from .vscada import DenseColumn, Provenance

RIDGE = 1e-6
OUTER_TOL = 1e-9
MAX_OUTER = 200
MAX_INNER = 500
FALLBACK_STD_FACTOR = 2.0
FEATURES = "hour-of-week-onehot"

__all__ = [
    "DisaggModel",
    "RealtimeDisagg",
    "fit_historic",
    "disaggregate_historic",
    "disaggregate_realtime",
]


@dataclass(frozen=True)
class DisaggModel:
    """Per-home separation coefficients: proxy weights plus weekly profile."""

    alpha: np.ndarray  # (n_proxies,) nonnegative proxy coefficients
    beta: np.ndarray  # (168,) hour-of-week gross-load profile
    residual_std: float
    window: tuple[int, int]  # [start, end] timestamps of the training data
    interval_s: int
    target_id: str = ""
    proxy_ids: tuple[str, ...] = ()
    objective_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        """JSON-compatible document (training diagnostics excluded)."""
        return {
            "features": FEATURES,
            "alpha": [float(a) for a in self.alpha],
            "beta": [float(b) for b in self.beta],
            "residual_std": float(self.residual_std),
            "window": [int(self.window[0]), int(self.window[1])],
            "interval_s": int(self.interval_s),
            "target_id": self.target_id,
            "proxy_ids": list(self.proxy_ids),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DisaggModel":
        if doc.get("features") != FEATURES:
            raise ValueError(f"unsupported feature spec {doc.get('features')!r}")
        return cls(
            alpha=np.asarray(doc["alpha"], dtype=float),
            beta=np.asarray(doc["beta"], dtype=float),
            residual_std=float(doc["residual_std"]),
            window=(int(doc["window"][0]), int(doc["window"][1])),
            interval_s=int(doc["interval_s"]),
            target_id=doc.get("target_id", ""),
            proxy_ids=tuple(doc.get("proxy_ids", ())),
        )


@dataclass(frozen=True)
class RealtimeDisagg:
    """Per-tick live split with propagated uncertainty."""

    timestamps: np.ndarray
    pv: np.ndarray
    pv_std: np.ndarray
    load: np.ndarray
    load_std: np.ndarray
    proxy_fallback: np.ndarray  # bool: tick used a filled (non-live) proxy cell


def _uniform_interval(timestamps: np.ndarray) -> int:
    steps = np.diff(timestamps)
    if timestamps.size < 2 or not np.all(steps == steps[0]) or steps[0] <= 0:
        raise ValueError("timestamps must be a uniform increasing grid")
    return int(steps[0])


def _proxy_matrix(proxies: Sequence[np.ndarray], n: int) -> np.ndarray:
    if len(proxies) == 0:
        raise ValueError("at least one proxy series is required")
    cols = []
    for k, proxy in enumerate(proxies):
        p = np.asarray(proxy, dtype=float)
        if p.ndim != 1 or p.size != n:
            raise ValueError(f"proxy {k} does not cover the requested window")
        if not np.all(np.isfinite(p)):
            raise ValueError(f"proxy {k} contains non-finite samples")
        cols.append(np.maximum(p, 0.0))
    return np.column_stack(cols)


def fit_historic(
    net_load: np.ndarray,
    proxies: Sequence[np.ndarray],
    timestamps: np.ndarray,
    *,
    target_id: str = "",
    proxy_ids: Optional[Sequence[str]] = None,
) -> DisaggModel:
    """Fit the separation model on at least one week of aligned samples.

    Minimizes ``sum_t (net(t) - (beta[slot(t)] - P(t) @ alpha))**2`` over
    ``alpha >= 0`` and ``beta`` by alternating exact profile updates with a
    projected-gradient nonnegative solve, until the objective changes by
    less than 1e-9 relative or 200 outer iterations.  Calendar slots are
    hour-of-week indices of the timestamps (epoch second 0 is Monday
    00:00); a window that leaves slots unobserved is rank-deficient and
    falls back to a ridge of 1e-6 on the profile block, with a warning.
    """
    net = np.asarray(net_load, dtype=float)
    ts = np.asarray(timestamps)
    if net.ndim != 1 or ts.shape != net.shape:
        raise ValueError("net_load and timestamps must be aligned 1-D series")
    if not np.all(np.isfinite(net)):
        raise ValueError("net_load contains non-finite samples")
    interval = _uniform_interval(ts)
    if ts[-1] - ts[0] + interval < WEEK_S:
        raise ValueError("training window must span at least one week")
    n = net.size
    P = _proxy_matrix(proxies, n)
    for k in range(P.shape[1]):
        if not np.any(P[:, k] > 0.0):
            raise ValueError(
                f"proxy {k} is identically zero over the window (no daytime samples)"
            )
    if proxy_ids is not None and len(proxy_ids) != P.shape[1]:
        raise ValueError("proxy_ids must match the number of proxies")

    slots = ((ts // 3600) % WEEK_SLOTS).astype(int)
    counts = np.bincount(slots, minlength=WEEK_SLOTS).astype(float)
    if np.any(counts == 0):
        warnings.warn(
            "calendar features are rank-deficient (unobserved hour-of-week "
            "slots); profile solve regularized with ridge 1e-6",
            RuntimeWarning,
            stacklevel=2,
        )
        denom = counts + RIDGE
    else:
        denom = counts

    gram = P.T @ P
    lipschitz = float(np.linalg.eigvalsh(gram)[-1])
    alpha = np.zeros(P.shape[1])
    trace: list[float] = []
    prev: Optional[float] = None
    for _ in range(MAX_OUTER):
        # Profile block: exact ridge/least-squares solve given alpha.
        target = net + P @ alpha
        beta = np.bincount(slots, weights=target, minlength=WEEK_SLOTS) / denom
        # Proxy block: projected gradient on 0.5 * ||P a - y||^2, a >= 0.
        y = beta[slots] - net
        b = P.T @ y
        for _ in range(MAX_INNER):
            step = alpha - (gram @ alpha - b) / lipschitz
            new = np.maximum(step, 0.0)
            done = np.max(np.abs(new - alpha)) <= 1e-12 * (1.0 + np.max(np.abs(new)))
            alpha = new
            if done:
                break
        resid = net - (beta[slots] - P @ alpha)
        objective = float(resid @ resid)
        trace.append(objective)
        if prev is not None and abs(prev - objective) <= OUTER_TOL * max(prev, 1e-300):
            break
        prev = objective

    return DisaggModel(
        alpha=alpha,
        beta=beta,
        residual_std=float(np.sqrt(trace[-1] / n)),
        window=(int(ts[0]), int(ts[-1])),
        interval_s=interval,
        target_id=target_id,
        proxy_ids=tuple(proxy_ids) if proxy_ids is not None else (),
        objective_trace=np.asarray(trace),
    )


def disaggregate_historic(
    model: DisaggModel,
    net_load: np.ndarray,
    proxies: Sequence[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Split a batch window into (pv_estimate, load_estimate).

    ``pv = sum_k alpha_k * proxy_k`` and ``load = net + pv``, so the
    accounting identity holds exactly and pv inherits nonnegativity from
    the coefficients and the clamped proxies.
    """
    net = np.asarray(net_load, dtype=float)
    if net.ndim != 1:
        raise ValueError("net_load must be a 1-D series")
    if len(proxies) != model.alpha.size:
        raise ValueError(
            f"model has {model.alpha.size} proxies, got {len(proxies)} series"
        )
    P = _proxy_matrix(proxies, net.size)
    pv = P @ model.alpha
    return pv, net + pv


def disaggregate_realtime(
    model: DisaggModel,
    net: DenseColumn,
    proxies: Sequence[DenseColumn],
) -> RealtimeDisagg:
    """Apply the fitted separation to live frame cells, with stds.

    The linear map is identical to the batch path.  Output std combines
    the model residual std with the input cell stds in quadrature; a proxy
    cell whose provenance is a fill (imputed or forecast) is still used,
    but its std is inflated by 2x and the tick is flagged.
    """
    if len(proxies) != model.alpha.size:
        raise ValueError(
            f"model has {model.alpha.size} proxies, got {len(proxies)} columns"
        )
    ts = net.timestamps
    for col in proxies:
        if not np.array_equal(col.timestamps, ts):
            raise ValueError("proxy columns are not on the net column's clock")
    P = _proxy_matrix([col.values for col in proxies], ts.size)
    pv = P @ model.alpha

    fallback = np.zeros(ts.size, dtype=bool)
    pv_var = np.full(ts.size, model.residual_std**2)
    for k, col in enumerate(proxies):
        filled = col.provenance >= Provenance.IMPUTED
        fallback |= filled
        std = np.where(filled, FALLBACK_STD_FACTOR * col.std, col.std)
        pv_var += (model.alpha[k] * std) ** 2
    pv_std = np.sqrt(pv_var)
    return RealtimeDisagg(
        timestamps=ts,
        pv=pv,
        pv_std=pv_std,
        load=net.values + pv,
        load_std=np.sqrt(net.std**2 + pv_var),
        proxy_fallback=fallback,
    )
