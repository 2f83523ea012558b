"""Data-driven power flow: regression from sensor data, no network model.

Two directions of the same idea: the forward map f takes bus voltages to
injections, the inverse map g takes injections (pseudo-measurements) to
voltage magnitudes.  Both are fitted purely from paired samples — the
feeder's impedances never enter — so the quality of the fit is a property
of the data regime: near nominal loading the power flow manifold is close
to flat and a linear fit suffices; over wide injection ranges the
curvature shows and the kernel model has the edge.

Model classes: ordinary least squares (with a small conditioning ridge)
and Gaussian kernel ridge regression with the median-distance bandwidth
heuristic and a ridge weight chosen by deterministic 5-fold
cross-validation over a fixed log grid.  Everything is z-scored
internally; constant feature columns are dropped (with a warning) rather
than normalized into NaNs.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

RIDGE_DEFAULT = 1e-8
LAMBDA_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
CV_FOLDS = 5
SPLITS = ("train", "validation", "test")

__all__ = [
    "LAMBDA_GRID",
    "TrainingSet",
    "DdpfModel",
    "MaeReport",
    "train",
    "predict",
    "predict_voltages",
    "evaluate_mae",
]


@dataclass(frozen=True)
class TrainingSet:
    """Paired (injection, voltage) samples with disjoint split labels."""

    p: np.ndarray  # (n, n_inj) real injections, consumption negative
    q: np.ndarray  # (n, n_inj)
    vm: np.ndarray  # (n, n_bus) voltage magnitudes
    timestamps: np.ndarray  # (n,)
    split: np.ndarray  # (n,) entries from SPLITS
    injection_ids: tuple[str, ...]
    bus_ids: tuple[str, ...]
    va: Optional[np.ndarray] = None  # (n, n_bus) angles when phasors exist

    def __post_init__(self):
        n = self.p.shape[0]
        if self.p.shape != self.q.shape or self.p.shape[1] != len(self.injection_ids):
            raise ValueError("p and q must be (n, n_injections)")
        if self.vm.shape != (n, len(self.bus_ids)):
            raise ValueError("vm must be (n, n_buses)")
        if self.va is not None and self.va.shape != self.vm.shape:
            raise ValueError("va must match vm's shape")
        if self.timestamps.shape != (n,) or self.split.shape != (n,):
            raise ValueError("timestamps and split must have one entry per sample")
        labels = set(np.unique(self.split))
        if not labels <= set(SPLITS):
            raise ValueError(f"unknown split labels {sorted(labels - set(SPLITS))}")
        seen: dict = {}
        for ts, lab in zip(self.timestamps.tolist(), self.split.tolist()):
            if seen.setdefault(ts, lab) != lab:
                raise ValueError(f"timestamp {ts} appears in more than one split")

    @classmethod
    def chronological(
        cls,
        p: np.ndarray,
        q: np.ndarray,
        vm: np.ndarray,
        timestamps: np.ndarray,
        injection_ids: Sequence[str],
        bus_ids: Sequence[str],
        va: Optional[np.ndarray] = None,
        fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    ) -> "TrainingSet":
        """Contiguous train/validation/test blocks in time order."""
        if not np.isclose(sum(fractions), 1.0):
            raise ValueError(f"split fractions must sum to 1, got {fractions}")
        n = len(timestamps)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        split = np.array(
            ["train"] * n_train
            + ["validation"] * n_val
            + ["test"] * (n - n_train - n_val)
        )
        return cls(
            p=np.asarray(p, dtype=float),
            q=np.asarray(q, dtype=float),
            vm=np.asarray(vm, dtype=float),
            timestamps=np.asarray(timestamps),
            split=split,
            injection_ids=tuple(injection_ids),
            bus_ids=tuple(bus_ids),
            va=None if va is None else np.asarray(va, dtype=float),
        )

    def rows(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return self.split == split

    def features(self, direction: str) -> np.ndarray:
        if direction == "forward":
            parts = [self.vm] if self.va is None else [self.vm, self.va]
            return np.hstack(parts)
        if direction == "inverse":
            return np.hstack([self.p, self.q])
        raise ValueError(f"unknown direction {direction!r}")

    def targets(self, direction: str) -> tuple[np.ndarray, tuple[str, ...]]:
        if direction == "forward":
            labels = tuple(f"p:{b}" for b in self.injection_ids) + tuple(
                f"q:{b}" for b in self.injection_ids
            )
            return np.hstack([self.p, self.q]), labels
        if direction == "inverse":
            return self.vm, self.bus_ids
        raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class DdpfModel:
    """Fitted regression map with its normalization frozen in."""

    kind: str  # "linear" | "kernel"
    direction: str  # "forward" | "inverse"
    kept: np.ndarray  # indices of surviving feature columns
    n_features_raw: int
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    target_ids: tuple[str, ...]
    train_timestamps: np.ndarray
    weights: Optional[np.ndarray] = None  # linear: (d, t) in normalized space
    intercept: Optional[np.ndarray] = None  # linear: (t,) in normalized space
    support: Optional[np.ndarray] = None  # kernel: (n, d) normalized rows
    dual: Optional[np.ndarray] = None  # kernel: (n, t)
    bandwidth: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "kernel"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.direction not in ("forward", "inverse"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if not np.all(self.feature_std > 0) or not np.all(self.target_std > 0):
            raise ValueError("normalization stds must be positive")
        if self.kind == "kernel" and (self.bandwidth <= 0 or self.lam <= 0):
            raise ValueError("kernel models need bandwidth > 0 and lambda > 0")

    def to_dict(self) -> dict:
        doc = {
            "kind": self.kind,
            "direction": self.direction,
            "kept": self.kept.tolist(),
            "n_features_raw": int(self.n_features_raw),
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
            "target_ids": list(self.target_ids),
            "train_timestamps": self.train_timestamps.tolist(),
        }
        if self.kind == "linear":
            doc["weights"] = self.weights.tolist()
            doc["intercept"] = self.intercept.tolist()
        else:
            doc["support"] = self.support.tolist()
            doc["dual"] = self.dual.tolist()
            doc["bandwidth"] = float(self.bandwidth)
            doc["lambda"] = float(self.lam)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DdpfModel":
        common = dict(
            kind=doc["kind"],
            direction=doc["direction"],
            kept=np.asarray(doc["kept"], dtype=int),
            n_features_raw=int(doc["n_features_raw"]),
            feature_mean=np.asarray(doc["feature_mean"], dtype=float),
            feature_std=np.asarray(doc["feature_std"], dtype=float),
            target_mean=np.asarray(doc["target_mean"], dtype=float),
            target_std=np.asarray(doc["target_std"], dtype=float),
            target_ids=tuple(doc["target_ids"]),
            train_timestamps=np.asarray(doc["train_timestamps"]),
        )
        if doc["kind"] == "linear":
            return cls(
                weights=np.asarray(doc["weights"], dtype=float),
                intercept=np.asarray(doc["intercept"], dtype=float),
                **common,
            )
        return cls(
            support=np.asarray(doc["support"], dtype=float),
            dual=np.asarray(doc["dual"], dtype=float),
            bandwidth=float(doc["bandwidth"]),
            lam=float(doc["lambda"]),
            **common,
        )


@dataclass(frozen=True)
class MaeReport:
    """Per-target MAE overall and by total-injection quantile band."""

    target_ids: tuple[str, ...]
    mae: np.ndarray  # (t,)
    aggregate: float
    band_edges: np.ndarray  # (n_bands + 1,) total-injection quantiles
    band_mae: np.ndarray  # (n_bands, t)
    band_aggregate: np.ndarray  # (n_bands,)
    band_counts: np.ndarray  # (n_bands,)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("bus,range_band,mae\n")
        for j, tid in enumerate(self.target_ids):
            out.write(f"{tid},all,{float(self.mae[j])!r}\n")
            for b in range(len(self.band_counts)):
                out.write(f"{tid},q{b + 1},{float(self.band_mae[b, j])!r}\n")
        return out.getvalue()


def _kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth**2))


def train(
    data: TrainingSet,
    kind: str,
    direction: str,
    *,
    ridge: float = RIDGE_DEFAULT,
    lambda_grid: Sequence[float] = LAMBDA_GRID,
) -> DdpfModel:
    """Fit a linear or Gaussian-kernel regression on the training split.

    Linear: least squares on z-scored data with a conditioning ridge
    (``ridge=0`` gives plain OLS).  Kernel: kernel ridge regression,
    bandwidth from the median pairwise distance heuristic and the ridge
    weight chosen by 5-fold cross-validation over ``lambda_grid`` with
    deterministic contiguous folds.  Constant feature columns are dropped
    with a warning; training requires at least 10 samples per surviving
    feature dimension.
    """
    if kind not in ("linear", "kernel"):
        raise ValueError(f"unknown model kind {kind!r}")
    mask = data.rows("train")
    if not mask.any():
        raise ValueError("train split is empty")
    X_raw = data.features(direction)[mask]
    Y, target_ids = data.targets(direction)
    Y = Y[mask]

    # max - min is exact where a summed std picks up float fuzz, so truly
    # constant columns are detected reliably.
    spread = X_raw.max(axis=0) - X_raw.min(axis=0)
    kept = np.flatnonzero(spread > 0.0)
    if kept.size < X_raw.shape[1]:
        dropped = np.flatnonzero(spread == 0.0)
        warnings.warn(
            f"dropping {dropped.size} zero-variance feature column(s): "
            f"{dropped.tolist()}",
            RuntimeWarning,
            stacklevel=2,
        )
    if kept.size == 0:
        raise ValueError("all feature columns are constant")
    n, d = X_raw.shape[0], kept.size
    if n < 10 * d:
        raise ValueError(
            f"{n} training samples for {d} feature dimensions; need at least "
            f"10 samples per dimension"
        )

    X = X_raw[:, kept]
    f_mean, f_std = X.mean(axis=0), X.std(axis=0)
    t_mean, t_std = Y.mean(axis=0), Y.std(axis=0)
    t_std = np.where(t_std > 0.0, t_std, 1.0)  # constant targets live in the mean
    Xn = (X - f_mean) / f_std
    Yn = (Y - t_mean) / t_std

    common = dict(
        kind=kind,
        direction=direction,
        kept=kept,
        n_features_raw=X_raw.shape[1],
        feature_mean=f_mean,
        feature_std=f_std,
        target_mean=t_mean,
        target_std=t_std,
        target_ids=target_ids,
        train_timestamps=data.timestamps[mask].copy(),
    )
    if kind == "linear":
        gram = Xn.T @ Xn + ridge * np.eye(d)
        weights = np.linalg.solve(gram, Xn.T @ Yn)
        return DdpfModel(weights=weights, intercept=np.zeros(Yn.shape[1]), **common)

    distances = pdist(Xn)
    bandwidth = float(np.median(distances))
    if not bandwidth > 0.0:
        raise ValueError("degenerate features: median pairwise distance is zero")
    K = _kernel(Xn, Xn, bandwidth)
    folds = np.array_split(np.arange(n), CV_FOLDS)
    best_lam, best_err = None, np.inf
    for lam in lambda_grid:
        err = 0.0
        for fold in folds:
            train_idx = np.setdiff1d(np.arange(n), fold, assume_unique=True)
            K_tt = K[np.ix_(train_idx, train_idx)]
            dual = np.linalg.solve(K_tt + lam * np.eye(train_idx.size), Yn[train_idx])
            pred = K[np.ix_(fold, train_idx)] @ dual
            err += float(np.mean((pred - Yn[fold]) ** 2))
        if err < best_err:
            best_lam, best_err = lam, err
    dual = np.linalg.solve(K + best_lam * np.eye(n), Yn)
    return DdpfModel(
        support=Xn, dual=dual, bandwidth=bandwidth, lam=best_lam, **common
    )


def predict(model: DdpfModel, features: np.ndarray) -> np.ndarray:
    """Denormalized predictions for a batch of raw feature rows."""
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features_raw:
        raise ValueError(
            f"expected features of shape (n, {model.n_features_raw}), "
            f"got {X.shape}"
        )
    Xn = (X[:, model.kept] - model.feature_mean) / model.feature_std
    if model.kind == "linear":
        Yn = Xn @ model.weights + model.intercept
    else:
        Yn = _kernel(Xn, model.support, model.bandwidth) @ model.dual
    return Yn * model.target_std + model.target_mean


def predict_voltages(model: DdpfModel, injections: np.ndarray) -> np.ndarray:
    """Voltage magnitudes from (p, q) rows; inverse-direction models only."""
    if model.direction != "inverse":
        raise ValueError("predict_voltages needs an inverse-direction model")
    return predict(model, injections)


def evaluate_mae(model: DdpfModel, test: TrainingSet, n_bands: int = 4) -> MaeReport:
    """Held-out MAE per target, overall and by total-injection quantile band.

    Refuses evaluation if any test timestamp was seen in training.
    """
    mask = test.rows("test")
    if not mask.any():
        raise ValueError("test split is empty")
    test_ts = test.timestamps[mask]
    overlap = np.intersect1d(np.asarray(model.train_timestamps), test_ts)
    if overlap.size:
        raise ValueError(
            f"{overlap.size} test timestamp(s) overlap the training window"
        )
    X = test.features(model.direction)[mask]
    Y, target_ids = test.targets(model.direction)
    Y = Y[mask]
    if target_ids != model.target_ids:
        raise ValueError("test set targets do not match the model's targets")
    err = np.abs(predict(model, X) - Y)

    total = test.p[mask].sum(axis=1)
    edges = np.quantile(total, np.linspace(0.0, 1.0, n_bands + 1))
    band = np.searchsorted(edges[1:-1], total, side="right")
    band_mae = np.full((n_bands, err.shape[1]), np.nan)
    band_agg = np.full(n_bands, np.nan)
    counts = np.zeros(n_bands, dtype=int)
    for b in range(n_bands):
        sel = band == b
        counts[b] = int(sel.sum())
        if counts[b]:
            band_mae[b] = err[sel].mean(axis=0)
            band_agg[b] = float(err[sel].mean())
    return MaeReport(
        target_ids=target_ids,
        mae=err.mean(axis=0),
        aggregate=float(err.mean()),
        band_edges=edges,
        band_mae=band_mae,
        band_aggregate=band_agg,
        band_counts=counts,
    )
