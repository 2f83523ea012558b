"""Fusion of irregular sensor streams into a dense virtual-SCADA frame.

Samples are snapped to the nearest tick of a fixed clock and averaged per
tick; gaps are filled by linear interpolation (short) or hour-of-week
historical means (long, and backcasting before the first sample); the
leading edge up to the as-of time is filled from a forecast model.  Every
cell carries a provenance tag and a std, and measured cells are immutable
under later as-of times: a tick only becomes "measured" once no sample for
it can still be in flight.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .load_forecast import ForecastModel, forecast
from .synth import RawStream

__all__ = [
    "Provenance",
    "ScadaClock",
    "SparseColumn",
    "DenseColumn",
    "VScadaFrame",
    "align",
    "impute",
    "leading_edge",
    "fuse",
    "write_frame_csv",
    "read_frame_csv",
]


class Provenance(enum.IntEnum):
    MEASURED = 0
    INTERPOLATED = 1
    IMPUTED = 2
    FORECAST = 3


@dataclass(frozen=True)
class ScadaClock:
    """Fixed analysis clock: ticks at epoch + k * interval_s."""

    epoch: int
    interval_s: int

    def __post_init__(self):
        if self.interval_s <= 0:
            raise ValueError(f"clock interval must be positive, got {self.interval_s}")

    def n_ticks(self, as_of: int) -> int:
        """Ticks with timestamp in [epoch, as_of)."""
        if as_of <= self.epoch:
            raise ValueError(f"as_of {as_of} must be past the clock epoch {self.epoch}")
        return -((self.epoch - as_of) // self.interval_s)

    def timestamps(self, as_of: int) -> np.ndarray:
        return self.epoch + np.arange(self.n_ticks(as_of), dtype=np.int64) * self.interval_s


@dataclass(frozen=True)
class SparseColumn:
    """Aligned but not yet filled: one value slot per tick, many empty."""

    signal_id: str
    quantity: str
    units: str
    clock: ScadaClock
    as_of: int
    values: np.ndarray  # NaN where empty
    filled: np.ndarray  # bool mask
    noise_std: float
    warning: Optional[str] = None

    @property
    def n_filled(self) -> int:
        return int(self.filled.sum())

    @property
    def timestamps(self) -> np.ndarray:
        return self.clock.timestamps(self.as_of)


@dataclass(frozen=True)
class DenseColumn:
    """Gap-free column with per-cell provenance and std."""

    signal_id: str
    quantity: str
    units: str
    clock: ScadaClock
    as_of: int
    values: np.ndarray
    provenance: np.ndarray  # uint8 of Provenance codes
    std: np.ndarray
    warning: Optional[str] = None

    @property
    def timestamps(self) -> np.ndarray:
        return self.clock.timestamps(self.as_of)


@dataclass(frozen=True)
class VScadaFrame:
    """Dense time-aligned frame over [epoch, as_of): the virtual SCADA bus."""

    clock: ScadaClock
    as_of: int
    signal_ids: tuple[str, ...]
    quantities: tuple[str, ...]
    units: tuple[str, ...]
    values: np.ndarray  # (n_ticks, n_signals)
    provenance: np.ndarray  # uint8
    std: np.ndarray
    warnings: dict[str, str]

    @property
    def timestamps(self) -> np.ndarray:
        return self.clock.timestamps(self.as_of)

    @property
    def n_ticks(self) -> int:
        return self.values.shape[0]

    def column_index(self, signal_id: str) -> int:
        try:
            return self.signal_ids.index(signal_id)
        except ValueError:
            raise KeyError(f"frame has no signal {signal_id!r}") from None

    def column(self, signal_id: str) -> DenseColumn:
        j = self.column_index(signal_id)
        return DenseColumn(
            signal_id=signal_id,
            quantity=self.quantities[j],
            units=self.units[j],
            clock=self.clock,
            as_of=self.as_of,
            values=self.values[:, j],
            provenance=self.provenance[:, j],
            std=self.std[:, j],
            warning=self.warnings.get(signal_id),
        )


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------


def _finality_margin(clock: ScadaClock, stream: RawStream, ticks: np.ndarray) -> np.ndarray:
    """Per-tick delay after which no further sample can arrive for the tick.

    A tick's bin spans [tick - i/2, tick + i/2).  The last sample that can
    land in the bin sits on the stream's own grid; its worst-case arrival
    is that time plus latency_max.  With an unknown stream grid we fall
    back to the conservative bin edge.
    """
    half = clock.interval_s // 2
    if stream.interval_s is None:
        offset = np.full(len(ticks), half, dtype=np.int64)
    else:
        s = int(stream.interval_s)
        offset = ((ticks + half - 1) // s) * s - ticks
    return offset + stream.latency_max


def align(stream: RawStream, clock: ScadaClock, as_of: int) -> SparseColumn:
    """Snap one stream onto the clock using only data visible at ``as_of``.

    Samples are averaged per tick.  A tick is reported (as measured) only
    once it is final — no sample for it can still be in flight given the
    stream's worst-case latency — which makes measured cells immutable
    under later as-of times.
    """
    n = clock.n_ticks(as_of)
    ticks = clock.timestamps(as_of)
    values = np.full(n, np.nan)
    filled = np.zeros(n, dtype=bool)

    ts = np.asarray(stream.ts_meas, dtype=np.int64)
    arrival = np.asarray(stream.ts_arrival, dtype=float)
    if np.any(arrival > ts + stream.latency_max + 1e-9):
        raise ValueError(
            f"stream {stream.id!r}: sample arrival exceeds ts + latency_max; "
            f"the stream's latency_max metadata is inconsistent"
        )
    visible = arrival <= as_of
    if not visible.any():
        return SparseColumn(
            stream.id, stream.quantity, stream.units, clock, as_of,
            values, filled, stream.noise_std,
            warning="no samples had arrived by the as-of time",
        )

    k = (ts[visible] - clock.epoch + clock.interval_s // 2) // clock.interval_s
    vals = np.asarray(stream.values, dtype=float)[visible]
    in_frame = (k >= 0) & (k < n)
    k = k[in_frame]
    vals = vals[in_frame]

    sums = np.zeros(n)
    counts = np.zeros(n)
    np.add.at(sums, k, vals)
    np.add.at(counts, k, 1.0)
    final = ticks + _finality_margin(clock, stream, ticks) <= as_of
    filled = (counts > 0) & final
    values[filled] = sums[filled] / counts[filled]
    warning = None
    if not filled.any():
        warning = "no samples had arrived by the as-of time"
    return SparseColumn(
        stream.id, stream.quantity, stream.units, clock, as_of,
        values, filled, stream.noise_std, warning,
    )


# ---------------------------------------------------------------------------
# impute
# ---------------------------------------------------------------------------

_WEEK_SLOTS = 168


def _slot_of(ticks: np.ndarray) -> np.ndarray:
    return (ticks // 3600) % _WEEK_SLOTS


def impute(column: SparseColumn, max_linear_gap: int = 4) -> DenseColumn:
    """Fill every empty tick of an aligned column.

    Interior gaps of at most ``max_linear_gap`` ticks are linearly
    interpolated; longer gaps and the region before the first sample fall
    back to the hour-of-week mean of the filled data (backcasting).  Ticks
    after the last sample are filled the same way — the leading edge can
    be re-filled by a forecast model afterwards.  Cell stds are the
    residual stds of the applicable method on the filled data.
    """
    if column.n_filled < 2:
        raise ValueError(
            f"column {column.signal_id!r}: imputation needs >= 2 filled ticks, "
            f"got {column.n_filled}"
        )
    n = len(column.values)
    ticks = column.timestamps
    filled = column.filled
    values = column.values.copy()
    prov = np.full(n, Provenance.MEASURED, dtype=np.uint8)
    std = np.full(n, column.noise_std)

    slots = _slot_of(ticks)
    slot_sum = np.bincount(slots[filled], weights=values[filled], minlength=_WEEK_SLOTS)
    slot_count = np.bincount(slots[filled], minlength=_WEEK_SLOTS)
    slot_mean = np.full(_WEEK_SLOTS, values[filled].mean())
    has = slot_count > 0
    slot_mean[has] = slot_sum[has] / slot_count[has]

    slot_residuals = values[filled] - slot_mean[slots[filled]]
    slot_std = float(np.sqrt(np.mean(slot_residuals**2)))

    # leave-one-out midpoint residuals for the linear-interpolation std
    f_idx = np.flatnonzero(filled)
    triple = f_idx[1:-1][(np.diff(f_idx)[:-1] == 1) & (np.diff(f_idx)[1:] == 1)]
    if len(triple) >= 8:
        mid_pred = 0.5 * (values[triple - 1] + values[triple + 1])
        interp_std = float(np.sqrt(np.mean((values[triple] - mid_pred) ** 2)))
    else:
        interp_std = slot_std

    gaps = ~filled
    if gaps.any():
        gap_idx = np.flatnonzero(gaps)
        # label contiguous runs and classify each
        run_start = gap_idx[np.r_[True, np.diff(gap_idx) > 1]]
        run_end = gap_idx[np.r_[np.diff(gap_idx) > 1, True]]
        interp_all = np.interp(
            np.arange(n), f_idx, values[f_idx]
        )
        for start, end in zip(run_start, run_end):
            length = end - start + 1
            interior = start > f_idx[0] and end < f_idx[-1]
            if interior and length <= max_linear_gap:
                values[start:end + 1] = interp_all[start:end + 1]
                prov[start:end + 1] = Provenance.INTERPOLATED
                std[start:end + 1] = interp_std
            else:
                values[start:end + 1] = slot_mean[slots[start:end + 1]]
                prov[start:end + 1] = Provenance.IMPUTED
                std[start:end + 1] = slot_std

    return DenseColumn(
        column.signal_id, column.quantity, column.units, column.clock,
        column.as_of, values, prov, std, column.warning,
    )


# ---------------------------------------------------------------------------
# leading edge
# ---------------------------------------------------------------------------


def leading_edge(
    column: DenseColumn, model: ForecastModel, as_of: int
) -> DenseColumn:
    """Re-fill everything after the last measured tick from a forecast model.

    The forecast is conditioned on the last measured value; per-cell stds
    come from the model's horizon-dependent error law.  A model fitted to
    a different signal or on a different tick interval is rejected.
    """
    if model.target_id and model.target_id != column.signal_id:
        raise ValueError(
            f"model fitted to {model.target_id!r} cannot extend column "
            f"{column.signal_id!r}"
        )
    if model.interval_s != column.clock.interval_s:
        raise ValueError(
            f"model interval {model.interval_s}s does not match the clock "
            f"interval {column.clock.interval_s}s"
        )
    if as_of != column.as_of:
        raise ValueError("as_of does not match the column's as_of")
    measured = np.flatnonzero(column.provenance == Provenance.MEASURED)
    if len(measured) == 0:
        raise ValueError(f"column {column.signal_id!r} has no measured ticks")
    last = int(measured[-1])
    n = len(column.values)
    horizon = n - 1 - last
    if horizon == 0:
        return column
    ticks = column.timestamps
    fc = forecast(
        model, int(ticks[last]), horizon, origin_value=float(column.values[last])
    )
    values = column.values.copy()
    prov = column.provenance.copy()
    std = column.std.copy()
    values[last + 1:] = fc.mean
    prov[last + 1:] = Provenance.FORECAST
    std[last + 1:] = fc.std
    return replace(column, values=values, provenance=prov, std=std)


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------


def fuse(
    streams: Sequence[RawStream],
    clock: ScadaClock,
    as_of: int,
    models: Optional[Mapping[str, ForecastModel]] = None,
    max_linear_gap: int = 4,
) -> VScadaFrame:
    """align -> impute -> leading_edge for every stream; assemble the frame.

    Signals that cannot produce a dense column (nothing arrived, or fewer
    than two final ticks) are dropped from the frame and recorded in
    ``warnings``; fuse fails only when every column fails.  Without a
    model for a signal its leading edge keeps the historical-mean fill.
    """
    if not streams:
        raise ValueError("fuse requires at least one stream")
    models = models or {}
    columns: list[DenseColumn] = []
    warnings: dict[str, str] = {}
    for stream in streams:
        sparse = align(stream, clock, as_of)
        if sparse.warning is not None and sparse.n_filled < 2:
            warnings[stream.id] = sparse.warning
            continue
        try:
            dense = impute(sparse, max_linear_gap)
        except ValueError as exc:
            warnings[stream.id] = str(exc)
            continue
        model = models.get(stream.id)
        if model is not None:
            dense = leading_edge(dense, model, as_of)
        columns.append(dense)
    if not columns:
        raise ValueError("every stream failed to produce a column")

    n = clock.n_ticks(as_of)
    values = np.column_stack([c.values for c in columns])
    prov = np.column_stack([c.provenance for c in columns])
    std = np.column_stack([c.std for c in columns])
    assert values.shape == (n, len(columns))
    for arr in (values, prov, std):
        arr.flags.writeable = False
    return VScadaFrame(
        clock=clock,
        as_of=as_of,
        signal_ids=tuple(c.signal_id for c in columns),
        quantities=tuple(c.quantity for c in columns),
        units=tuple(c.units for c in columns),
        values=values,
        provenance=prov,
        std=std,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_frame_csv(
    frame: VScadaFrame,
    values_path,
    sidecar_path,
    meta_path=None,
) -> None:
    """Wide CSV of values plus a sidecar CSV of provenance codes and stds.

    ``meta_path`` (JSON) captures the clock, as_of, units, and warnings so
    the frame can be reconstructed exactly.
    """
    ticks = frame.timestamps
    with open(values_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tick", *frame.signal_ids])
        for i, t in enumerate(ticks):
            writer.writerow([int(t), *(repr(float(v)) for v in frame.values[i])])
    with open(sidecar_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["tick"]
        for sid in frame.signal_ids:
            header += [f"{sid}.prov", f"{sid}.std"]
        writer.writerow(header)
        for i, t in enumerate(ticks):
            row = [int(t)]
            for j in range(len(frame.signal_ids)):
                row.append(Provenance(frame.provenance[i, j]).name.lower())
                row.append(repr(float(frame.std[i, j])))
            writer.writerow(row)
    if meta_path is not None:
        meta = {
            "epoch": frame.clock.epoch,
            "interval_s": frame.clock.interval_s,
            "as_of": frame.as_of,
            "signals": [
                {"id": sid, "quantity": q, "units": u}
                for sid, q, u in zip(frame.signal_ids, frame.quantities, frame.units)
            ],
            "warnings": frame.warnings,
        }
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_frame_csv(values_path, sidecar_path, meta_path) -> VScadaFrame:
    """Inverse of write_frame_csv."""
    with open(meta_path) as fh:
        meta = json.load(fh)
    clock = ScadaClock(int(meta["epoch"]), int(meta["interval_s"]))
    as_of = int(meta["as_of"])
    signal_ids = tuple(s["id"] for s in meta["signals"])

    with open(values_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[1:] != list(signal_ids):
            raise ValueError("values CSV header does not match the frame metadata")
        rows = list(reader)
    values = np.array([[float(v) for v in row[1:]] for row in rows])

    with open(sidecar_path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        side = list(reader)
    n_sig = len(signal_ids)
    prov = np.empty((len(side), n_sig), dtype=np.uint8)
    std = np.empty((len(side), n_sig))
    code = {p.name.lower(): p.value for p in Provenance}
    for i, row in enumerate(side):
        for j in range(n_sig):
            prov[i, j] = code[row[1 + 2 * j]]
            std[i, j] = float(row[2 + 2 * j])

    for arr in (values, prov, std):
        arr.flags.writeable = False
    return VScadaFrame(
        clock=clock,
        as_of=as_of,
        signal_ids=signal_ids,
        quantities=tuple(s["quantity"] for s in meta["signals"]),
        units=tuple(s["units"] for s in meta["signals"]),
        values=values,
        provenance=prov,
        std=std,
        warnings=dict(meta.get("warnings", {})),
    )
