"""Content-addressed artifact bookkeeping for pipeline runs.

Every file a pipeline stage emits is recorded in a run manifest with its
SHA-256, so a run can be verified (tamper detection), compared across
re-runs (determinism), and partially re-executed (stage isolation).  The
manifest also carries a ``content_digest`` — a single hash over the
config identity plus every artifact hash — which is the one-line answer
to "did these two runs produce the same thing?".  Wall-clock timings are
stored for operators but excluded from the digest.

Serialization helpers for the scenario bundle live here too: ground
truth to/from ``.npz`` (numpy keeps zip member timestamps fixed, so the
bytes are reproducible), raw sensor streams to/from one tall CSV, and
GIS records to/from JSON.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .synth import GisCorruption, GisRecord, PvSite, RawStream, ScenarioTruth

MANIFEST_NAME = "manifest.json"

__all__ = [
    "MANIFEST_NAME",
    "ArtifactError",
    "StageRecord",
    "RunManifest",
    "sha256_file",
    "canonical_json",
    "config_hash",
    "write_json",
    "read_json",
    "write_truth_npz",
    "read_truth_npz",
    "write_streams_csv",
    "read_streams_csv",
    "write_gis_json",
    "read_gis_json",
]


class ArtifactError(RuntimeError):
    """An artifact is missing or does not match its recorded hash."""


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return f"sha256:{digest.hexdigest()}"


def canonical_json(obj) -> str:
    """Stable JSON text: sorted keys, no whitespace variance."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: Mapping) -> str:
    """Identity hash of a config document.

    ``out_dir`` is excluded: where a run lands does not change what it
    computes, so runs into different directories stay comparable.
    """
    doc = {k: v for k, v in config.items() if k != "out_dir"}
    return f"sha256:{hashlib.sha256(canonical_json(doc).encode()).hexdigest()}"


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    return json.loads(Path(path).read_text())


@dataclass(frozen=True)
class StageRecord:
    """What one stage read and wrote, and how long it took."""

    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    wall_clock_s: float


@dataclass
class RunManifest:
    """Ledger of a run: config identity plus every artifact's hash."""

    config: dict
    stages: dict[str, StageRecord] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def content_digest(self) -> str:
        """One hash over the config identity and all artifact hashes.

        Deterministic across re-runs: excludes wall-clock and absolute
        paths (artifact keys are relative to the run directory).
        """
        lines = [self.config_hash]
        lines += [f"{p} {h}" for p, h in sorted(self.artifacts.items())]
        payload = "\n".join(lines).encode()
        return f"sha256:{hashlib.sha256(payload).hexdigest()}"

    def record_stage(
        self,
        name: str,
        out_dir: Path,
        inputs: Sequence[str],
        outputs: Sequence[str],
        wall_clock_s: float,
    ) -> None:
        self.stages[name] = StageRecord(tuple(inputs), tuple(outputs), wall_clock_s)
        for rel in outputs:
            self.artifacts[rel] = sha256_file(Path(out_dir) / rel)

    def verify(self, out_dir: Path) -> None:
        """Raise ArtifactError on the first missing or altered artifact."""
        for rel, recorded in sorted(self.artifacts.items()):
            path = Path(out_dir) / rel
            if not path.exists():
                raise ArtifactError(f"artifact {rel} is missing from {out_dir}")
            actual = sha256_file(path)
            if actual != recorded:
                raise ArtifactError(
                    f"artifact {rel} does not match its manifest hash "
                    f"(recorded {recorded}, found {actual})"
                )

    def to_dict(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "config": self.config,
            "config_hash": self.config_hash,
            "content_digest": self.content_digest,
            "stages": {
                name: {
                    "inputs": list(rec.inputs),
                    "outputs": list(rec.outputs),
                    "wall_clock_s": rec.wall_clock_s,
                }
                for name, rec in self.stages.items()
            },
            "artifacts": dict(sorted(self.artifacts.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        manifest = cls(
            config=doc["config"],
            tool_version=doc.get("tool_version", __version__),
        )
        for name, rec in doc.get("stages", {}).items():
            manifest.stages[name] = StageRecord(
                tuple(rec["inputs"]), tuple(rec["outputs"]), float(rec["wall_clock_s"])
            )
        manifest.artifacts = dict(doc.get("artifacts", {}))
        return manifest

    def save(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        write_json(path, self.to_dict())
        return path

    @classmethod
    def load(cls, out_dir: Path) -> "RunManifest":
        path = Path(out_dir) / MANIFEST_NAME
        if not path.exists():
            raise ArtifactError(f"no {MANIFEST_NAME} in {out_dir}")
        return cls.from_dict(read_json(path))


# ---------------------------------------------------------------------------
# scenario bundle serialization
# ---------------------------------------------------------------------------


def write_truth_npz(path: Path, truth: ScenarioTruth) -> None:
    events = truth.events
    np.savez(
        path,
        bus_ids=np.array(truth.bus_ids, dtype=str),
        n_minutes=np.int64(truth.n_minutes),
        start_s=np.int64(truth.start_s),
        loads_p=truth.loads_p,
        loads_q=truth.loads_q,
        pv_gen=truth.pv_gen,
        irradiance=truth.irradiance,
        phase_offsets=truth.phase_offsets,
        pv_bus=np.array([s.bus_id for s in truth.pv_sites], dtype=str),
        pv_capacity=np.array([s.capacity for s in truth.pv_sites]),
        pv_scale=np.array([s.scale for s in truth.pv_sites]),
        pv_region=np.array([s.region for s in truth.pv_sites], dtype=np.int64),
        region_bus=np.array(list(truth.region_of), dtype=str),
        region_idx=np.array(list(truth.region_of.values()), dtype=np.int64),
        event_switch=np.array([e[0] for e in events], dtype=str),
        event_minute=np.array([e[1] for e in events], dtype=np.int64),
        event_closed=np.array([e[2] for e in events], dtype=bool),
    )


def read_truth_npz(path: Path) -> ScenarioTruth:
    with np.load(path, allow_pickle=False) as z:
        sites = tuple(
            PvSite(bus_id=str(b), capacity=float(c), scale=float(s), region=int(r))
            for b, c, s, r in zip(z["pv_bus"], z["pv_capacity"],
                                  z["pv_scale"], z["pv_region"])
        )
        events = tuple(
            (str(sw), int(m), bool(cl))
            for sw, m, cl in zip(z["event_switch"], z["event_minute"],
                                 z["event_closed"])
        )
        return ScenarioTruth(
            bus_ids=tuple(str(b) for b in z["bus_ids"]),
            n_minutes=int(z["n_minutes"]),
            loads_p=z["loads_p"],
            loads_q=z["loads_q"],
            pv_sites=sites,
            pv_gen=z["pv_gen"],
            irradiance=z["irradiance"],
            phase_offsets=z["phase_offsets"],
            region_of={
                str(b): int(i) for b, i in zip(z["region_bus"], z["region_idx"])
            },
            events=events,
            start_s=int(z["start_s"]),
        )


def write_streams_csv(path: Path, streams: Sequence[RawStream]) -> None:
    """One tall CSV; per-stream metadata rides along on every row."""
    frames = []
    for s in streams:
        frames.append(pd.DataFrame({
            "id": s.id,
            "quantity": s.quantity,
            "units": s.units,
            "ts_meas": s.ts_meas,
            "ts_arrival": s.ts_arrival,
            "value": s.values,
            "noise_std": s.noise_std,
            "latency_max": s.latency_max,
            "interval_s": -1 if s.interval_s is None else s.interval_s,
        }))
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["id", "quantity", "units", "ts_meas", "ts_arrival", "value",
                 "noise_std", "latency_max", "interval_s"])
    table.to_csv(path, index=False)


def read_streams_csv(path: Path) -> list[RawStream]:
    table = pd.read_csv(path)
    streams: list[RawStream] = []
    for stream_id, rows in table.groupby("id", sort=False):
        interval = int(rows["interval_s"].iloc[0])
        streams.append(RawStream(
            id=str(stream_id),
            quantity=str(rows["quantity"].iloc[0]),
            units=str(rows["units"].iloc[0]),
            ts_meas=rows["ts_meas"].to_numpy(dtype=float),
            ts_arrival=rows["ts_arrival"].to_numpy(dtype=float),
            values=rows["value"].to_numpy(dtype=float),
            noise_std=float(rows["noise_std"].iloc[0]),
            latency_max=float(rows["latency_max"].iloc[0]),
            interval_s=None if interval < 0 else interval,
        ))
    return streams


def write_gis_json(
    path: Path,
    records: Sequence[GisRecord],
    corruptions: Sequence[GisCorruption],
) -> None:
    write_json(path, {
        "records": [
            {"bus_id": r.bus_id, "phase": r.phase, "parent": r.parent}
            for r in records
        ],
        "corruptions": [
            {"bus_id": c.bus_id, "field": c.field,
             "true_value": c.true_value, "corrupted_value": c.corrupted_value}
            for c in corruptions
        ],
    })


def read_gis_json(path: Path) -> tuple[list[GisRecord], list[GisCorruption]]:
    doc = read_json(path)
    records = [GisRecord(**r) for r in doc["records"]]
    corruptions = [GisCorruption(**c) for c in doc["corruptions"]]
    return records, corruptions
