"""End-to-end run orchestration: scenario -> analytics -> report.

A run lives in one directory.  ``simulate`` seeds it with the scenario
bundle (network, minute-resolution truth, raw sensor streams, GIS
records) and a manifest.  ``run_stages`` executes analytics stages on
top of that bundle in a fixed order, each reading only files from the
run directory and appending its outputs to the manifest.  ``render_report``
verifies every recorded hash and writes a human-readable summary.

Stages are isolated: each can be re-run alone as long as the artifacts
it reads exist.  Asking for a stage whose inputs are missing is a
configuration error that names the stage to run first.  Randomness is
derived per stage from the config seed, so re-running any subset
reproduces the same bytes.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .artifacts import (
    MANIFEST_NAME,
    RunManifest,
    read_gis_json,
    read_json,
    read_streams_csv,
    read_truth_npz,
    write_gis_json,
    write_json,
    write_streams_csv,
    write_truth_npz,
)
from .connectivity import chow_liu_tree, mutual_information_matrix
from .ddpf import DdpfModel, TrainingSet, evaluate_mae, train
from .grid_model import (
    FeederNetwork,
    build_network,
    network_to_dict,
    solve_power_flow_batch,
)
from .lnba import ScenarioSpec, rank_sites, solar_noon_ticks
from .load_forecast import cv_curve, fit_baseline, forecast
from .net_state import (
    ForecastVector,
    MeasurementVector,
    detect_state,
    enumerate_states,
)
from .solar_disagg import DisaggModel, disaggregate_historic, fit_historic
from .synth import (
    ScenarioTruth,
    corrupt_records,
    default_fleet,
    emulate_sensors,
    gen_scenario,
    make_feeder,
)
from .vscada import Provenance, ScadaClock, VScadaFrame, fuse, read_frame_csv, write_frame_csv

__all__ = [
    "ConfigError",
    "StageError",
    "PipelineConfig",
    "ANALYTICS_STAGES",
    "STAGE_OUTPUTS",
    "stage_seed",
    "simulate",
    "run_stages",
    "render_report",
]


class ConfigError(ValueError):
    """The config document or requested stage selection is invalid."""


class StageError(RuntimeError):
    """A stage started executing and failed."""


ANALYTICS_STAGES = (
    "ingest",
    "connectivity",
    "disagg",
    "forecast",
    "netstate",
    "ddpf",
    "lnba",
)

STAGE_OUTPUTS = {
    "simulate": ("network.json", "truth.npz", "streams.csv", "gis.json"),
    "ingest": ("frame_values.csv", "frame_sidecar.csv", "frame_meta.json"),
    "connectivity": ("tree.json",),
    "disagg": ("disagg_models.json", "disagg_estimates.npz"),
    "forecast": ("cv_curve.csv",),
    "netstate": ("detection.json",),
    "ddpf": ("ddpf_model.json", "ddpf_mae.csv"),
    "lnba": ("lnba_ranking.csv", "lnba_run.json"),
    "report": ("report/report.md", "report/cv_curve.png", "report/ddpf_mae.png"),
}

_STAGE_DEPS = {
    "ingest": ("simulate",),
    "connectivity": ("ingest",),
    "disagg": ("ingest",),
    "forecast": ("disagg",),
    "netstate": ("ingest",),
    "ddpf": ("simulate",),
    "lnba": ("simulate", "connectivity", "disagg"),
}

_TOP_KEYS = {"seed", "out_dir", "scenario", "sensors", "clock", "analytics"}
_ANALYTICS_KEYS = {"connectivity", "forecast", "netstate", "ddpf", "lnba"}


def stage_seed(seed: int, stage: str) -> int:
    """Derived per-stage seed: stable across runs, distinct across stages."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class PipelineConfig:
    """Validated run configuration.

    ``scenario`` is required (what to build), everything else falls back
    to defaults.  Section contents stay as plain dicts so configs can
    carry only the keys they override.
    """

    seed: int
    scenario: dict
    out_dir: Optional[str] = None
    sensors: dict = field(default_factory=dict)
    clock: dict = field(default_factory=dict)
    analytics: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in doc:
            raise ConfigError("config is missing required key 'seed'")
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("'seed' must be an integer")
        if "scenario" not in doc:
            raise ConfigError("config is missing required section 'scenario'")
        scenario = doc["scenario"]
        if not isinstance(scenario, dict):
            raise ConfigError("'scenario' must be an object")
        for key in ("n_buses", "days"):
            if key not in scenario:
                raise ConfigError(f"'scenario' is missing required key '{key}'")
        analytics = doc.get("analytics", {})
        if not isinstance(analytics, dict):
            raise ConfigError("'analytics' must be an object")
        bad = set(analytics) - _ANALYTICS_KEYS
        if bad:
            raise ConfigError(f"unknown analytics sections: {sorted(bad)}")
        return cls(
            seed=doc["seed"],
            scenario=dict(scenario),
            out_dir=doc.get("out_dir"),
            sensors=dict(doc.get("sensors", {})),
            clock=dict(doc.get("clock", {})),
            analytics={k: dict(v) for k, v in analytics.items()},
        )

    def to_dict(self) -> dict:
        doc: dict = {"seed": self.seed, "scenario": self.scenario}
        if self.out_dir is not None:
            doc["out_dir"] = self.out_dir
        for key in ("sensors", "clock", "analytics"):
            section = getattr(self, key)
            if section:
                doc[key] = section
        return doc

    def section(self, name: str) -> dict:
        return self.analytics.get(name, {})


def load_config(path: Path) -> PipelineConfig:
    try:
        doc = read_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    return PipelineConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# run context: lazy, cached access to the artifacts a stage reads
# ---------------------------------------------------------------------------


class _RunContext:
    def __init__(self, config: PipelineConfig, out_dir: Path):
        self.config = config
        self.out_dir = Path(out_dir)
        self._cache: dict = {}

    def path(self, rel: str) -> Path:
        return self.out_dir / rel

    @property
    def net(self) -> FeederNetwork:
        if "net" not in self._cache:
            self._cache["net"] = build_network(read_json(self.path("network.json")))
        return self._cache["net"]

    @property
    def truth(self) -> ScenarioTruth:
        if "truth" not in self._cache:
            self._cache["truth"] = read_truth_npz(self.path("truth.npz"))
        return self._cache["truth"]

    @property
    def frame(self) -> VScadaFrame:
        if "frame" not in self._cache:
            self._cache["frame"] = read_frame_csv(
                self.path("frame_values.csv"),
                self.path("frame_sidecar.csv"),
                self.path("frame_meta.json"),
            )
        return self._cache["frame"]

    def consumption(self, bus_id: str) -> np.ndarray:
        """Consumption-positive net meter series for one bus."""
        return -self.frame.column(f"ami_{bus_id}.p").values

    def proxy_columns(self) -> tuple[list[str], list[np.ndarray]]:
        ids = sorted(
            s for s in self.frame.signal_ids
            if s.startswith("proxy_") and s.endswith(".irr")
        )
        return ids, [self.frame.column(s).values for s in ids]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def simulate(config: PipelineConfig, out_dir: Path) -> RunManifest:
    """Build the scenario bundle and start a fresh manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    sc = config.scenario
    sensors = config.sensors
    net = make_feeder(int(sc["n_buses"]), int(sc.get("n_switches", 0)), config.seed)
    truth = gen_scenario(
        net,
        days=int(sc["days"]),
        pv_penetration=float(sc.get("pv_penetration", 0.0)),
        seed=config.seed,
        sigma=float(sc.get("sigma", 0.25)),
        load_base=float(sc.get("load_base", 0.012)),
        n_regions=int(sc.get("n_regions", 2)),
        events=tuple(tuple(e) for e in sc.get("events", [])),
    )
    fleet = default_fleet(
        net,
        n_regions=truth.n_regions,
        include_angles=bool(sensors.get("include_angles", False)),
        ami_interval_s=int(sensors.get("ami_interval_s", 900)),
        ami_noise=float(sensors.get("ami_noise", 0.005)),
        ami_voltage_noise=float(sensors.get("ami_voltage_noise", 0.002)),
        ami_dropout=float(sensors.get("ami_dropout", 0.01)),
        line_interval_s=int(sensors.get("line_interval_s", 300)),
    )
    streams = emulate_sensors(truth, net, fleet, seed=stage_seed(config.seed, "sensors"))
    records, corruptions = corrupt_records(
        net,
        phase_error_rate=float(sensors.get("gis_phase_error_rate", 0.1)),
        parent_error_rate=float(sensors.get("gis_parent_error_rate", 0.05)),
        seed=stage_seed(config.seed, "gis"),
    )

    write_json(out_dir / "network.json", network_to_dict(net))
    write_truth_npz(out_dir / "truth.npz", truth)
    write_streams_csv(out_dir / "streams.csv", streams)
    write_gis_json(out_dir / "gis.json", records, corruptions)

    manifest = RunManifest(config=config.to_dict())
    manifest.record_stage(
        "simulate",
        out_dir,
        inputs=(),
        outputs=STAGE_OUTPUTS["simulate"],
        wall_clock_s=time.perf_counter() - started,
    )
    manifest.save(out_dir)
    return manifest


def _stage_ingest(ctx: _RunContext) -> tuple[str, ...]:
    streams = read_streams_csv(ctx.path("streams.csv"))
    truth = ctx.truth
    clock = ScadaClock(
        epoch=truth.start_s, interval_s=int(ctx.config.clock.get("interval_s", 900))
    )
    as_of = truth.start_s + truth.n_minutes * 60
    frame = fuse(streams, clock, as_of)
    write_frame_csv(
        frame,
        ctx.path("frame_values.csv"),
        ctx.path("frame_sidecar.csv"),
        ctx.path("frame_meta.json"),
    )
    ctx._cache["frame"] = frame
    return ("streams.csv", "truth.npz")


def _stage_connectivity(ctx: _RunContext) -> tuple[str, ...]:
    cfg = ctx.config.section("connectivity")
    frame, net = ctx.frame, ctx.net
    use_angles = bool(cfg.get("use_angles", False))
    signals: dict = {}
    for bus in net.load_bus_ids:
        vm = f"ami_{bus}.vm"
        if use_angles:
            va = f"ami_{bus}.va"
            if va not in frame.signal_ids:
                raise StageError(
                    "connectivity is configured for phasor signals but the frame "
                    f"has no angle column for bus {bus}; enable "
                    "sensors.include_angles in the scenario"
                )
            signals[bus] = (vm, va)
        else:
            signals[bus] = vm
    mi = mutual_information_matrix(
        frame,
        signals,
        detrend=str(cfg.get("detrend", "diff")),
        min_samples=int(cfg.get("min_samples", 672)),
    )
    tree = chow_liu_tree(mi)
    write_json(ctx.path("tree.json"), {
        "nodes": list(tree.nodes),
        "edges": sorted(sorted(e) for e in tree.edge_set),
        "root": tree.root,
        "estimator": mi.estimator,
        "use_angles": use_angles,
    })
    return ("frame_values.csv", "frame_sidecar.csv", "frame_meta.json", "network.json")


def _stage_disagg(ctx: _RunContext) -> tuple[str, ...]:
    frame, net = ctx.frame, ctx.net
    ts = frame.timestamps
    proxy_ids, proxies = ctx.proxy_columns()
    if not proxy_ids:
        raise StageError("frame has no irradiance proxy columns")
    models: dict[str, dict] = {}
    pv = np.zeros((frame.n_ticks, len(net.load_bus_ids)))
    load = np.zeros_like(pv)
    for j, bus in enumerate(net.load_bus_ids):
        series = ctx.consumption(bus)
        model = fit_historic(series, proxies, ts, target_id=bus, proxy_ids=proxy_ids)
        models[bus] = model.to_dict()
        pv[:, j], load[:, j] = disaggregate_historic(model, series, proxies)
    write_json(ctx.path("disagg_models.json"), models)
    np.savez(
        ctx.path("disagg_estimates.npz"),
        bus_ids=np.array(net.load_bus_ids, dtype=str),
        timestamps=ts,
        pv=pv,
        load=load,
    )
    return ("frame_values.csv", "frame_sidecar.csv", "frame_meta.json", "network.json")


def _stage_forecast(ctx: _RunContext) -> tuple[str, ...]:
    cfg = ctx.config.section("forecast")
    with np.load(ctx.path("disagg_estimates.npz"), allow_pickle=False) as z:
        load = z["load"]
        ts = z["timestamps"]
    n_meters = load.shape[1]
    sizes = [int(s) for s in cfg.get("sizes", (1, 10, 100))]
    sizes = sorted({min(s, n_meters) for s in sizes if s >= 1})
    points = cv_curve(
        [load[:, j] for j in range(n_meters)],
        ts,
        sizes,
        horizon=int(cfg.get("horizon", 8)),
        seed=stage_seed(ctx.config.seed, "forecast"),
        n_subsets=int(cfg.get("n_subsets", 20)),
    )
    lines = ["aggregate_size,mean_load,cv,horizon"]
    lines += [
        f"{p.size},{float(p.mean_load)!r},{float(p.cv)!r},{p.horizon}"
        for p in points
    ]
    ctx.path("cv_curve.csv").write_text("\n".join(lines) + "\n")
    return ("disagg_estimates.npz",)


def _truth_switch_state(net: FeederNetwork, truth: ScenarioTruth, minute: int):
    w = list(net.default_state())
    order = [s.id for s in net.switches]
    for switch_id, event_minute, closed in truth.events:
        if event_minute <= minute:
            w[order.index(switch_id)] = bool(closed)
    return tuple(w)


def _stage_netstate(ctx: _RunContext) -> tuple[str, ...]:
    cfg = ctx.config.section("netstate")
    frame, net, truth = ctx.frame, ctx.net, ctx.truth
    interval = frame.clock.interval_s
    hypotheses = enumerate_states(net, int(cfg.get("max_outage_size", 1)))
    line_cols = sorted(
        s for s in frame.signal_ids
        if s.startswith("line_") and s.endswith(".flow_p")
    )
    if not line_cols:
        raise StageError("frame has no line flow columns")
    models = {
        bus: fit_baseline(ctx.consumption(bus), frame.timestamps, target_id=bus)
        for bus in net.load_bus_ids
    }
    horizon = int(cfg.get("horizon", 4))
    week_ticks = (7 * 86400) // interval
    n_eval = int(cfg.get("n_ticks", 4))
    # Evaluate inside the final day, clear of the tail where slow meters
    # have not reported yet, and only where every flow cell is a real
    # measurement.
    last = frame.n_ticks - 1 - int(7200 // interval)
    first = max(week_ticks + horizon, last - 86400 // interval)
    candidates = np.unique(np.linspace(first, last, n_eval).astype(int))

    cols = [frame.column_index(c) for c in line_cols]

    def measured(t: int) -> bool:
        return all(
            frame.provenance[t, c] == Provenance.MEASURED for c in cols
        )

    results = []
    n_match = 0
    for t in candidates:
        t = int(t)
        while t > first and not measured(t):
            t -= 1
        tick_ts = int(frame.timestamps[t])
        # Relative sensor noise gives std 0 on open (zero-flow) lines;
        # floor it so those channels stay usable in the residual score.
        meas = MeasurementVector(
            line_ids=tuple(c[len("line_"):-len(".flow_p")] for c in line_cols),
            flow=frame.values[t, cols].copy(),
            std=np.maximum(frame.std[t, cols], 1e-4),
            timestamp=tick_ts,
        )
        mean, std = {}, {}
        for bus, model in models.items():
            res = forecast(model, t - horizon, horizon)
            mean[bus] = float(res.mean[-1])
            std[bus] = float(res.std[-1])
        fore = ForecastVector(mean=mean, std=std, timestamp=tick_ts)
        detection = detect_state(meas, fore, hypotheses, net, tick_s=interval)
        truth_w = _truth_switch_state(net, truth, (tick_ts - truth.start_s) // 60)
        correct = detection.selected.w == truth_w
        n_match += int(correct)
        results.append({
            "timestamp": tick_ts,
            "selected": {
                "w": list(detection.selected.w),
                "kind": detection.selected.kind,
                "de_energized": sorted(detection.selected.de_energized),
            },
            "truth_w": list(truth_w),
            "correct": correct,
            "gap": detection.gap,
            "top": [
                {"kind": h.kind, "w": list(h.w), "score": score}
                for h, score in detection.ranking[:3]
            ],
        })
    write_json(ctx.path("detection.json"), {
        "switch_ids": [s.id for s in net.switches],
        "n_hypotheses": len(hypotheses),
        "ticks": results,
        "accuracy": n_match / len(results),
    })
    return ("frame_values.csv", "frame_sidecar.csv", "frame_meta.json",
            "network.json", "truth.npz")


def _stage_ddpf(ctx: _RunContext) -> tuple[str, ...]:
    cfg = ctx.config.section("ddpf")
    net, truth = ctx.net, ctx.truth
    step = cfg.get("sample_minutes")
    if step is None:
        # Densify below the SCADA tick when the chronological train split
        # would fall short of the samples-per-dimension floor.
        interval_min = int(ctx.config.clock.get("interval_s", 900)) // 60
        need = 10 * 2 * len(net.load_bus_ids)
        step = 1
        for cand in (interval_min, 12, 10, 6, 5, 4, 3, 2, 1):
            if cand <= interval_min and int(0.6 * (truth.n_minutes // cand)) >= need:
                step = cand
                break
    step = int(step)
    minutes = np.arange(0, truth.n_minutes, step)
    s = truth.net_injection(minutes)
    v, _, _ = solve_power_flow_batch(net, s)
    vm = np.abs(v)
    keep = [i for i, b in enumerate(net.bus_ids) if b not in net.slack_ids]
    data = TrainingSet.chronological(
        p=s.real,
        q=s.imag,
        vm=vm[:, keep],
        timestamps=truth.start_s + minutes * 60.0,
        injection_ids=net.load_bus_ids,
        bus_ids=[net.bus_ids[i] for i in keep],
    )
    model = train(
        data,
        kind=str(cfg.get("kind", "kernel")),
        direction=str(cfg.get("direction", "inverse")),
    )
    write_json(ctx.path("ddpf_model.json"), model.to_dict())
    report = evaluate_mae(model, data, n_bands=int(cfg.get("n_bands", 4)))
    ctx.path("ddpf_mae.csv").write_text(report.to_csv())
    return ("network.json", "truth.npz")


def _stage_lnba(ctx: _RunContext) -> tuple[str, ...]:
    cfg = ctx.config.section("lnba")
    net, truth = ctx.net, ctx.truth
    engine = str(cfg.get("engine", "physics"))
    inputs = ["network.json", "truth.npz", "tree.json", "disagg_models.json"]
    ddpf_model = None
    if engine == "ddpf":
        model_path = ctx.path("ddpf_model.json")
        if not model_path.exists():
            raise ConfigError(
                "lnba engine 'ddpf' needs ddpf_model.json; run the 'ddpf' "
                "stage first"
            )
        ddpf_model = DdpfModel.from_dict(read_json(model_path))
        inputs.append("ddpf_model.json")
    candidates = cfg.get("candidates")
    if candidates is None:
        # Default to sites spread along the feeder; the head buses alone
        # would all saturate at the upper bound.
        n = int(cfg.get("n_candidates", 8))
        stride = max(1, len(net.load_bus_ids) // n)
        candidates = list(net.load_bus_ids[::stride][:n])
    spec = ScenarioSpec(
        net=net,
        truth=truth,
        candidates=tuple(str(b) for b in candidates),
        ticks=solar_noon_ticks(truth),
        vmin=float(cfg.get("vmin", 0.95)),
        vmax=float(cfg.get("vmax", 1.05)),
        c_max=float(cfg.get("c_max", 1.0)),
        resolution=float(cfg.get("resolution", 0.01)),
        engine=engine,
        ddpf_model=ddpf_model,
    )
    ranking = rank_sites(spec, artifacts={
        "connectivity_tree": "tree.json",
        "disagg_models": "disagg_models.json",
    })
    ctx.path("lnba_ranking.csv").write_text(ranking.to_csv())
    write_json(ctx.path("lnba_run.json"), ranking.to_dict())
    return tuple(inputs)


_STAGE_FUNCS = {
    "ingest": _stage_ingest,
    "connectivity": _stage_connectivity,
    "disagg": _stage_disagg,
    "forecast": _stage_forecast,
    "netstate": _stage_netstate,
    "ddpf": _stage_ddpf,
    "lnba": _stage_lnba,
}


def _check_dependencies(stage: str, out_dir: Path, engine_hint: Optional[str]) -> None:
    deps = list(_STAGE_DEPS[stage])
    if stage == "lnba" and engine_hint == "ddpf":
        deps.append("ddpf")
    for dep in deps:
        missing = [
            rel for rel in STAGE_OUTPUTS[dep] if not (Path(out_dir) / rel).exists()
        ]
        if missing:
            raise ConfigError(
                f"stage '{stage}' needs {', '.join(missing)} produced by stage "
                f"'{dep}'; run '{dep}' first"
            )


def run_stages(
    config: PipelineConfig,
    out_dir: Path,
    stages: Optional[Sequence[str]] = None,
) -> RunManifest:
    """Execute analytics stages in canonical order, updating the manifest.

    The manifest is saved after every completed stage, so a failure
    partway leaves earlier outputs recorded and verifiable.
    """
    out_dir = Path(out_dir)
    if stages is None:
        selected = list(ANALYTICS_STAGES)
    else:
        unknown = [s for s in stages if s not in ANALYTICS_STAGES]
        if unknown:
            raise ConfigError(
                f"unknown stage(s) {unknown}; valid stages are "
                f"{', '.join(ANALYTICS_STAGES)}"
            )
        selected = [s for s in ANALYTICS_STAGES if s in set(stages)]
    try:
        manifest = RunManifest.load(out_dir)
    except Exception:
        raise ConfigError(
            f"no run found in {out_dir} (missing {MANIFEST_NAME}); "
            "run 'simulate' first"
        ) from None

    ctx = _RunContext(config, out_dir)
    engine_hint = str(config.section("lnba").get("engine", "physics"))
    for stage in selected:
        _check_dependencies(stage, out_dir, engine_hint)
        started = time.perf_counter()
        try:
            inputs = _STAGE_FUNCS[stage](ctx)
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(f"stage '{stage}' failed: {exc}") from exc
        manifest.record_stage(
            stage,
            out_dir,
            inputs=inputs,
            outputs=STAGE_OUTPUTS[stage],
            wall_clock_s=time.perf_counter() - started,
        )
        manifest.save(out_dir)
    return manifest


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _plot_cv_curve(points, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    sizes = [p["aggregate_size"] for p in points]
    ax.plot(sizes, [p["cv"] for p in points], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("meters aggregated")
    ax.set_ylabel("coefficient of variation")
    ax.set_title("Forecast dispersion vs aggregation")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_mae_bands(bands, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = [b["label"] for b in bands]
    ax.bar(range(len(bands)), [b["mae"] for b in bands], color="#31688e")
    ax.set_xticks(range(len(bands)), labels, fontsize=8)
    ax.set_xlabel("total-injection band")
    ax.set_ylabel("MAE (p.u.)")
    ax.set_title("Voltage prediction error by loading band")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(out_dir: Path) -> Path:
    """Verify the manifest and write report/report.md plus figures."""
    import pandas as pd

    from .connectivity import feeder_truth_edges, score_against_truth
    from .connectivity import ConnectivityTree

    out_dir = Path(out_dir)
    manifest = RunManifest.load(out_dir)
    manifest.verify(out_dir)
    config = PipelineConfig.from_dict(manifest.config)
    ctx = _RunContext(config, out_dir)
    started = time.perf_counter()
    report_dir = out_dir / "report"
    report_dir.mkdir(exist_ok=True)
    net, truth = ctx.net, ctx.truth

    md = ["# Run report", ""]
    md += [
        f"- config hash: `{manifest.config_hash}`",
        f"- content digest: `{manifest.content_digest}`",
        f"- network: {len(net.buses)} buses, {len(net.lines)} lines, "
        f"{len(net.switches)} switches",
        f"- horizon: {truth.n_minutes // 1440} days at minute resolution",
        f"- PV sites: {len(truth.pv_sites)} "
        f"({sum(s.capacity for s in truth.pv_sites):.3f} p.u. nameplate)",
        "",
    ]

    md += ["## Connectivity", ""]
    doc = read_json(ctx.path("tree.json"))
    tree = ConnectivityTree(
        nodes=tuple(doc["nodes"]),
        edges=tuple(tuple(e) for e in doc["edges"]),
        root=doc["root"],
    )
    edge_error = score_against_truth(tree, feeder_truth_edges(net))
    md += [
        f"Recovered a spanning tree over {len(tree.nodes)} meters "
        f"({doc['estimator']} mutual information, "
        f"{'phasor' if doc['use_angles'] else 'voltage-only'} signals).",
        "",
        f"- edge error vs as-built feeder: **{edge_error:.1%}**",
        "",
    ]

    md += ["## Solar disaggregation", ""]
    with np.load(ctx.path("disagg_estimates.npz"), allow_pickle=False) as z:
        pv_est = z["pv"]
        ts = z["timestamps"]
        bus_ids = [str(b) for b in z["bus_ids"]]
    minutes = ((ts - truth.start_s) // 60).astype(int)
    pv_truth = np.zeros_like(pv_est)
    for k, site in enumerate(truth.pv_sites):
        pv_truth[:, bus_ids.index(site.bus_id)] += truth.pv_gen[minutes, k]
    rmse = float(np.sqrt(np.mean((pv_est - pv_truth) ** 2)))
    site_cols = sorted({bus_ids.index(s.bus_id) for s in truth.pv_sites})
    site_rmse = (
        float(np.sqrt(np.mean((pv_est[:, site_cols] - pv_truth[:, site_cols]) ** 2)))
        if site_cols else float("nan")
    )
    md += [
        f"Separated behind-the-meter PV from consumption at "
        f"{len(bus_ids)} meters using {truth.n_regions} irradiance proxies.",
        "",
        f"- PV estimate RMSE (all meters): **{rmse:.4f} p.u.**",
        f"- PV estimate RMSE (PV sites only): **{site_rmse:.4f} p.u.**",
        "",
    ]

    md += ["## Load forecasting", ""]
    table = pd.read_csv(ctx.path("cv_curve.csv"))
    points = table.to_dict("records")
    _plot_cv_curve(points, report_dir / "cv_curve.png")
    md += [
        "Forecast dispersion (coefficient of variation of forecast errors) "
        "shrinks as meters are aggregated:",
        "",
        "| meters | mean load (p.u.) | CV |",
        "| --- | --- | --- |",
    ]
    md += [
        f"| {p['aggregate_size']} | {p['mean_load']:.4f} | {p['cv']:.3f} |"
        for p in points
    ]
    md += ["", "![CV vs aggregation](cv_curve.png)", ""]

    md += ["## Switch-state detection", ""]
    det = read_json(ctx.path("detection.json"))
    md += [
        f"Ranked {det['n_hypotheses']} topology hypotheses against line-flow "
        f"telemetry at {len(det['ticks'])} evaluation ticks.",
        "",
        f"- detection accuracy: **{det['accuracy']:.0%}**",
        "",
        "| timestamp (s) | selected | correct | score gap |",
        "| --- | --- | --- | --- |",
    ]
    md += [
        f"| {t['timestamp']} | {t['selected']['kind']} | "
        f"{'yes' if t['correct'] else 'no'} | {t['gap']:.2f} |"
        for t in det["ticks"]
    ]
    md += [""]

    md += ["## Voltage prediction", ""]
    model_doc = read_json(ctx.path("ddpf_model.json"))
    mae = pd.read_csv(ctx.path("ddpf_mae.csv"))
    overall = float(mae[mae["range_band"] == "all"]["mae"].mean())
    bands = []
    for label in sorted(set(mae["range_band"]) - {"all"}):
        vals = mae[mae["range_band"] == label]["mae"].to_numpy()
        if np.isfinite(vals).any():
            bands.append({"label": label, "mae": float(np.nanmean(vals))})
    _plot_mae_bands(bands, report_dir / "ddpf_mae.png")
    md += [
        f"Trained a {model_doc['kind']} {model_doc['direction']} power-flow "
        f"surrogate on {len(model_doc['train_timestamps'])} ticks.",
        "",
        f"- held-out voltage MAE: **{overall:.2e} p.u.**",
        "",
        "![MAE by band](ddpf_mae.png)",
        "",
    ]

    md += ["## Hosting capacity", ""]
    run_doc = read_json(ctx.path("lnba_run.json"))
    md += [
        f"Ranked {len(run_doc['sites'])} candidate sites with the "
        f"{run_doc['engine']} engine.",
        "",
        "| rank | bus | capacity (p.u.) | binding |",
        "| --- | --- | --- | --- |",
    ]
    md += [
        f"| {i + 1} | {s['bus']} | "
        f"{'-' if s['error'] else format(s['capacity_pu'], '.2f')} | "
        f"{s['binding']} |"
        for i, s in enumerate(run_doc["sites"])
    ]
    md += [""]

    (report_dir / "report.md").write_text("\n".join(md))
    manifest.record_stage(
        "report",
        out_dir,
        inputs=tuple(
            rel for name in manifest.stages if name != "report"
            for rel in STAGE_OUTPUTS.get(name, ())
        ),
        outputs=STAGE_OUTPUTS["report"],
        wall_clock_s=time.perf_counter() - started,
    )
    manifest.save(out_dir)
    return report_dir / "report.md"
