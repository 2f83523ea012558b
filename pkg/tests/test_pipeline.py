"""End-to-end pipeline runs: stage wiring, determinism, failure modes."""

import json
import shutil

import numpy as np
import pandas as pd
import pytest

from gridscope.artifacts import ArtifactError, RunManifest, read_json
from gridscope.connectivity import feeder_truth_edges
from gridscope.grid_model import build_network
from gridscope.pipeline import (
    ANALYTICS_STAGES,
    STAGE_OUTPUTS,
    ConfigError,
    PipelineConfig,
    StageError,
    load_config,
    render_report,
    run_stages,
    simulate,
    stage_seed,
)
from gridscope.synth import make_feeder

CONFIG_DOC = {
    "seed": 7,
    "scenario": {"n_buses": 12, "n_switches": 1, "days": 30,
                 "pv_penetration": 0.3},
    "analytics": {
        "forecast": {"sizes": [1, 4, 11], "n_subsets": 6},
        "ddpf": {"kind": "linear"},
        "lnba": {"engine": "ddpf", "n_candidates": 4, "c_max": 0.5},
    },
}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """One complete simulate -> run -> report on a 12-bus month."""
    out_dir = tmp_path_factory.mktemp("run")
    config = PipelineConfig.from_dict(CONFIG_DOC)
    simulate(config, out_dir)
    run_stages(config, out_dir)
    render_report(out_dir)
    return config, out_dir


class TestConfig:
    def test_round_trip(self):
        config = PipelineConfig.from_dict(CONFIG_DOC)
        assert PipelineConfig.from_dict(config.to_dict()) == config

    @pytest.mark.parametrize("mutate, fragment", [
        (lambda d: d.pop("seed"), "seed"),
        (lambda d: d.pop("scenario"), "scenario"),
        (lambda d: d.update(seed="one"), "integer"),
        (lambda d: d.update(typo={}), "unknown config keys"),
        (lambda d: d["scenario"].pop("n_buses"), "n_buses"),
        (lambda d: d["scenario"].pop("days"), "days"),
        (lambda d: d["analytics"].update(nope={}), "unknown analytics"),
    ])
    def test_invalid_documents_are_named(self, mutate, fragment):
        doc = json.loads(json.dumps(CONFIG_DOC))
        mutate(doc)
        with pytest.raises(ConfigError, match=fragment):
            PipelineConfig.from_dict(doc)

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")

    def test_load_config_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="valid JSON"):
            load_config(path)

    def test_stage_seed_is_stable_and_distinct(self):
        assert stage_seed(7, "sensors") == stage_seed(7, "sensors")
        seeds = {stage_seed(7, s) for s in ("sensors", "gis", "forecast")}
        assert len(seeds) == 3
        assert stage_seed(7, "sensors") != stage_seed(8, "sensors")


class TestFullRun:
    def test_every_stage_output_exists(self, full_run):
        _, out_dir = full_run
        for stage, outputs in STAGE_OUTPUTS.items():
            for rel in outputs:
                assert (out_dir / rel).exists(), f"{stage} did not write {rel}"

    def test_manifest_records_all_stages(self, full_run):
        _, out_dir = full_run
        manifest = RunManifest.load(out_dir)
        assert set(manifest.stages) == {"simulate", "report", *ANALYTICS_STAGES}
        manifest.verify(out_dir)

    def test_recovered_tree_matches_feeder(self, full_run):
        _, out_dir = full_run
        net = build_network(read_json(out_dir / "network.json"))
        doc = read_json(out_dir / "tree.json")
        recovered = {tuple(sorted(e)) for e in doc["edges"]}
        assert feeder_truth_edges(net) <= recovered

    def test_disagg_estimates_respect_accounting_identity(self, full_run):
        _, out_dir = full_run
        with np.load(out_dir / "disagg_estimates.npz") as z:
            pv, load = z["pv"], z["load"]
        values = pd.read_csv(out_dir / "frame_values.csv")
        assert (pv >= 0).all()
        for j, bus in enumerate(build_network(
                read_json(out_dir / "network.json")).load_bus_ids):
            net_load = -values[f"ami_{bus}.p"].to_numpy()
            np.testing.assert_allclose(
                load[:, j] - pv[:, j], net_load, atol=1e-9,
                err_msg=f"identity broken at {bus}",
            )

    def test_cv_curve_decreases_with_aggregation(self, full_run):
        _, out_dir = full_run
        table = pd.read_csv(out_dir / "cv_curve.csv")
        assert list(table["aggregate_size"]) == [1, 4, 11]
        assert list(table["cv"]) == sorted(table["cv"], reverse=True)
        assert table["cv"].iloc[-1] < table["cv"].iloc[0]

    def test_detection_selects_true_state(self, full_run):
        _, out_dir = full_run
        doc = read_json(out_dir / "detection.json")
        assert doc["accuracy"] == 1.0
        assert all(t["correct"] for t in doc["ticks"])

    def test_voltage_model_error_is_small(self, full_run):
        _, out_dir = full_run
        table = pd.read_csv(out_dir / "ddpf_mae.csv")
        overall = table[table["range_band"] == "all"]["mae"]
        assert float(overall.mean()) < 1e-5

    def test_ranking_has_requested_sites(self, full_run):
        _, out_dir = full_run
        table = pd.read_csv(out_dir / "lnba_ranking.csv")
        assert len(table) == 4
        assert (table["capacity_pu"] <= 0.5 + 1e-12).all()
        assert (table["engine"] == "ddpf").all()

    def test_report_has_all_sections(self, full_run):
        _, out_dir = full_run
        text = (out_dir / "report" / "report.md").read_text()
        for heading in (
            "## Connectivity",
            "## Solar disaggregation",
            "## Load forecasting",
            "## Switch-state detection",
            "## Voltage prediction",
            "## Hosting capacity",
        ):
            assert heading in text

    def test_rerunning_one_stage_is_idempotent(self, full_run):
        config, out_dir = full_run
        before = RunManifest.load(out_dir).content_digest
        run_stages(config, out_dir, ["forecast"])
        assert RunManifest.load(out_dir).content_digest == before

    def test_voltage_training_used_finer_sampling_rule(self, full_run):
        _, out_dir = full_run
        model = read_json(out_dir / "ddpf_model.json")
        # 12 buses at 15-min ticks already satisfy the floor: 0.6 * 2880.
        assert len(model["train_timestamps"]) == 1728


class TestDeterminism:
    def test_identical_configs_reproduce_every_artifact(self, full_run,
                                                        tmp_path):
        config, out_dir = full_run
        twin = tmp_path / "twin"
        simulate(config, twin)
        run_stages(config, twin)
        render_report(twin)
        a = RunManifest.load(out_dir)
        b = RunManifest.load(twin)
        assert a.artifacts == b.artifacts
        assert a.content_digest == b.content_digest

    def test_seed_changes_the_digest(self, full_run, tmp_path):
        _, out_dir = full_run
        config = PipelineConfig.from_dict({**CONFIG_DOC, "seed": 8})
        other = tmp_path / "other"
        simulate(config, other)
        assert (
            RunManifest.load(other).artifacts["truth.npz"]
            != RunManifest.load(out_dir).artifacts["truth.npz"]
        )


class TestStageIsolation:
    def test_run_without_simulate_names_it(self, tmp_path):
        config = PipelineConfig.from_dict(CONFIG_DOC)
        with pytest.raises(ConfigError, match="simulate"):
            run_stages(config, tmp_path / "empty")

    def test_unknown_stage_is_rejected(self, full_run):
        config, out_dir = full_run
        with pytest.raises(ConfigError, match="unknown stage"):
            run_stages(config, out_dir, ["polish"])

    def test_missing_dependency_names_producing_stage(self, tmp_path):
        config = PipelineConfig.from_dict(CONFIG_DOC)
        out_dir = tmp_path / "simonly"
        simulate(config, out_dir)
        with pytest.raises(ConfigError, match="'ingest'"):
            run_stages(config, out_dir, ["connectivity"])

    def test_surrogate_ranking_requires_trained_model(self, full_run,
                                                      tmp_path):
        config, out_dir = full_run
        clone = tmp_path / "clone"
        shutil.copytree(out_dir, clone)
        for rel in STAGE_OUTPUTS["ddpf"]:
            (clone / rel).unlink()
        with pytest.raises(ConfigError, match="'ddpf'"):
            run_stages(config, clone, ["lnba"])

    def test_broken_input_surfaces_as_stage_error(self, full_run, tmp_path):
        config, out_dir = full_run
        clone = tmp_path / "clone"
        shutil.copytree(out_dir, clone)
        (clone / "truth.npz").write_bytes(b"not a zip archive")
        with pytest.raises(StageError, match="stage 'ddpf' failed"):
            run_stages(config, clone, ["ddpf"])

    def test_failed_stage_keeps_manifest_intact(self, full_run, tmp_path):
        config, out_dir = full_run
        clone = tmp_path / "clone"
        shutil.copytree(out_dir, clone)
        before = set(RunManifest.load(clone).stages)
        (clone / "truth.npz").write_bytes(b"junk")
        with pytest.raises(StageError):
            run_stages(config, clone, ["ddpf"])
        assert set(RunManifest.load(clone).stages) == before


class TestReportVerification:
    def test_tampered_artifact_fails_report(self, full_run, tmp_path):
        _, out_dir = full_run
        clone = tmp_path / "clone"
        shutil.copytree(out_dir, clone)
        path = clone / "frame_values.csv"
        path.write_text(path.read_text() + "# edited\n")
        with pytest.raises(ArtifactError, match="frame_values.csv"):
            render_report(clone)


class TestSwitchStateTruth:
    def test_events_flip_the_reference_state(self):
        from gridscope.pipeline import _truth_switch_state
        from gridscope.synth import gen_scenario

        net = make_feeder(12, 1, 7)
        truth = gen_scenario(
            net, days=1, pv_penetration=0.0, seed=7,
            events=(("sw_t0", 600, True), ("sw_s0", 600, False)),
        )
        order = [s.id for s in net.switches]
        default = net.default_state()
        early = _truth_switch_state(net, truth, 599)
        late = _truth_switch_state(net, truth, 600)
        assert early == default
        assert late != default
        assert late[order.index("sw_t0")] is True
        assert late[order.index("sw_s0")] is False
