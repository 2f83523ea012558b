"""Tests for MI estimation, Chow-Liu topology recovery, and phase labeling."""

import itertools

import numpy as np
import pytest

from gridscope.connectivity import (
    MI_CAP_NATS,
    ConnectivityTree,
    MiMatrix,
    chow_liu_tree,
    feeder_truth_edges,
    identify_phases,
    mutual_information_matrix,
    score_against_truth,
)
from gridscope.synth import (
    corrupt_records,
    default_fleet,
    emulate_sensors,
    gen_scenario,
    make_feeder,
)
from gridscope.vscada import Provenance, ScadaClock, VScadaFrame, fuse

DAY = 86400


def frame_of(columns, interval_s=900, provenance=None):
    """Build a dense frame directly from column arrays (all measured)."""
    ids = tuple(columns.keys())
    values = np.column_stack([columns[s] for s in ids])
    n_ticks = values.shape[0]
    if provenance is None:
        provenance = np.full(values.shape, Provenance.MEASURED, dtype=np.uint8)
    clock = ScadaClock(epoch=0, interval_s=interval_s)
    return VScadaFrame(
        clock=clock,
        as_of=n_ticks * interval_s,
        signal_ids=ids,
        quantities=("vm",) * len(ids),
        units=("pu",) * len(ids),
        values=values,
        provenance=provenance,
        std=np.zeros(values.shape),
        warnings={},
    )


@pytest.fixture(scope="module")
def feeder40():
    """A 40-bus feeder with its fused 14-day frame and sensor fleet."""
    net = make_feeder(40, 2, seed=0)
    truth = gen_scenario(net, days=14, pv_penetration=0.0, seed=100)
    fleet = default_fleet(net, include_angles=True)
    streams = emulate_sensors(truth, net, fleet, seed=200)
    frame = fuse(streams, ScadaClock(0, 900), 14 * DAY)
    return net, fleet, frame


def prufer_trees(nodes):
    """All labeled spanning trees on the given nodes via Prufer sequences."""
    n = len(nodes)
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for i in seq:
            degree[i] += 1
        seq = list(seq)
        edges = []
        for i in seq:
            leaf = min(j for j in range(n) if degree[j] == 1)
            edges.append((leaf, i))
            degree[leaf] -= 1
            degree[i] -= 1
        last = [j for j in range(n) if degree[j] == 1]
        edges.append((last[0], last[1]))
        yield [tuple(sorted((nodes[a], nodes[b]))) for a, b in edges]


class TestMiMatrix:
    def test_white_noise_pairs_near_zero(self):
        """Independent series share almost no information: 100 disjoint
        pairs of 10k-sample white noise all land below 0.01 nats."""
        rng = np.random.default_rng(7)
        cols = {f"s{i:03d}": rng.standard_normal(10_000) for i in range(200)}
        frame = frame_of(cols)
        mi = mutual_information_matrix(
            frame, {k: k for k in cols}, detrend="none", min_samples=100
        )
        vals = [mi.matrix[i, i + 100] for i in range(100)]
        assert max(vals) < 0.01
        assert min(vals) >= 0.0

    def test_identical_columns_hit_cap(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(2000)
        frame = frame_of({"a": x, "b": x.copy()})
        mi = mutual_information_matrix(
            frame, {"a": "a", "b": "b"}, detrend="none", min_samples=100
        )
        # the clamp is applied to rho^2 in float, so the cap is reproduced
        # to ~1e-5 relative, not exactly
        assert mi.value("a", "b") == pytest.approx(MI_CAP_NATS, rel=1e-4)

    def test_exactly_uncorrelated_pair_is_zero(self):
        x = np.tile([1.0, 1.0, -1.0, -1.0], 250)
        y = np.tile([1.0, -1.0, 1.0, -1.0], 250)
        frame = frame_of({"a": x, "b": y})
        mi = mutual_information_matrix(
            frame, {"a": "a", "b": "b"}, detrend="none", min_samples=100
        )
        assert mi.value("a", "b") == 0.0

    def test_symmetric_zero_diagonal_readonly(self):
        rng = np.random.default_rng(3)
        cols = {f"s{i}": rng.standard_normal(1500) for i in range(5)}
        mi = mutual_information_matrix(
            frame_of(cols), {k: k for k in cols}, min_samples=100
        )
        assert np.array_equal(mi.matrix, mi.matrix.T)
        assert np.all(np.diag(mi.matrix) == 0.0)
        assert not mi.matrix.flags.writeable

    def test_phasor_matches_dense_oracle(self):
        """The streaming phasor estimator equals the direct 4x4
        correlation-determinant formula on complete data."""
        rng = np.random.default_rng(0)
        n, p = 5000, 4
        z = rng.standard_normal((n, 2 * p)) @ rng.standard_normal((2 * p, 2 * p))
        cols = {}
        signals = {}
        for j in range(p):
            cols[f"m{j}.vm"] = z[:, j]
            cols[f"m{j}.va"] = z[:, p + j]
            signals[f"m{j}"] = (f"m{j}.vm", f"m{j}.va")
        mi = mutual_information_matrix(
            frame_of(cols), signals, detrend="none", min_samples=100
        )
        for i in range(p):
            for j in range(i + 1, p):
                x = np.column_stack([z[:, i], z[:, p + i], z[:, j], z[:, p + j]])
                r = np.corrcoef(x, rowvar=False)
                expect = -0.5 * np.log(
                    np.linalg.det(r)
                    / (np.linalg.det(r[:2, :2]) * np.linalg.det(r[2:, 2:]))
                )
                assert mi.matrix[i, j] == pytest.approx(expect, abs=1e-10)

    def test_constant_column_undefined_pairwise(self):
        rng = np.random.default_rng(5)
        cols = {
            "a": rng.standard_normal(1000),
            "b": rng.standard_normal(1000),
            "flat": np.ones(1000),
        }
        mi = mutual_information_matrix(
            frame_of(cols), {k: k for k in cols}, detrend="none", min_samples=100
        )
        assert np.isnan(mi.value("a", "flat"))
        assert np.isnan(mi.value("b", "flat"))
        assert np.isfinite(mi.value("a", "b"))
        with pytest.raises(ValueError, match="no defined MI"):
            chow_liu_tree(mi)

    def test_interpolated_cells_excluded_by_default(self):
        """Cells marked interpolated carry synthetic values; by default they
        must not influence the estimate at all."""
        rng = np.random.default_rng(11)
        x = rng.standard_normal(2000)
        y = 0.8 * x + 0.6 * rng.standard_normal(2000)
        corrupted = y.copy()
        bad = rng.random(2000) < 0.05
        corrupted[bad] = 50.0  # wildly wrong values on non-measured cells
        prov = np.full((2000, 2), Provenance.MEASURED, dtype=np.uint8)
        prov[bad, 1] = Provenance.INTERPOLATED
        frame = frame_of({"a": x, "b": corrupted}, provenance=prov)
        clean = mutual_information_matrix(
            frame_of({"a": x[~bad], "b": y[~bad]}),
            {"a": "a", "b": "b"},
            detrend="none",
            min_samples=100,
        )
        default = mutual_information_matrix(
            frame, {"a": "a", "b": "b"}, detrend="none", min_samples=100
        )
        opted_in = mutual_information_matrix(
            frame,
            {"a": "a", "b": "b"},
            detrend="none",
            min_samples=100,
            include_interpolated=True,
        )
        assert default.value("a", "b") == pytest.approx(clean.value("a", "b"))
        assert opted_in.value("a", "b") != pytest.approx(clean.value("a", "b"))

    def test_diff_strips_common_trend(self):
        """A shared slow ramp fakes dependence at raw level; differencing
        removes it."""
        rng = np.random.default_rng(13)
        trend = np.linspace(0.0, 50.0, 4000)
        a = trend + rng.standard_normal(4000)
        b = trend + rng.standard_normal(4000)
        frame = frame_of({"a": a, "b": b})
        raw = mutual_information_matrix(
            frame, {"a": "a", "b": "b"}, detrend="none", min_samples=100
        )
        diffed = mutual_information_matrix(
            frame, {"a": "a", "b": "b"}, detrend="diff", min_samples=100
        )
        assert raw.value("a", "b") > 1.0
        assert diffed.value("a", "b") < 0.01

    def test_validation_errors(self):
        rng = np.random.default_rng(17)
        cols = {"a": rng.standard_normal(500), "b": rng.standard_normal(500)}
        frame = frame_of(cols)
        with pytest.raises(ValueError, match="detrend"):
            mutual_information_matrix(frame, {"a": "a"}, detrend="fft")
        with pytest.raises(ValueError, match="no signals"):
            mutual_information_matrix(frame, {})
        with pytest.raises(ValueError, match="all magnitudes or all"):
            mutual_information_matrix(frame, {"a": "a", "b": ("a", "b")})
        with pytest.raises(ValueError, match="usable samples"):
            mutual_information_matrix(frame, {"a": "a", "b": "b"})  # 500 < 672


class TestChowLiu:
    def test_two_meters(self):
        mi = MiMatrix(("a", "b"), np.array([[0.0, 1.0], [1.0, 0.0]]), "gaussian-scalar")
        tree = chow_liu_tree(mi)
        assert tree.edges == (("a", "b"),)

    def test_four_chain_matches_exhaustive_search(self):
        """On a chain-structured series the recovered tree maximizes total
        MI over all 16 labeled spanning trees, and is the chain."""
        rng = np.random.default_rng(23)
        n = 20_000
        x0 = rng.standard_normal(n)
        x1 = x0 + 0.6 * rng.standard_normal(n)
        x2 = x1 + 0.6 * rng.standard_normal(n)
        x3 = x2 + 0.6 * rng.standard_normal(n)
        cols = {"m0": x0, "m1": x1, "m2": x2, "m3": x3}
        mi = mutual_information_matrix(
            frame_of(cols), {k: k for k in cols}, detrend="none", min_samples=100
        )
        tree = chow_liu_tree(mi)

        def weight(edges):
            return sum(mi.value(a, b) for a, b in edges)

        best = max(prufer_trees(tuple(cols)), key=weight)
        assert set(tree.edges) == set(best)
        assert set(tree.edges) == {("m0", "m1"), ("m1", "m2"), ("m2", "m3")}

    def test_equal_weights_tie_break_lexicographic(self):
        m = np.ones((3, 3)) - np.eye(3)
        mi = MiMatrix(("c", "a", "b"), m, "gaussian-scalar")
        tree = chow_liu_tree(mi)
        assert tree.edges == (("a", "b"), ("a", "c"))

    def test_single_node(self):
        mi = MiMatrix(("solo",), np.zeros((1, 1)), "gaussian-scalar")
        assert chow_liu_tree(mi).edges == ()

    def test_unknown_root_rejected(self):
        mi = MiMatrix(("a", "b"), np.array([[0.0, 1.0], [1.0, 0.0]]), "gaussian-scalar")
        with pytest.raises(ValueError, match="root"):
            chow_liu_tree(mi, root="zz")

    def test_disconnected_graph_rejected(self):
        m = np.full((4, 4), np.nan)
        m[0, 1] = m[1, 0] = 1.0
        m[2, 3] = m[3, 2] = 1.0
        np.fill_diagonal(m, 0.0)
        mi = MiMatrix(("a", "b", "c", "d"), m, "gaussian-scalar")
        with pytest.raises(ValueError, match="disconnected"):
            chow_liu_tree(mi)


class TestIdentifyPhases:
    def test_reference_plus_noise(self):
        rng = np.random.default_rng(31)
        refs = {ph: rng.standard_normal(2000) for ph in "ABC"}
        meter = refs["B"] + 0.3 * rng.standard_normal(2000)
        cols = {f"ref_{ph}": refs[ph] for ph in "ABC"}
        cols["m"] = meter
        frame = frame_of(cols)
        labels = identify_phases(
            frame, {ph: f"ref_{ph}" for ph in "ABC"}, {"m": "m"}
        )
        assert labels == {"m": "B"}

    def test_identical_references_ambiguous(self):
        rng = np.random.default_rng(37)
        base = rng.standard_normal(1000)
        cols = {f"ref_{ph}": base for ph in "ABC"}
        cols["m"] = base + 0.1 * rng.standard_normal(1000)
        with pytest.raises(ValueError, match="ambiguous"):
            identify_phases(
                frame_of(cols), {ph: f"ref_{ph}" for ph in "ABC"}, {"m": "m"}
            )

    def test_missing_reference_rejected(self):
        rng = np.random.default_rng(41)
        cols = {"ref_A": rng.standard_normal(100), "m": rng.standard_normal(100)}
        with pytest.raises(ValueError, match="one reference per phase"):
            identify_phases(frame_of(cols), {"A": "ref_A"}, {"m": "m"})

    def test_constant_meter_rejected(self):
        rng = np.random.default_rng(43)
        cols = {f"ref_{ph}": rng.standard_normal(1000) for ph in "ABC"}
        cols["m"] = np.ones(1000)
        with pytest.raises(ValueError, match="undefined correlation"):
            identify_phases(
                frame_of(cols), {ph: f"ref_{ph}" for ph in "ABC"}, {"m": "m"}
            )

    def test_corrupted_phase_labels_restored(self):
        """With a third of meter phase labels corrupted, correlation against
        the head references restores at least 95% of them, every seed."""
        for seed in range(20):
            net = make_feeder(60, 2, seed=seed)
            truth = gen_scenario(net, days=14, pv_penetration=0.0, seed=seed + 100)
            fleet = default_fleet(net)
            streams = emulate_sensors(truth, net, fleet, seed=seed + 200)
            frame = fuse(streams, ScadaClock(0, 900), 14 * DAY)
            loads = net.load_bus_ids
            _, log = corrupt_records(
                net, phase_error_rate=1 / 3, parent_error_rate=0.0, seed=seed + 300
            )
            refs = {
                net.bus(s.target).phase: f"reference_{s.target}.vm"
                for s in fleet
                if s.kind == "reference"
            }
            labels = identify_phases(frame, refs, {b: f"ami_{b}.vm" for b in loads})
            corrupted = [c.bus_id for c in log if c.field == "phase"]
            restored = sum(1 for b in corrupted if labels[b] == net.bus(b).phase)
            assert restored / len(corrupted) >= 0.95


class TestScoreAgainstTruth:
    def test_equal_trees(self):
        t = ConnectivityTree(("a", "b", "c"), (("a", "b"), ("b", "c")))
        assert score_against_truth(t, t) == 0.0

    def test_star_vs_chain_two_thirds(self):
        chain = ConnectivityTree(
            ("a", "b", "c", "d"), (("a", "b"), ("b", "c"), ("c", "d"))
        )
        star_truth = ConnectivityTree(
            ("a", "b", "c", "d"), (("a", "b"), ("a", "c"), ("a", "d"))
        )
        assert score_against_truth(chain, star_truth) == pytest.approx(2 / 3)

    def test_edge_iterable_truth(self):
        t = ConnectivityTree(("a", "b", "c"), (("a", "b"), ("b", "c")))
        assert score_against_truth(t, [("b", "a"), ("a", "c")]) == 0.5

    def test_node_mismatch_rejected(self):
        t = ConnectivityTree(("a", "b"), (("a", "b"),))
        truth = ConnectivityTree(("a", "z"), (("a", "z"),))
        with pytest.raises(ValueError, match="node sets"):
            score_against_truth(t, truth)
        with pytest.raises(ValueError, match="outside the tree"):
            score_against_truth(t, [("a", "z")])

    def test_empty_truth_rejected(self):
        t = ConnectivityTree(("a", "b"), (("a", "b"),))
        with pytest.raises(ValueError, match="empty"):
            score_against_truth(t, [])

    def test_feeder_truth_is_forest(self):
        net = make_feeder(20, 1, seed=3)
        edges = feeder_truth_edges(net)
        # one component per feeder head, heads not linked to the slack
        assert len(edges) == len(net.load_bus_ids) - 3
        assert all("sub" not in e for e in edges)


class TestFeederRecovery:
    def test_magnitude_tree_close(self, feeder40):
        net, fleet, frame = feeder40
        signals = {b: f"ami_{b}.vm" for b in net.load_bus_ids}
        tree = chow_liu_tree(mutual_information_matrix(frame, signals))
        err = score_against_truth(tree, feeder_truth_edges(net))
        assert err <= 0.06  # at most 2 of 36 meter-level edges missed

    def test_phasor_tree_exact(self, feeder40):
        net, fleet, frame = feeder40
        signals = {b: (f"ami_{b}.vm", f"ami_{b}.va") for b in net.load_bus_ids}
        tree = chow_liu_tree(mutual_information_matrix(frame, signals))
        assert score_against_truth(tree, feeder_truth_edges(net)) == 0.0

    def test_phases_all_correct(self, feeder40):
        net, fleet, frame = feeder40
        refs = {
            net.bus(s.target).phase: f"reference_{s.target}.vm"
            for s in fleet
            if s.kind == "reference"
        }
        labels = identify_phases(
            frame, refs, {b: f"ami_{b}.vm" for b in net.load_bus_ids}
        )
        assert all(labels[b] == net.bus(b).phase for b in net.load_bus_ids)

    @pytest.mark.parametrize("factor", [2.0, 0.125, 1.7])
    def test_scale_invariance(self, feeder40, factor):
        """A common rescaling of every voltage series leaves the MI matrix
        and the tree unchanged (bit-exact for power-of-two factors)."""
        import dataclasses

        net, fleet, frame = feeder40
        signals = {b: f"ami_{b}.vm" for b in net.load_bus_ids}
        base = mutual_information_matrix(frame, signals)
        scaled_frame = dataclasses.replace(frame, values=frame.values * factor)
        scaled = mutual_information_matrix(scaled_frame, signals)
        exact = float(factor).hex().split("p")[0] in ("0x1.0", "-0x1.0")
        if exact:
            assert np.array_equal(scaled.matrix, base.matrix)
        else:
            np.testing.assert_allclose(scaled.matrix, base.matrix, rtol=1e-9)
        assert chow_liu_tree(scaled).edges == chow_liu_tree(base).edges

    def test_deterministic(self, feeder40):
        net, fleet, frame = feeder40
        signals = {b: f"ami_{b}.vm" for b in net.load_bus_ids}
        a = mutual_information_matrix(frame, signals)
        b = mutual_information_matrix(frame, signals)
        assert a.matrix.tobytes() == b.matrix.tobytes()
        assert chow_liu_tree(a) == chow_liu_tree(b)

    def test_longer_history_does_not_hurt(self):
        """Median edge error over 20 seeds is non-increasing as the history
        grows through 7, 14, and 30 days on the reference-size feeder."""
        medians = []
        for days in (7, 14, 30):
            errs = []
            for seed in range(20):
                net = make_feeder(123, 4, seed=seed)
                truth = gen_scenario(
                    net, days=days, pv_penetration=0.0, seed=seed + 100
                )
                fleet = default_fleet(net)
                streams = emulate_sensors(truth, net, fleet, seed=seed + 200)
                frame = fuse(streams, ScadaClock(0, 900), days * DAY)
                signals = {b: f"ami_{b}.vm" for b in net.load_bus_ids}
                mi = mutual_information_matrix(frame, signals, min_samples=600)
                errs.append(
                    score_against_truth(chow_liu_tree(mi), feeder_truth_edges(net))
                )
            medians.append(float(np.median(errs)))
        assert medians[0] >= medians[1] >= medians[2]
