"""Connectivity and phase recovery from AMI voltage time series.

Pairwise mutual information between voltage series (closed-form Gaussian
estimator), a maximum-weight spanning tree over the MI graph, and phase
labeling against per-phase reference meters.  Together these rebuild the
meter-level feeder topology from data alone, which is how corrupted
connectivity records get audited and repaired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from .grid_model import PHASES, FeederNetwork, _tree_structure
from .vscada import Provenance, VScadaFrame

MI_CAP_NATS = -0.5 * math.log(1e-12)  # ~13.8, the clamp on perfect correlation
MIN_SAMPLES = 672  # one week at 15 minutes

SignalRef = Union[str, tuple[str, str]]  # magnitude column or (vm, va) pair

__all__ = [
    "MI_CAP_NATS",
    "MIN_SAMPLES",
    "MiMatrix",
    "ConnectivityTree",
    "mutual_information_matrix",
    "chow_liu_tree",
    "identify_phases",
    "score_against_truth",
    "feeder_truth_edges",
]


@dataclass(frozen=True)
class MiMatrix:
    """Symmetric pairwise mutual information in nats; NaN = undefined pair."""

    node_ids: tuple[str, ...]
    matrix: np.ndarray
    estimator: str  # "gaussian-scalar" | "gaussian-phasor"

    def value(self, a: str, b: str) -> float:
        i, j = self.node_ids.index(a), self.node_ids.index(b)
        return float(self.matrix[i, j])


@dataclass(frozen=True)
class ConnectivityTree:
    """Undirected spanning tree over meter ids (optionally rooted)."""

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]  # each sorted, list sorted
    root: Optional[str] = None

    @property
    def edge_set(self) -> frozenset:
        return frozenset(self.edges)

    def __len__(self) -> int:
        return len(self.edges)


# ---------------------------------------------------------------------------
# mutual information
# ---------------------------------------------------------------------------


def _usable_column(
    frame: VScadaFrame, signal_id: str, include_interpolated: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Column values and the mask of cells trustworthy for statistics.

    Forecast and imputed cells are always excluded: their values are model
    output, and correlating model output would leak the model's structure
    into the topology estimate.  Interpolated cells are excluded by
    default for the same reason in miniature — an interpolated value is a
    convex combination of its neighbors, and even a percent of such cells
    biases pairwise second moments enough to scramble the fine MI margins
    that separate adjacent meters from near-adjacent ones.
    """
    j = frame.column_index(signal_id)
    prov = frame.provenance[:, j]
    mask = prov == Provenance.MEASURED
    if include_interpolated:
        mask = mask | (prov == Provenance.INTERPOLATED)
    return frame.values[:, j], mask


def _pair_stats(z: np.ndarray, m: np.ndarray):
    """Pairwise-complete first/second moments via matrix products.

    z is the column matrix with invalid cells zeroed, m the valid mask.
    Returns (counts, sum_i, sum_sq_i, cross) where sum_i[i, j] is the sum
    of column i over the joint support of (i, j).
    """
    mf = m.astype(float)
    counts = mf.T @ mf
    sum_i = z.T @ mf
    sum_sq_i = (z * z).T @ mf
    cross = z.T @ z
    return counts, sum_i, sum_sq_i, cross


def _scalar_mi(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, x, 0.0)
    counts, s1, s2, cross = _pair_stats(z, mask)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_i = s1 / counts
        var_i = s2 / counts - mean_i**2
        cov = cross / counts - mean_i * mean_i.T
        rho2 = cov**2 / (var_i * var_i.T)
    undefined = (counts < 2) | (var_i <= 0) | (var_i.T <= 0)
    rho2 = np.clip(rho2, 0.0, 1.0 - 1e-12)
    mi = -0.5 * np.log1p(-rho2)
    mi[undefined] = np.nan
    return mi


def _phasor_mi(vm, va, mask) -> np.ndarray:
    zv = np.where(mask, vm, 0.0)
    za = np.where(mask, va, 0.0)
    mf = mask.astype(float)
    counts = mf.T @ mf
    # per-node sums over the joint support of each pair
    s_v = zv.T @ mf
    s_a = za.T @ mf
    s_vv = (zv * zv).T @ mf
    s_aa = (za * za).T @ mf
    s_va = (zv * za).T @ mf  # within-node cross moment
    c_vv = zv.T @ zv
    c_vva = zv.T @ za  # vm_i * va_j
    c_aa = za.T @ za

    p = vm.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        n = counts
        mu = np.empty((p, p, 4))
        mu[..., 0] = s_v / n
        mu[..., 1] = s_a / n
        mu[..., 2] = (s_v / n).T
        mu[..., 3] = (s_a / n).T
        second = np.empty((p, p, 4, 4))
        second[..., 0, 0] = s_vv / n
        second[..., 0, 1] = s_va / n
        second[..., 0, 2] = c_vv / n
        second[..., 0, 3] = c_vva / n
        second[..., 1, 1] = s_aa / n
        second[..., 1, 2] = (c_vva / n).T
        second[..., 1, 3] = c_aa / n
        second[..., 2, 2] = (s_vv / n).T
        second[..., 2, 3] = (s_va / n).T
        second[..., 3, 3] = (s_aa / n).T
        for r in range(4):
            for c in range(r):
                second[..., r, c] = second[..., c, r]
        cov = second - mu[..., :, None] * mu[..., None, :]
        diag = np.sqrt(np.maximum(cov[..., np.arange(4), np.arange(4)], 0.0))
        denom = diag[..., :, None] * diag[..., None, :]
        corr = cov / denom
    bad_var = (diag <= 0).any(axis=-1) | (counts < 3)
    corr = np.where(np.isfinite(corr), corr, 0.0)
    det4 = np.linalg.det(corr)
    det_i = np.linalg.det(corr[..., :2, :2])
    det_j = np.linalg.det(corr[..., 2:, 2:])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = det4 / (det_i * det_j)
    ratio = np.clip(ratio, 1e-12, 1.0)
    mi = -0.5 * np.log(ratio)
    mi[bad_var | (det_i <= 0) | (det_j <= 0)] = np.nan
    return mi


def mutual_information_matrix(
    frame: VScadaFrame,
    signals: Mapping[str, SignalRef],
    *,
    detrend: str = "diff",
    min_samples: int = MIN_SAMPLES,
    include_interpolated: bool = False,
) -> MiMatrix:
    """Pairwise MI between voltage signals under a Gaussian model.

    ``signals`` maps node id to a magnitude column, or to a (magnitude,
    angle) column pair, in which case each node is a 2-d variable.  Only
    measured cells enter by default (``include_interpolated=True`` also
    admits linearly interpolated cells, at a real cost in tree accuracy —
    see :func:`_usable_column`).  ``detrend="diff"`` (default) first-
    differences each series, which strips slow common-mode trends and is
    what makes nearby meters distinguishable; ``"none"`` correlates raw
    levels.  Pairs with no joint variance come back NaN (undefined).
    """
    if detrend not in ("diff", "none"):
        raise ValueError(f"unknown detrend mode {detrend!r}")
    if not signals:
        raise ValueError("no signals given")
    node_ids = tuple(signals.keys())
    refs = [signals[n] for n in node_ids]
    phasor = isinstance(refs[0], tuple)
    if any(isinstance(r, tuple) != phasor for r in refs):
        raise ValueError("signals must be all magnitudes or all (vm, va) pairs")

    n_ticks = frame.n_ticks
    p = len(node_ids)
    vm = np.empty((n_ticks, p))
    mask = np.empty((n_ticks, p), dtype=bool)
    va = np.empty((n_ticks, p)) if phasor else None
    for j, ref in enumerate(refs):
        if phasor:
            x, mx = _usable_column(frame, ref[0], include_interpolated)
            y, my = _usable_column(frame, ref[1], include_interpolated)
            vm[:, j], va[:, j] = x, y
            mask[:, j] = mx & my
        else:
            vm[:, j], mask[:, j] = _usable_column(frame, ref, include_interpolated)

    shortage = mask.sum(axis=0) < min_samples
    if shortage.any():
        bad = [node_ids[j] for j in np.flatnonzero(shortage)]
        raise ValueError(
            f"need >= {min_samples} usable samples per signal; too few for {bad}"
        )

    if detrend == "diff":
        cols = []
        dmask = None
        for arr in ([vm, va] if phasor else [vm]):
            out = np.empty_like(arr)
            out[0] = 0.0
            out[1:] = arr[1:] - arr[:-1]
            cols.append(out)
        dmask = np.zeros_like(mask)
        dmask[1:] = mask[1:] & mask[:-1]
        if phasor:
            vm, va = cols
        else:
            (vm,) = cols
        mask = dmask

    if phasor:
        mi = _phasor_mi(vm, va, mask)
        estimator = "gaussian-phasor"
    else:
        mi = _scalar_mi(vm, mask)
        estimator = "gaussian-scalar"

    mi = 0.5 * (mi + mi.T)  # exact symmetry against floating asymmetries
    np.fill_diagonal(mi, 0.0)
    mi.flags.writeable = False
    return MiMatrix(node_ids=node_ids, matrix=mi, estimator=estimator)


# ---------------------------------------------------------------------------
# maximum-weight spanning tree
# ---------------------------------------------------------------------------


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def chow_liu_tree(mi: MiMatrix, root: Optional[str] = None) -> ConnectivityTree:
    """Maximum-weight spanning tree of the MI graph (Kruskal).

    Ties are broken by the lexicographically smallest (min id, max id)
    pair, so the output is deterministic.  Undefined (NaN) pairs carry no
    edge; if they disconnect the graph, this fails.
    """
    ids = mi.node_ids
    n = len(ids)
    if root is not None and root not in ids:
        raise ValueError(f"root {root!r} is not among the matrix nodes")
    if n == 1:
        return ConnectivityTree(nodes=ids, edges=(), root=root)
    m = mi.matrix
    finite_rows = np.isfinite(m) & ~np.eye(n, dtype=bool)
    if not finite_rows.any(axis=1).all():
        isolated = [ids[i] for i in np.flatnonzero(~finite_rows.any(axis=1))]
        raise ValueError(f"nodes with no defined MI to any other node: {isolated}")

    candidates = []
    for i in range(n):
        for j in range(i + 1, n):
            if np.isfinite(m[i, j]):
                a, b = sorted((ids[i], ids[j]))
                candidates.append((-float(m[i, j]), a, b, i, j))
    candidates.sort(key=lambda e: (e[0], e[1], e[2]))

    uf = _UnionFind(n)
    edges = []
    for _, a, b, i, j in candidates:
        if uf.union(i, j):
            edges.append((a, b))
            if len(edges) == n - 1:
                break
    if len(edges) != n - 1:
        raise ValueError(
            "MI graph is disconnected after excluding undefined pairs; "
            "cannot build a spanning tree"
        )
    return ConnectivityTree(nodes=ids, edges=tuple(sorted(edges)), root=root)


# ---------------------------------------------------------------------------
# phase identification
# ---------------------------------------------------------------------------


def _masked_corr(x, mx, y, my) -> float:
    both = mx & my
    n = int(both.sum())
    if n < 3:
        return np.nan
    xs, ys = x[both], y[both]
    xs = xs - xs.mean()
    ys = ys - ys.mean()
    denom = math.sqrt(float(xs @ xs) * float(ys @ ys))
    if denom == 0:
        return np.nan
    return float(xs @ ys) / denom


def identify_phases(
    frame: VScadaFrame,
    references: Mapping[str, str],
    meters: Mapping[str, str],
) -> dict[str, str]:
    """Label each meter with the phase of its best-correlated reference.

    ``references`` maps each of the three phases to a labeled reference
    voltage column; ``meters`` maps meter id to its voltage column.  Raw
    levels are compared (the per-phase source excursions are the signal
    here, so differencing would be counterproductive).  An exact
    correlation tie is reported as an ambiguity error.
    """
    if sorted(references.keys()) != sorted(PHASES):
        raise ValueError(
            f"need one reference per phase {PHASES}, got {sorted(references)}"
        )
    ref_data = {
        ph: _usable_column(frame, references[ph]) for ph in PHASES
    }
    labels: dict[str, str] = {}
    for meter, signal in meters.items():
        x, mx = _usable_column(frame, signal)
        corrs = {}
        for ph in PHASES:
            y, my = ref_data[ph]
            corrs[ph] = _masked_corr(x, mx, y, my)
        if any(np.isnan(c) for c in corrs.values()):
            raise ValueError(
                f"meter {meter!r}: undefined correlation with a reference "
                f"(constant or insufficient overlap)"
            )
        best = max(corrs.values())
        winners = [ph for ph in PHASES if corrs[ph] == best]
        if len(winners) != 1:
            raise ValueError(
                f"meter {meter!r}: ambiguous phase (tied correlation for "
                f"{winners})"
            )
        labels[meter] = winners[0]
    return labels


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def _normalize_edges(edges: Iterable) -> frozenset:
    return frozenset(tuple(sorted((a, b))) for a, b in edges)


def score_against_truth(
    tree: ConnectivityTree,
    truth: Union[ConnectivityTree, Iterable],
) -> float:
    """Fraction of truth edges missing from the recovered tree.

    ``truth`` may be a ConnectivityTree (node sets must match) or a bare
    edge collection — e.g. the meter-level truth of a feeder, which is a
    forest when the substation itself carries no meter.
    """
    if isinstance(truth, ConnectivityTree):
        if set(truth.nodes) != set(tree.nodes):
            raise ValueError("truth and recovered trees cover different node sets")
        truth_edges = truth.edge_set
    else:
        truth_edges = _normalize_edges(truth)
        nodes = set(tree.nodes)
        stray = {e for e in truth_edges if not set(e) <= nodes}
        if stray:
            raise ValueError(f"truth edges reference nodes outside the tree: {sorted(stray)}")
    if not truth_edges:
        raise ValueError("truth edge set is empty")
    missing = len(truth_edges - tree.edge_set)
    return missing / len(truth_edges)


def feeder_truth_edges(net: FeederNetwork) -> frozenset:
    """Meter-level truth edges of the as-built feeder.

    Edges between load buses that are parent/child in the default tree;
    head buses hang from the (unmetered) substation, so the result is a
    forest with one component per feeder head.
    """
    tree = _tree_structure(net, net.default_state())
    slack = set(int(s) for s in tree.slack_idx)
    edges = []
    for i in range(len(net.buses)):
        p = int(tree.parent[i])
        if p >= 0 and p not in slack and i not in slack:
            edges.append(tuple(sorted((net.buses[i].id, net.buses[p].id))))
    return frozenset(edges)
