"""Synthetic feeders, scenarios, and sensor emulation.

Produces random-but-reproducible radial feeders with tie/sectionalizer
switch assemblies, minute-resolution ground-truth scenarios (loads, PV,
irradiance, per-phase source offsets), emulated sensor streams with
sampling/noise/dropout/latency, and corrupted meter-record tables with a
truth log.  The truth clock is one minute everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .grid_model import (
    PHASES,
    FeederNetwork,
    build_network,
    solve_power_flow_batch,
    _tree_structure,
)

MINUTE_S = 60
DAY_MIN = 24 * 60
WEEK_HOURS = 168

__all__ = [
    "SensorSpec",
    "RawStream",
    "PvSite",
    "ScenarioTruth",
    "GisRecord",
    "GisCorruption",
    "make_feeder",
    "tie_assemblies",
    "head_buses",
    "gen_scenario",
    "default_fleet",
    "emulate_sensors",
    "corrupt_records",
    "hour_of_week_shape",
]


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SensorSpec:
    """One emulated sensor: what it measures, where, and how badly."""

    kind: str  # "ami" | "line" | "reference" | "proxy"
    target: str  # bus id, line id, or region id ("r0", "r1", ...)
    quantities: tuple[str, ...]  # subset of p,q,vm,va,flow_p,flow_q,irr
    interval_s: int = 900
    latency_s: float = 0.0  # fixed reporting delay
    jitter_s: float = 0.0  # uniform +- jitter around the fixed delay
    dropout: float = 0.0  # per-sample loss probability
    noise_rel: float = 0.0  # noise std relative to the signal's std
    id: Optional[str] = None

    @property
    def sensor_id(self) -> str:
        return self.id if self.id is not None else f"{self.kind}_{self.target}"

    @property
    def latency_max(self) -> float:
        return max(0.0, self.latency_s + self.jitter_s)


@dataclass(frozen=True)
class RawStream:
    """Irregular samples from one sensor channel.

    ``noise_std`` is the absolute noise std applied during emulation and
    ``latency_max`` the worst-case reporting delay; both ride along as
    metadata for the fusion stage.
    """

    id: str
    quantity: str
    units: str
    ts_meas: np.ndarray  # seconds, ordered
    ts_arrival: np.ndarray  # seconds
    values: np.ndarray
    noise_std: float = 0.0
    latency_max: float = 0.0
    interval_s: Optional[int] = None  # nominal sample spacing, if known

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class PvSite:
    bus_id: str
    capacity: float  # p.u. at full irradiance and unit site scale
    scale: float  # orientation/derating factor in (0, 1]
    region: int


@dataclass(frozen=True)
class ScenarioTruth:
    """Minute-resolution ground truth for one scenario horizon."""

    bus_ids: tuple[str, ...]  # load-bus order for the load arrays
    n_minutes: int
    loads_p: np.ndarray  # (n_minutes, n_load) gross consumption, positive
    loads_q: np.ndarray
    pv_sites: tuple[PvSite, ...]
    pv_gen: np.ndarray  # (n_minutes, n_sites) generation, nonnegative
    irradiance: np.ndarray  # (n_minutes, n_regions) in [0, 1]
    phase_offsets: np.ndarray  # (n_minutes, 3) source-magnitude offsets, p.u.
    region_of: dict[str, int]  # load bus -> proxy region
    events: tuple[tuple[str, int, bool], ...] = ()  # (switch id, minute, closed)
    start_s: int = 0

    @property
    def n_regions(self) -> int:
        return self.irradiance.shape[1]

    def net_injection(self, minutes: Optional[np.ndarray] = None) -> np.ndarray:
        """Net complex injection per load bus (consumption negative)."""
        if minutes is None:
            minutes = np.arange(self.n_minutes)
        s = -(self.loads_p[minutes] + 1j * self.loads_q[minutes])
        for k, site in enumerate(self.pv_sites):
            s[:, self.bus_ids.index(site.bus_id)] += self.pv_gen[minutes, k]
        return s


@dataclass(frozen=True)
class GisRecord:
    bus_id: str
    phase: str
    parent: str


@dataclass(frozen=True)
class GisCorruption:
    bus_id: str
    field: str  # "phase" | "parent"
    true_value: str
    corrupted_value: str


# ---------------------------------------------------------------------------
# feeder synthesis
# ---------------------------------------------------------------------------


def make_feeder(
    n_buses: int,
    n_switches: int,
    seed: int,
    *,
    r_mean: float = 0.010,
    x_over_r: float = 1.5,
    limit: float = 2.5,
) -> FeederNetwork:
    """Random radial multi-feeder network with tie/sectionalizer assemblies.

    Buses beyond the slack attach uniformly at random to earlier load buses;
    for ``n_buses >= 4`` the slack gets exactly three feeder heads, one per
    phase, and phases are inherited down each head's subtree.  Each of the
    ``n_switches`` assemblies adds one normally-open tie line plus one
    normally-closed sectionalizing switch on a tree line inside the tie's
    loop, with loops kept edge-disjoint so any combination of assembly
    toggles stays radial.

    Raises ValueError when the requested assemblies cannot be placed.
    """
    if n_buses < 2:
        raise ValueError(f"n_buses must be >= 2, got {n_buses}")
    if n_switches < 0 or n_switches >= n_buses:
        raise ValueError(
            f"n_switches must be in [0, n_buses), got {n_switches} for {n_buses} buses"
        )
    rng = np.random.default_rng(seed)

    parent = np.zeros(n_buses, dtype=int)  # index of parent bus; bus 0 = slack
    phase = ["A"] * n_buses
    n_heads = min(3, n_buses - 1)
    for i in range(1, n_heads + 1):
        parent[i] = 0
        phase[i] = PHASES[i - 1]
    # grow each new bus under the currently lightest phase (planners balance
    # connected load across phases), at a uniformly random attachment point
    # within that phase's subtree
    by_phase: dict[str, list[int]] = {phase[i]: [i] for i in range(1, n_heads + 1)}
    for i in range(n_heads + 1, n_buses):
        ph = min(by_phase, key=lambda p: (len(by_phase[p]), p))
        members = by_phase[ph]
        parent[i] = members[int(rng.integers(len(members)))]
        phase[i] = ph
        members.append(i)

    def bus_id(i: int) -> str:
        return "sub" if i == 0 else f"b{i:03d}"

    buses = [{"id": "sub", "kind": "slack", "phase": "A"}]
    lines = []
    for i in range(1, n_buses):
        buses.append({"id": bus_id(i), "kind": "load", "phase": phase[i]})
        r = float(r_mean * rng.uniform(0.7, 1.3))
        x = float(r * x_over_r * rng.uniform(0.9, 1.1))
        lines.append(
            {
                "id": f"l{i:03d}",
                "from": bus_id(parent[i]),
                "to": bus_id(i),
                "r": r,
                "x": x,
                "limit": limit,
            }
        )

    # children adjacency for tree paths
    children: list[list[int]] = [[] for _ in range(n_buses)]
    for i in range(1, n_buses):
        children[parent[i]].append(i)

    def path_edges(u: int, v: int) -> list[int]:
        """Tree edges (as child-bus indices) on the path u..v."""
        seen_u = {}
        node = u
        while node != 0:
            seen_u[node] = True
            node = parent[node]
        seen_u[0] = True
        # climb from v to the first common ancestor
        path_v = []
        node = v
        while node not in seen_u:
            path_v.append(node)
            node = parent[node]
        anc = node
        path_u = []
        node = u
        while node != anc:
            path_u.append(node)
            node = parent[node]
        return path_u + path_v

    switches = []
    used_edges: set[int] = set()
    adjacent = {(min(i, parent[i]), max(i, parent[i])) for i in range(1, n_buses)}
    placed = 0
    attempts = 0
    max_attempts = 400 * max(1, n_switches)
    while placed < n_switches:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(
                f"could not place {n_switches} tie assemblies on a "
                f"{n_buses}-bus feeder (only {placed} edge-disjoint loops found)"
            )
        u, v = (int(b) for b in rng.choice(np.arange(1, n_buses), size=2, replace=False))
        if (min(u, v), max(u, v)) in adjacent:
            continue
        cycle = path_edges(u, v)
        if not cycle or any(e in used_edges for e in cycle):
            continue
        sect = int(cycle[int(rng.integers(len(cycle)))])
        used_edges.update(cycle)
        tie_id = f"t{placed}"
        lines.append(
            {
                "id": tie_id,
                "from": bus_id(u),
                "to": bus_id(v),
                "r": float(r_mean * rng.uniform(0.7, 1.3)),
                "x": float(r_mean * x_over_r * rng.uniform(0.9, 1.1)),
                "limit": limit,
            }
        )
        switches.append({"id": f"sw_t{placed}", "line": tie_id, "closed": False})
        switches.append({"id": f"sw_s{placed}", "line": f"l{sect:03d}", "closed": True})
        placed += 1

    return build_network({"buses": buses, "lines": lines, "switches": switches})


def tie_assemblies(net: FeederNetwork) -> list[tuple[str, str]]:
    """Pair each normally-open tie switch with its sectionalizing partner.

    The partner is the unique normally-closed switch sitting on the tie's
    loop in the default tree.  Raises ValueError if a tie has no unique
    partner (not a synth-style feeder).
    """
    tree = _tree_structure(net, net.default_state())
    sect_by_line = {
        s.line: s.id for s in net.switches if s.closed
    }
    pairs = []
    for sw in net.switches:
        if sw.closed:
            continue
        ln = net.line(sw.line)
        u, v = net.bus_index(ln.from_bus), net.bus_index(ln.to_bus)
        # the loop's tree edges are the symmetric difference of the two
        # root paths (shared ancestry above the meeting point is not on
        # the cycle)
        root_paths = []
        for node in (u, v):
            lines_on_path = set()
            while tree.parent[node] >= 0:
                lines_on_path.add(net.lines[tree.parent_line[node]].id)
                node = tree.parent[node]
            root_paths.append(lines_on_path)
        path_lines = root_paths[0] ^ root_paths[1]
        partners = sorted(
            sect_by_line[line_id] for line_id in path_lines if line_id in sect_by_line
        )
        if len(partners) != 1:
            raise ValueError(
                f"tie switch {sw.id!r} has {len(partners)} sectionalizer "
                f"candidates on its loop; expected exactly 1"
            )
        pairs.append((sw.id, partners[0]))
    return pairs


def head_buses(net: FeederNetwork) -> tuple[str, ...]:
    """Load buses directly attached to a slack bus in the default tree."""
    tree = _tree_structure(net, net.default_state())
    slack = set(tree.slack_idx.tolist())
    heads = [
        net.buses[i].id
        for i in range(len(net.buses))
        if tree.parent[i] in slack
    ]
    return tuple(heads)


# ---------------------------------------------------------------------------
# scenario synthesis
# ---------------------------------------------------------------------------


def hour_of_week_shape() -> np.ndarray:
    """Template hour-of-week load shape, mean-normalized to 1.

    Weekdays carry a morning and an evening peak, weekends a broad midday
    bump.  Individual homes in :func:`gen_scenario` randomize the peak
    times, widths and weights around this template.
    """
    shape = np.empty(WEEK_HOURS)
    for h in range(WEEK_HOURS):
        day, hh = divmod(h, 24)
        if day < 5:
            s = (
                0.55
                + 0.30 * math.exp(-(((hh - 7.5) / 2.5) ** 2))
                + 0.50 * math.exp(-(((hh - 19.0) / 3.0) ** 2))
            )
        else:
            s = 0.62 + 0.40 * math.exp(-(((hh - 13.0) / 4.5) ** 2))
        shape[h] = s
    return shape / shape.mean()


def _home_shapes(rng: np.random.Generator, n_load: int) -> np.ndarray:
    """Per-home hour-of-week shapes, ``(WEEK_HOURS, n_load)``, each
    mean-normalized to 1.

    Homes consume mostly independently of one another: each home draws its
    own peak hours, widths and weights around the
    :func:`hour_of_week_shape` template.
    """
    hh = np.arange(24.0)[:, None]
    m1 = rng.uniform(6.0, 9.0, n_load)
    a1 = rng.uniform(0.10, 0.50, n_load)
    s1 = rng.uniform(1.8, 3.2, n_load)
    m2 = rng.uniform(17.5, 21.0, n_load)
    a2 = rng.uniform(0.30, 0.70, n_load)
    s2 = rng.uniform(2.2, 3.8, n_load)
    m3 = rng.uniform(10.5, 15.5, n_load)
    a3 = rng.uniform(0.20, 0.60, n_load)
    s3 = rng.uniform(3.5, 5.5, n_load)
    weekday = (
        0.55
        + a1 * np.exp(-(((hh - m1) / s1) ** 2))
        + a2 * np.exp(-(((hh - m2) / s2) ** 2))
    )
    weekend = 0.62 + a3 * np.exp(-(((hh - m3) / s3) ** 2))
    week = np.empty((WEEK_HOURS, n_load))
    for day in range(7):
        week[day * 24 : (day + 1) * 24] = weekday if day < 5 else weekend
    return week / week.mean(axis=0, keepdims=True)


def _ar1(rng, n, n_cols, tau_min, stationary_std):
    """Stationary AR(1) noise, one column per series, minute steps."""
    phi = math.exp(-1.0 / tau_min)
    innov = rng.standard_normal((n, n_cols)) * (stationary_std * math.sqrt(1 - phi * phi))
    init = rng.standard_normal(n_cols) * stationary_std
    out, _ = lfilter([1.0], [1.0, -phi], innov, axis=0, zi=(phi * init)[None, :])
    return out


def gen_scenario(
    net: FeederNetwork,
    days: int,
    pv_penetration: float,
    seed: int,
    *,
    sigma: float = 0.25,
    idio_tau_min: float = 45.0,
    load_base: float = 0.012,
    n_regions: int = 2,
    cloud_tau_min: float = 90.0,
    cloud_std: float = 0.35,
    phase_offset_std: float = 1e-3,
    phase_offset_tau_min: float = 180.0,
    events: Sequence[tuple[str, int, bool]] = (),
) -> ScenarioTruth:
    """Generate minute-resolution ground truth for ``net``.

    Loads follow per-home hour-of-week shapes (peak hours and weights
    randomized around a shared template, so homes consume near
    independently) scaled per home, with AR(1)-correlated lognormal minute
    noise (sigma in log space).  PV sites
    are placed at ceil(pv_penetration * n_load) buses; each site's output is
    capacity x region irradiance x site scale, where irradiance is a
    clear-sky half-sine arc damped by AR(1) cloud attenuation in [0, 1].
    """
    if days < 1:
        raise ValueError(f"days must be >= 1, got {days}")
    if not 0.0 <= pv_penetration <= 1.0:
        raise ValueError(f"pv_penetration must be in [0, 1], got {pv_penetration}")
    if n_regions < 1:
        raise ValueError("n_regions must be >= 1")
    rng = np.random.default_rng(seed)
    load_ids = net.load_bus_ids
    n_load = len(load_ids)
    n_min = days * DAY_MIN
    minutes = np.arange(n_min)

    shapes = _home_shapes(rng, n_load)
    how = (minutes // 60) % WEEK_HOURS
    shape_t = shapes[how, :]

    scale = load_base * np.exp(rng.normal(0.0, 0.35, n_load))
    scale = np.clip(scale, 0.3 * load_base, 3.0 * load_base)
    log_noise = _ar1(rng, n_min, n_load, idio_tau_min, sigma)
    noise_factor = np.exp(log_noise - 0.5 * sigma * sigma)
    loads_p = shape_t * scale[None, :] * noise_factor
    tan_phi = rng.uniform(0.25, 0.45, n_load)
    loads_q = loads_p * tan_phi[None, :]

    # proxy regions: contiguous chunks of the feeder's depth-first bus
    # order, so each region is a union of adjacent subtrees (clouds cover
    # neighborhoods, and laterals are neighborhoods)
    tree = _tree_structure(net, net.default_state())
    n_bus = len(net.buses)
    kids: list[list[int]] = [[] for _ in range(n_bus)]
    for i in range(n_bus):
        if tree.parent[i] >= 0:
            kids[tree.parent[i]].append(i)
    dfs_order: list[str] = []
    stack = sorted(np.flatnonzero(tree.parent == -1).tolist(), reverse=True)
    while stack:
        node = stack.pop()
        if net.buses[node].kind != "slack":
            dfs_order.append(net.buses[node].id)
        stack.extend(reversed(kids[node]))
    bounds = np.linspace(0, n_load, n_regions + 1).astype(int)
    region_of = {}
    for r in range(n_regions):
        for i in range(bounds[r], bounds[r + 1]):
            region_of[dfs_order[i]] = r

    # irradiance: clear-sky arc x cloud attenuation (common + regional AR(1))
    minute_of_day = minutes % DAY_MIN
    arc = np.sin(np.pi * (minute_of_day - 360) / 720.0)
    arc = np.where((minute_of_day >= 360) & (minute_of_day <= 1080), np.maximum(arc, 0.0), 0.0)
    g_common = _ar1(rng, n_min, 1, cloud_tau_min, cloud_std)[:, 0]
    g_own = _ar1(rng, n_min, n_regions, cloud_tau_min, cloud_std)
    g = 0.5 * g_common[:, None] + math.sqrt(1 - 0.25) * g_own
    attenuation = np.clip(1.0 - np.maximum(g, 0.0), 0.05, 1.0)
    irradiance = arc[:, None] * attenuation

    n_sites = math.ceil(pv_penetration * n_load)
    site_idx = np.sort(rng.choice(n_load, size=n_sites, replace=False)) if n_sites else np.array([], dtype=int)
    sites = []
    pv_gen = np.zeros((n_min, n_sites))
    for k, i in enumerate(site_idx):
        bus = load_ids[i]
        capacity = float(rng.uniform(1.2, 2.5) * scale[i])
        site_scale = float(rng.uniform(0.7, 1.0))
        region = region_of[bus]
        sites.append(PvSite(bus, capacity, site_scale, region))
        pv_gen[:, k] = capacity * site_scale * irradiance[:, region]

    phase_offsets = _ar1(rng, n_min, 3, phase_offset_tau_min, phase_offset_std)

    events = tuple((str(s), int(m), bool(c)) for s, m, c in events)
    switch_ids = {s.id for s in net.switches}
    for sw_id, minute, _ in events:
        if sw_id not in switch_ids:
            raise ValueError(f"event references unknown switch {sw_id!r}")
        if not 0 <= minute < n_min:
            raise ValueError(f"event minute {minute} outside horizon [0, {n_min})")

    for arr in (loads_p, loads_q, pv_gen, irradiance, phase_offsets):
        arr.flags.writeable = False
    return ScenarioTruth(
        bus_ids=load_ids,
        n_minutes=n_min,
        loads_p=loads_p,
        loads_q=loads_q,
        pv_sites=tuple(sites),
        pv_gen=pv_gen,
        irradiance=irradiance,
        phase_offsets=phase_offsets,
        region_of=region_of,
        events=events,
    )


# ---------------------------------------------------------------------------
# sensor emulation
# ---------------------------------------------------------------------------

_BUS_QUANTITIES = {"p", "q", "vm", "va"}
_LINE_QUANTITIES = {"flow_p", "flow_q"}
_REGION_QUANTITIES = {"irr"}
_UNITS = {
    "p": "pu", "q": "pu", "vm": "pu", "va": "rad",
    "flow_p": "pu", "flow_q": "pu", "irr": "unitless",
}


def default_fleet(
    net: FeederNetwork,
    n_regions: int = 2,
    *,
    include_angles: bool = False,
    ami_interval_s: int = 900,
    ami_noise: float = 0.005,
    ami_voltage_noise: float = 0.002,
    ami_dropout: float = 0.01,
    line_interval_s: int = 300,
) -> list[SensorSpec]:
    """Default sensor fleet: AMI everywhere, line sensors on switched and
    head lines, per-phase reference meters at the feeder heads, one proxy
    per irradiance region.

    Each AMI meter is emitted as two specs sharing one sensor id: the p/q
    channels at ``ami_noise`` and the voltage channels at the cleaner
    ``ami_voltage_noise`` (meters resolve voltage more finely relative to
    its narrow range than power).
    """
    fleet: list[SensorSpec] = []
    v_quantities = ("vm", "va") if include_angles else ("vm",)
    for bus in net.load_bus_ids:
        common = dict(
            kind="ami",
            target=bus,
            interval_s=ami_interval_s,
            latency_s=3600.0,
            jitter_s=1800.0,
            dropout=ami_dropout,
            id=f"ami_{bus}",
        )
        fleet.append(SensorSpec(quantities=("p", "q"), noise_rel=ami_noise, **common))
        fleet.append(
            SensorSpec(quantities=v_quantities, noise_rel=ami_voltage_noise, **common)
        )
    heads = head_buses(net)
    for bus in heads:
        fleet.append(
            SensorSpec(
                kind="reference",
                target=bus,
                quantities=("vm",),
                interval_s=ami_interval_s,
                latency_s=300.0,
                jitter_s=60.0,
                dropout=0.0,
                noise_rel=0.002,
            )
        )

    switched = {s.line for s in net.switches}
    head_lines = []
    for ln in net.lines:
        if ln.from_bus in ("sub",) or ln.to_bus in ("sub",):
            head_lines.append(ln.id)
    for line_id in sorted(switched | set(head_lines)):
        fleet.append(
            SensorSpec(
                kind="line",
                target=line_id,
                quantities=("flow_p",),
                interval_s=line_interval_s,
                latency_s=300.0,
                jitter_s=60.0,
                dropout=0.002,
                noise_rel=0.001,
            )
        )
    for region in range(n_regions):
        fleet.append(
            SensorSpec(
                kind="proxy",
                target=f"r{region}",
                quantities=("irr",),
                interval_s=line_interval_s,
                latency_s=60.0,
                jitter_s=30.0,
                dropout=0.0,
                noise_rel=0.01,
            )
        )
    return fleet


def _switch_timeline(net, events, n_min):
    """Piecewise-constant switch vector over the horizon."""
    w = list(net.default_state())
    sw_index = {s.id: k for k, s in enumerate(net.switches)}
    segments = []  # (start_minute, w tuple)
    current_start = 0
    for sw_id, minute, closed in sorted(events, key=lambda e: e[1]):
        if minute > current_start:
            segments.append((current_start, minute, tuple(w)))
            current_start = minute
        w[sw_index[sw_id]] = closed
    segments.append((current_start, n_min, tuple(w)))
    return segments


def _solve_minutes(net, truth, minutes):
    """Complex bus voltages for the requested truth minutes (batch solve)."""
    minutes = np.asarray(sorted(set(int(m) for m in minutes)))
    v = np.empty((len(minutes), len(net.buses)), dtype=complex)
    segments = _switch_timeline(net, truth.events, truth.n_minutes)
    pos = {m: i for i, m in enumerate(minutes)}
    for start, stop, w in segments:
        chunk = minutes[(minutes >= start) & (minutes < stop)]
        if len(chunk) == 0:
            continue
        s_inj = truth.net_injection(chunk)
        v_chunk, _, _ = solve_power_flow_batch(net, s_inj, w)
        for j, m in enumerate(chunk):
            v[pos[m]] = v_chunk[j]
    return minutes, v


def emulate_sensors(
    truth: ScenarioTruth,
    net: FeederNetwork,
    specs: Sequence[SensorSpec],
    seed: int,
) -> list[RawStream]:
    """Sample, degrade, and timestamp the truth through a sensor fleet.

    Returns one RawStream per (sensor, quantity).  Electrical quantities are
    read from batch power-flow solves at the sampled minutes; voltage
    magnitudes include the per-phase source offset of the bus's phase.
    """
    phase_of = {b.id: PHASES.index(b.phase) for b in net.buses}
    line_ids = {ln.id for ln in net.lines}
    for spec in specs:
        if spec.interval_s % MINUTE_S != 0 or spec.interval_s <= 0:
            raise ValueError(
                f"sensor {spec.sensor_id!r}: interval must be a positive "
                f"multiple of {MINUTE_S} s"
            )
        for qty in spec.quantities:
            if qty in _BUS_QUANTITIES:
                if spec.target not in phase_of:
                    raise ValueError(
                        f"sensor {spec.sensor_id!r} references unknown bus {spec.target!r}"
                    )
            elif qty in _LINE_QUANTITIES:
                if spec.target not in line_ids:
                    raise ValueError(
                        f"sensor {spec.sensor_id!r} references unknown line {spec.target!r}"
                    )
            elif qty in _REGION_QUANTITIES:
                if spec.target not in {f"r{k}" for k in range(truth.n_regions)}:
                    raise ValueError(
                        f"sensor {spec.sensor_id!r} references unknown region {spec.target!r}"
                    )
            else:
                raise ValueError(f"sensor {spec.sensor_id!r}: unknown quantity {qty!r}")

    # one solve batch for every minute any electrical channel samples
    electrical = _BUS_QUANTITIES - {"p", "q"} | _LINE_QUANTITIES
    solve_minutes: set[int] = set()
    for spec in specs:
        if any(q in electrical for q in spec.quantities):
            step = spec.interval_s // MINUTE_S
            solve_minutes.update(range(0, truth.n_minutes, step))
    v_minutes = v_bus = None
    if solve_minutes:
        v_minutes, v_bus = _solve_minutes(net, truth, solve_minutes)

    def electrical_lookup(minutes):
        idx = np.searchsorted(v_minutes, minutes)
        return v_bus[idx]

    pv_at_bus = {}
    for k, site in enumerate(truth.pv_sites):
        pv_at_bus.setdefault(site.bus_id, []).append(k)

    tree = _tree_structure(net, net.default_state())

    streams: list[RawStream] = []
    master = np.random.SeedSequence(seed)
    children = master.spawn(len(specs))
    for spec, child_seq in zip(specs, children):
        rng = np.random.default_rng(child_seq)
        step = spec.interval_s // MINUTE_S
        minutes = np.arange(0, truth.n_minutes, step)
        ts = minutes * MINUTE_S

        # degradation draws are made in a fixed order and do not depend on
        # the noise level, so raising noise_rel only rescales the same draw
        keep = rng.random(len(minutes)) >= spec.dropout
        latency = spec.latency_s + rng.uniform(-spec.jitter_s, spec.jitter_s, len(minutes))
        noise_draw = {
            qty: rng.standard_normal(len(minutes)) for qty in spec.quantities
        }

        for qty in spec.quantities:
            if qty == "p":
                col = truth.bus_ids.index(spec.target)
                signal = -truth.loads_p[minutes, col]
                for k in pv_at_bus.get(spec.target, ()):
                    signal = signal + truth.pv_gen[minutes, k]
            elif qty == "q":
                col = truth.bus_ids.index(spec.target)
                signal = -truth.loads_q[minutes, col]
            elif qty == "vm":
                v = electrical_lookup(minutes)
                bi = net.bus_index(spec.target)
                signal = np.abs(v[:, bi]) + truth.phase_offsets[minutes, phase_of[spec.target]]
            elif qty == "va":
                v = electrical_lookup(minutes)
                signal = np.angle(v[:, net.bus_index(spec.target)])
            elif qty in ("flow_p", "flow_q"):
                ln = net.line(spec.target)
                li = net.line_index(spec.target)
                a, b = net.bus_index(ln.from_bus), net.bus_index(ln.to_bus)
                v = electrical_lookup(minutes)
                if not tree.closed_mask[li]:
                    flow = np.zeros(len(minutes), dtype=complex)
                else:
                    if tree.parent[b] == a:
                        src, dst = a, b
                    else:
                        src, dst = b, a
                    current = (v[:, src] - v[:, dst]) / ln.z
                    flow = v[:, src] * np.conj(current)
                signal = flow.real if qty == "flow_p" else flow.imag
            else:  # irr
                region = int(spec.target[1:])
                signal = truth.irradiance[minutes, region]

            noise_std = float(spec.noise_rel * np.std(signal))
            values = signal + noise_std * noise_draw[qty]
            streams.append(
                RawStream(
                    id=f"{spec.sensor_id}.{qty}",
                    quantity=qty,
                    units=_UNITS[qty],
                    ts_meas=ts[keep].astype(np.int64),
                    ts_arrival=(ts + np.maximum(latency, 0.0))[keep],
                    values=values[keep],
                    noise_std=noise_std,
                    latency_max=spec.latency_max,
                    interval_s=spec.interval_s,
                )
            )
    return streams


# ---------------------------------------------------------------------------
# meter-record corruption
# ---------------------------------------------------------------------------


def corrupt_records(
    net: FeederNetwork,
    phase_error_rate: float,
    parent_error_rate: float,
    seed: int,
) -> tuple[list[GisRecord], list[GisCorruption]]:
    """Corrupt the meter-record table (phase labels, parent pointers).

    Exactly ``round(rate * n_records)`` records are corrupted per field,
    sampled without replacement.  Returns the corrupted table plus a truth
    log of every change.
    """
    for name, rate in (("phase_error_rate", phase_error_rate),
                       ("parent_error_rate", parent_error_rate)):
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    tree = _tree_structure(net, net.default_state())
    records = {}
    for bus in net.load_bus_ids:
        i = net.bus_index(bus)
        records[bus] = GisRecord(
            bus_id=bus,
            phase=net.buses[i].phase,
            parent=net.buses[tree.parent[i]].id,
        )
    order = list(net.load_bus_ids)
    n = len(order)
    log: list[GisCorruption] = []

    n_phase = int(round(phase_error_rate * n))
    for i in rng.choice(n, size=n_phase, replace=False):
        bus = order[i]
        true_phase = records[bus].phase
        wrong = [p for p in PHASES if p != true_phase]
        new_phase = wrong[int(rng.integers(len(wrong)))]
        records[bus] = GisRecord(bus, new_phase, records[bus].parent)
        log.append(GisCorruption(bus, "phase", true_phase, new_phase))

    all_ids = list(net.bus_ids)
    n_parent = int(round(parent_error_rate * n))
    for i in rng.choice(n, size=n_parent, replace=False):
        bus = order[i]
        true_parent = records[bus].parent
        candidates = [b for b in all_ids if b not in (bus, true_parent)]
        new_parent = candidates[int(rng.integers(len(candidates)))]
        records[bus] = GisRecord(bus, records[bus].phase, new_parent)
        log.append(GisCorruption(bus, "parent", true_parent, new_parent))

    return [records[b] for b in order], log
