"""Radial distribution feeder model and power-flow primitives.

Single-phase equivalent of a multi-feeder radial network in per-unit.
Constant-power injections, series-impedance lines, switches that open or
close individual lines.  The workhorse solver is a backward/forward sweep
over the tree; everything here is pure and deterministic so results can be
cached and replayed.
"""

from __future__ import annotations

import functools
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Optional

import numpy as np

PHASES = ("A", "B", "C")

__all__ = [
    "PHASES",
    "Bus",
    "Line",
    "Switch",
    "FeederNetwork",
    "InjectionVector",
    "SystemState",
    "AdmittanceModel",
    "Violation",
    "ViolationReport",
    "NetworkValidationError",
    "PowerFlowError",
    "build_network",
    "network_to_dict",
    "make_injection",
    "solve_power_flow",
    "solve_power_flow_batch",
    "build_admittance",
    "line_flows",
    "check_limits",
]


class NetworkValidationError(ValueError):
    """Raised when a network description violates the schema or radiality."""


class PowerFlowError(RuntimeError):
    """Raised when the sweep cannot produce a valid converged state."""


@dataclass(frozen=True)
class Bus:
    id: str
    phase: str  # "A" | "B" | "C"
    kind: str  # "slack" | "load"
    vset: float = 1.0  # setpoint, used when kind == "slack"


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    limit: float  # thermal limit on apparent power, p.u.

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class Switch:
    id: str
    line: str
    closed: bool  # default (normal) state


@dataclass(frozen=True)
class FeederNetwork:
    """Immutable feeder description.

    Buses, lines and switches keep their construction order; switch vectors
    passed to the solver follow ``switches`` order.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    switches: tuple[Switch, ...]
    base_kva: float = 1000.0
    base_kv: float = 12.47

    # -- id lookups ---------------------------------------------------------
    def bus_index(self, bus_id: str) -> int:
        return _bus_index_map(self)[bus_id]

    def line_index(self, line_id: str) -> int:
        return _line_index_map(self)[line_id]

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.bus_index(bus_id)]

    def line(self, line_id: str) -> Line:
        return self.lines[self.line_index(line_id)]

    @property
    def bus_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses)

    @property
    def slack_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses if b.kind == "slack")

    @property
    def load_bus_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses if b.kind == "load")

    def default_state(self) -> tuple[bool, ...]:
        """Switch vector of the normal (as-built) configuration."""
        return tuple(s.closed for s in self.switches)

    def closed_line_mask(self, w: Optional[tuple[bool, ...]] = None) -> np.ndarray:
        """Boolean mask over ``lines``: line in service under switch vector w."""
        if w is None:
            w = self.default_state()
        if len(w) != len(self.switches):
            raise NetworkValidationError(
                f"switch vector has {len(w)} entries, network has "
                f"{len(self.switches)} switches"
            )
        mask = np.ones(len(self.lines), dtype=bool)
        for sw, state in zip(self.switches, w):
            if not state:
                mask[self.line_index(sw.line)] = False
        return mask


@dataclass(frozen=True)
class InjectionVector:
    """Net complex power injection per load bus (consumption negative)."""

    bus_ids: tuple[str, ...]
    p: np.ndarray
    q: np.ndarray
    timestamp: int = 0

    @property
    def s(self) -> np.ndarray:
        return self.p + 1j * self.q


@dataclass(frozen=True)
class SystemState:
    """Converged solver output: voltages over all buses plus slack injection."""

    bus_ids: tuple[str, ...]
    vm: np.ndarray
    va: np.ndarray
    w: tuple[bool, ...]
    slack_p: float
    slack_q: float
    iterations: int
    timestamp: int = 0

    @property
    def v(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def voltage(self, bus_id: str) -> complex:
        i = self.bus_ids.index(bus_id)
        return complex(self.v[i])


@dataclass(frozen=True)
class AdmittanceModel:
    """Per-line series admittance under a switch vector (open lines -> 0)."""

    line_ids: tuple[str, ...]
    y: np.ndarray
    w: tuple[bool, ...]


@dataclass(frozen=True)
class Violation:
    element_id: str
    kind: str  # "undervoltage" | "overvoltage" | "thermal"
    magnitude: float
    timestamp: int


@dataclass(frozen=True)
class ViolationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)


# ---------------------------------------------------------------------------
# construction / validation
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _bus_index_map(net: FeederNetwork) -> dict:
    return {b.id: i for i, b in enumerate(net.buses)}


@functools.lru_cache(maxsize=64)
def _line_index_map(net: FeederNetwork) -> dict:
    return {ln.id: i for i, ln in enumerate(net.lines)}


def build_network(spec: Mapping) -> FeederNetwork:
    """Build and validate a FeederNetwork from a plain dict description.

    See docs/network_schema.md for the schema.  Raises
    NetworkValidationError on duplicate ids, dangling references, negative
    impedances, or a non-radial default configuration.
    """
    try:
        bus_specs = list(spec["buses"])
        line_specs = list(spec["lines"])
    except KeyError as exc:
        raise NetworkValidationError(f"missing required section {exc}") from exc
    switch_specs = list(spec.get("switches", ()))
    bases = spec.get("bases", {})

    buses = []
    for b in bus_specs:
        kind = b.get("kind", "load")
        if kind not in ("slack", "load"):
            raise NetworkValidationError(f"bus {b['id']!r}: unknown kind {kind!r}")
        phase = b.get("phase", "A")
        if phase not in PHASES:
            raise NetworkValidationError(f"bus {b['id']!r}: unknown phase {phase!r}")
        buses.append(Bus(str(b["id"]), phase, kind, float(b.get("vset", 1.0))))

    seen: set[str] = set()
    for b in buses:
        if b.id in seen:
            raise NetworkValidationError(f"duplicate bus id {b.id!r}")
        seen.add(b.id)
    bus_ids = seen

    lines = []
    seen = set()
    for ln in line_specs:
        lid = str(ln["id"])
        if lid in seen:
            raise NetworkValidationError(f"duplicate line id {lid!r}")
        seen.add(lid)
        frm, to = str(ln["from"]), str(ln["to"])
        for end in (frm, to):
            if end not in bus_ids:
                raise NetworkValidationError(f"line {lid!r} references unknown bus {end!r}")
        if frm == to:
            raise NetworkValidationError(f"line {lid!r} connects bus {frm!r} to itself")
        r, x = float(ln["r"]), float(ln["x"])
        if r < 0:
            raise NetworkValidationError(f"line {lid!r}: negative resistance {r}")
        if x < 0:
            raise NetworkValidationError(f"line {lid!r}: negative reactance {x}")
        if r == 0 and x == 0:
            raise NetworkValidationError(f"line {lid!r}: zero impedance")
        lines.append(Line(lid, frm, to, r, x, float(ln.get("limit", 2.0))))
    line_ids = seen

    switches = []
    seen = set()
    for sw in switch_specs:
        sid = str(sw["id"])
        if sid in seen:
            raise NetworkValidationError(f"duplicate switch id {sid!r}")
        seen.add(sid)
        target = str(sw["line"])
        if target not in line_ids:
            raise NetworkValidationError(f"switch {sid!r} references unknown line {target!r}")
        switches.append(Switch(sid, target, bool(sw["closed"])))

    net = FeederNetwork(
        buses=tuple(buses),
        lines=tuple(lines),
        switches=tuple(switches),
        base_kva=float(bases.get("s_kva", 1000.0)),
        base_kv=float(bases.get("v_kv", 12.47)),
    )
    if not net.slack_ids:
        raise NetworkValidationError("network has no slack bus")
    # Radiality of the default configuration is part of the construction
    # contract: fail fast here rather than at first solve.
    _tree_structure(net, net.default_state())
    return net


def network_to_dict(net: FeederNetwork) -> dict:
    """Inverse of build_network, suitable for JSON round-trips."""
    return {
        "bases": {"s_kva": net.base_kva, "v_kv": net.base_kv},
        "buses": [
            {"id": b.id, "phase": b.phase, "kind": b.kind, "vset": b.vset}
            for b in net.buses
        ],
        "lines": [
            {"id": ln.id, "from": ln.from_bus, "to": ln.to_bus,
             "r": ln.r, "x": ln.x, "limit": ln.limit}
            for ln in net.lines
        ],
        "switches": [
            {"id": s.id, "line": s.line, "closed": s.closed} for s in net.switches
        ],
    }


def make_injection(
    net: FeederNetwork,
    p: Mapping[str, float] | np.ndarray,
    q: Mapping[str, float] | np.ndarray,
    timestamp: int = 0,
) -> InjectionVector:
    """Assemble an InjectionVector in canonical load-bus order.

    Mappings may omit buses (treated as zero); arrays must already be in
    ``net.load_bus_ids`` order.  Slack buses are rejected.
    """
    load_ids = net.load_bus_ids
    if isinstance(p, Mapping) or isinstance(q, Mapping):
        slack = set(net.slack_ids)
        known = set(load_ids)
        for mapping in (p, q):
            if isinstance(mapping, Mapping):
                for bus_id in mapping:
                    if bus_id in slack:
                        raise NetworkValidationError(
                            f"injection specified at slack bus {bus_id!r}"
                        )
                    if bus_id not in known:
                        raise NetworkValidationError(f"injection at unknown bus {bus_id!r}")
        p_arr = np.array([p.get(b, 0.0) if isinstance(p, Mapping) else 0.0 for b in load_ids])
        q_arr = np.array([q.get(b, 0.0) if isinstance(q, Mapping) else 0.0 for b in load_ids])
        if not isinstance(p, Mapping):
            p_arr = np.asarray(p, dtype=float)
        if not isinstance(q, Mapping):
            q_arr = np.asarray(q, dtype=float)
    else:
        p_arr = np.asarray(p, dtype=float)
        q_arr = np.asarray(q, dtype=float)
    if p_arr.shape != (len(load_ids),) or q_arr.shape != (len(load_ids),):
        raise NetworkValidationError(
            f"injection arrays must have one entry per load bus "
            f"({len(load_ids)}), got {p_arr.shape} / {q_arr.shape}"
        )
    p_arr = p_arr.copy()
    q_arr = q_arr.copy()
    p_arr.flags.writeable = False
    q_arr.flags.writeable = False
    return InjectionVector(load_ids, p_arr, q_arr, timestamp)


# ---------------------------------------------------------------------------
# topology analysis
# ---------------------------------------------------------------------------


class _Tree:
    """Rooted forest of the closed-line graph (roots = slack buses)."""

    __slots__ = (
        "parent", "parent_line", "depth", "levels", "z_parent",
        "closed_mask", "root_of", "v_init", "slack_idx",
    )

    def __init__(self, parent, parent_line, depth, levels, z_parent,
                 closed_mask, root_of, v_init, slack_idx):
        self.parent = parent
        self.parent_line = parent_line
        self.depth = depth
        self.levels = levels
        self.z_parent = z_parent
        self.closed_mask = closed_mask
        self.root_of = root_of
        self.v_init = v_init
        self.slack_idx = slack_idx


@functools.lru_cache(maxsize=256)
def _tree_structure(net: FeederNetwork, w: tuple[bool, ...]) -> _Tree:
    """Orient the closed-line graph from the slack buses; validate radiality.

    Raises NetworkValidationError if any load bus lacks exactly one path to
    exactly one slack bus under ``w``.
    """
    n = len(net.buses)
    closed = net.closed_line_mask(w)
    adjacency: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for li, ln in enumerate(net.lines):
        if not closed[li]:
            continue
        a, b = net.bus_index(ln.from_bus), net.bus_index(ln.to_bus)
        adjacency[a].append((b, li))
        adjacency[b].append((a, li))

    parent = np.full(n, -1, dtype=np.int64)
    parent_line = np.full(n, -1, dtype=np.int64)
    depth = np.full(n, -1, dtype=np.int64)
    root_of = np.full(n, -1, dtype=np.int64)
    slack_idx = np.array([i for i, b in enumerate(net.buses) if b.kind == "slack"])

    frontier = list(slack_idx)
    for s in slack_idx:
        depth[s] = 0
        root_of[s] = s
    tree_lines = 0
    while frontier:
        nxt = []
        for u in frontier:
            for v, li in adjacency[u]:
                if depth[v] == -1:
                    depth[v] = depth[u] + 1
                    parent[v] = u
                    parent_line[v] = li
                    root_of[v] = root_of[u]
                    tree_lines += 1
                    nxt.append(v)
                elif parent[u] != v and parent[v] != u:
                    raise NetworkValidationError(
                        f"network is not radial under the given switch state: "
                        f"line {net.lines[li].id!r} closes a loop"
                    )
        frontier = nxt

    unreached = [net.buses[i].id for i in range(n) if depth[i] == -1]
    if unreached:
        raise NetworkValidationError(
            f"buses de-energized under the given switch state: {unreached}"
        )
    if tree_lines != int(closed.sum()):
        # A closed line both of whose endpoints were discovered through other
        # lines: loop between two slack roots or inside one component.
        raise NetworkValidationError(
            "network is not radial under the given switch state: "
            "closed lines exceed spanning-tree edge count"
        )

    max_depth = int(depth.max())
    levels = [np.flatnonzero(depth == d) for d in range(1, max_depth + 1)]
    z_parent = np.zeros(n, dtype=complex)
    for i in range(n):
        if parent_line[i] >= 0:
            z_parent[i] = net.lines[parent_line[i]].z
    vset = np.array([b.vset for b in net.buses])
    v_init = vset[root_of]
    return _Tree(parent, parent_line, depth, levels, z_parent, closed,
                 root_of, v_init, slack_idx)


# ---------------------------------------------------------------------------
# power flow
# ---------------------------------------------------------------------------


def solve_power_flow_batch(
    net: FeederNetwork,
    s_load: np.ndarray,
    w: Optional[tuple[bool, ...]] = None,
    *,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Sweep solve for a batch of injection vectors.

    Parameters
    ----------
    s_load : complex array, shape (T, n_load)
        Net complex injections per load bus (consumption negative), in
        ``net.load_bus_ids`` order.

    Returns
    -------
    (v, s_slack, iterations): complex bus voltages with shape (T, n_bus),
    complex slack injection per sample with shape (T, n_slack), and the
    iteration count at convergence.
    """
    if w is None:
        w = net.default_state()
    tree = _tree_structure(net, tuple(w))
    n = len(net.buses)
    s_load = np.asarray(s_load, dtype=complex)
    if s_load.ndim != 2 or s_load.shape[1] != len(net.load_bus_ids):
        raise NetworkValidationError(
            f"injection batch must have shape (T, {len(net.load_bus_ids)})"
        )
    t_count = s_load.shape[0]
    load_idx = np.array([net.bus_index(b) for b in net.load_bus_ids], dtype=np.int64)

    s_full = np.zeros((t_count, n), dtype=complex)
    s_full[:, load_idx] = s_load

    v = np.broadcast_to(tree.v_init.astype(complex), (t_count, n)).copy()
    last_change = np.inf
    # Divergence shows up as non-finite voltages; it is detected and raised
    # below, so the intermediate numpy warnings carry no information.
    with np.errstate(divide="ignore", invalid="ignore"):
        for iteration in range(1, max_iter + 1):
            # Backward: accumulate drawn currents from the leaves to the roots.
            draw = np.conj(-s_full / v)
            acc = draw.copy()
            for level in reversed(tree.levels):
                np.add.at(acc, (slice(None), tree.parent[level]), acc[:, level])
            # Forward: push voltage drops from the roots toward the leaves.
            v_new = v.copy()
            v_new[:, tree.slack_idx] = tree.v_init[tree.slack_idx]
            for level in tree.levels:
                v_new[:, level] = (
                    v_new[:, tree.parent[level]] - tree.z_parent[level] * acc[:, level]
                )
            last_change = float(np.max(np.abs(v_new - v))) if v.size else 0.0
            v = v_new
            if not np.isfinite(last_change):
                raise PowerFlowError(
                    f"sweep diverged after {iteration} iterations "
                    f"(non-finite voltages)"
                )
            if last_change < tol:
                break
        else:
            raise PowerFlowError(
                f"sweep did not converge in {max_iter} iterations "
                f"(last voltage change {last_change:.3e} p.u.)"
            )

    # Slack injection: power flowing from each root into its children.
    draw = np.conj(-s_full / v)
    acc = draw.copy()
    for level in reversed(tree.levels):
        np.add.at(acc, (slice(None), tree.parent[level]), acc[:, level])
    s_slack = np.zeros((t_count, len(tree.slack_idx)), dtype=complex)
    for k, root in enumerate(tree.slack_idx):
        child_mask = tree.parent == root
        if child_mask.any():
            children = np.flatnonzero(child_mask)
            s_slack[:, k] = v[:, root] * np.conj(acc[:, children].sum(axis=1))
    return v, s_slack, iteration


def solve_power_flow(
    net: FeederNetwork,
    inj: InjectionVector,
    w: Optional[tuple[bool, ...]] = None,
    *,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> SystemState:
    """Solve one snapshot with the backward/forward sweep.

    Requires the network to be radial and fully energized under ``w``.
    Raises PowerFlowError on non-convergence within ``max_iter`` iterations.
    """
    if tuple(inj.bus_ids) != net.load_bus_ids:
        raise NetworkValidationError(
            "injection vector bus ids do not match the network's load buses"
        )
    if w is None:
        w = net.default_state()
    v, s_slack, iterations = solve_power_flow_batch(
        net, inj.s[None, :], w, tol=tol, max_iter=max_iter
    )
    vm = np.abs(v[0])
    va = np.angle(v[0])
    vm.flags.writeable = False
    va.flags.writeable = False
    slack_total = s_slack[0].sum()
    return SystemState(
        bus_ids=net.bus_ids,
        vm=vm,
        va=va,
        w=tuple(w),
        slack_p=float(slack_total.real),
        slack_q=float(slack_total.imag),
        iterations=iterations,
        timestamp=inj.timestamp,
    )


def build_admittance(
    net: FeederNetwork, w: Optional[tuple[bool, ...]] = None
) -> AdmittanceModel:
    """Series admittance per line under ``w``; open lines get y = 0."""
    if w is None:
        w = net.default_state()
    mask = net.closed_line_mask(tuple(w))
    y = np.zeros(len(net.lines), dtype=complex)
    for i, ln in enumerate(net.lines):
        if mask[i]:
            y[i] = 1.0 / ln.z
    y.flags.writeable = False
    return AdmittanceModel(tuple(ln.id for ln in net.lines), y, tuple(w))


def line_flows(net: FeederNetwork, state: SystemState) -> dict[str, complex]:
    """Sending-end complex power flow per line; open lines report zero.

    The sending end is the slack-side endpoint under the state's switch
    vector.
    """
    tree = _tree_structure(net, state.w)
    v = state.v
    flows: dict[str, complex] = {}
    for li, ln in enumerate(net.lines):
        if not tree.closed_mask[li]:
            flows[ln.id] = 0j
            continue
        a, b = net.bus_index(ln.from_bus), net.bus_index(ln.to_bus)
        # orient: parent side sends
        if tree.parent[b] == a:
            src, dst = a, b
        else:
            src, dst = b, a
        current = (v[src] - v[dst]) / ln.z
        flows[ln.id] = complex(v[src] * np.conj(current))
    return flows


def check_limits(
    net: FeederNetwork,
    state: SystemState,
    vmin: float = 0.95,
    vmax: float = 1.05,
) -> ViolationReport:
    """Compare a solved state against voltage and thermal limits."""
    if vmin >= vmax:
        raise ValueError(f"vmin ({vmin}) must be < vmax ({vmax})")
    violations: list[Violation] = []
    for bus_id, vm in zip(state.bus_ids, state.vm):
        if vm < vmin:
            violations.append(
                Violation(bus_id, "undervoltage", float(vmin - vm), state.timestamp)
            )
        elif vm > vmax:
            violations.append(
                Violation(bus_id, "overvoltage", float(vm - vmax), state.timestamp)
            )
    for line_id, s in line_flows(net, state).items():
        limit = net.line(line_id).limit
        mag = abs(s)
        if mag > limit:
            violations.append(
                Violation(line_id, "thermal", float(mag - limit), state.timestamp)
            )
    return ViolationReport(tuple(violations))
