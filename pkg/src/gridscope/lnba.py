"""PV hosting capacity and interconnection-site ranking.

Scores each candidate bus by the largest PV capacity that keeps every
evaluation tick inside voltage and thermal limits, then ranks sites by
that score.  Feasibility is checked by one of two engines: the physics
engine runs the sweep power flow and ``check_limits`` per tick; the
regression engine uses a fitted inverse voltage model plus lossless
downstream line loadings (a voltage-only model cannot produce flows).

The capacity search is a binary search over a fixed grid — valid when
feasibility is monotone in capacity, which holds for voltage-rise-limited
PV in the usual regimes.  ``verify_grid`` cross-checks monotonicity by
exhaustive scan and attaches a warning instead of assuming it.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .ddpf import DdpfModel, predict_voltages
from .grid_model import (
    FeederNetwork,
    NetworkValidationError,
    PowerFlowError,
    _tree_structure,
    check_limits,
    make_injection,
    solve_power_flow,
)
from .synth import ScenarioTruth

ENGINES = ("physics", "ddpf")
BINDINGS = ("overvoltage", "thermal", "none-at-upper-bound")
MINUTE_S = 60

__all__ = [
    "ENGINES",
    "ScenarioSpec",
    "SiteAssessment",
    "SiteRanking",
    "solar_noon_ticks",
    "evaluation_ticks",
    "hosting_capacity",
    "rank_sites",
]


def solar_noon_ticks(truth: ScenarioTruth) -> tuple[int, ...]:
    """Minute index of peak total irradiance for each scenario day.

    The worst case for PV-driven voltage rise is maximum generation, so
    one tick per day at the irradiance peak covers the binding condition
    without sweeping the full horizon.
    """
    total = truth.irradiance.sum(axis=1)
    days = truth.n_minutes // 1440
    if days == 0:
        return (int(np.argmax(total)),)
    return tuple(
        d * 1440 + int(np.argmax(total[d * 1440 : (d + 1) * 1440]))
        for d in range(days)
    )


def evaluation_ticks(truth: ScenarioTruth, *, full_sweep: bool = False) -> tuple[int, ...]:
    """Default evaluation slice: daily irradiance peaks, or every minute."""
    if full_sweep:
        return tuple(range(truth.n_minutes))
    return solar_noon_ticks(truth)


@dataclass(frozen=True)
class ScenarioSpec:
    """A what-if study: base scenario, candidate buses, limits, search grid."""

    net: FeederNetwork
    truth: ScenarioTruth
    candidates: tuple[str, ...]
    ticks: tuple[int, ...]
    vmin: float = 0.95
    vmax: float = 1.05
    c_max: float = 1.0  # upper capacity search bound, p.u.
    resolution: float = 0.01  # capacity grid step, p.u.
    engine: str = "physics"
    ddpf_model: Optional[DdpfModel] = None
    verify_grid: bool = False

    def __post_init__(self):
        if tuple(self.truth.bus_ids) != self.net.load_bus_ids:
            raise ValueError("scenario truth buses do not match the network's load buses")
        loads = set(self.net.load_bus_ids)
        for bus in self.candidates:
            if bus not in loads:
                raise ValueError(f"candidate {bus!r} is not a load bus")
        if not self.ticks:
            raise ValueError("at least one evaluation tick required")
        for t in self.ticks:
            if not 0 <= t < self.truth.n_minutes:
                raise ValueError(
                    f"tick {t} outside the scenario horizon [0, {self.truth.n_minutes})"
                )
        if self.vmin >= self.vmax:
            raise ValueError(f"vmin ({self.vmin}) must be < vmax ({self.vmax})")
        if not self.resolution > 0:
            raise ValueError("capacity resolution must be > 0")
        if self.c_max < self.resolution:
            raise ValueError("capacity upper bound must be at least one resolution step")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.engine == "ddpf":
            model = self.ddpf_model
            if model is None:
                raise ValueError("ddpf engine requires a fitted model")
            if model.direction != "inverse":
                raise ValueError("ddpf engine requires an inverse-direction model")
            if model.n_features_raw != 2 * len(self.net.load_bus_ids):
                raise ValueError(
                    "ddpf model feature width does not match the network's load buses"
                )
            known = set(self.net.bus_ids)
            for tid in model.target_ids:
                if tid not in known:
                    raise ValueError(f"ddpf model predicts unknown bus {tid!r}")

    @property
    def capacity_grid(self) -> np.ndarray:
        """Grid of candidate capacities 0, r, 2r, … up to c_max."""
        steps = int(math.floor(self.c_max / self.resolution + 1e-9))
        return np.arange(steps + 1) * self.resolution


@dataclass(frozen=True)
class SiteAssessment:
    """Hosting-capacity verdict for one candidate bus."""

    bus_id: str
    capacity: float  # p.u.; largest feasible capacity on the search grid
    binding: str  # what fails one step above capacity
    binding_tick: int  # minute index of the binding (or worst-voltage) tick
    worst_voltage: float  # max |V| at that tick
    warnings: tuple[str, ...] = ()
    error: Optional[str] = None

    def __post_init__(self):
        if self.error is not None:
            if self.binding != "error":
                raise ValueError("failed assessments must carry binding='error'")
            return
        if self.binding not in BINDINGS:
            raise ValueError(f"unknown binding constraint {self.binding!r}")
        if not (self.capacity >= 0.0 and math.isfinite(self.capacity)):
            raise ValueError("capacity must be finite and nonnegative")


@dataclass(frozen=True)
class SiteRanking:
    """Ordered site assessments plus the provenance of the run."""

    assessments: tuple[SiteAssessment, ...]
    engine: str
    artifacts: Mapping[str, str] = field(default_factory=dict)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("bus,capacity_pu,binding,engine\n")
        for a in self.assessments:
            out.write(f"{a.bus_id},{float(a.capacity)!r},{a.binding},{self.engine}\n")
        return out.getvalue()

    def to_dict(self) -> dict:
        return {
            "engine": self.engine,
            "artifacts": dict(self.artifacts),
            "sites": [
                {
                    "bus": a.bus_id,
                    "capacity_pu": float(a.capacity),
                    "binding": a.binding,
                    "binding_tick": int(a.binding_tick),
                    "worst_voltage": float(a.worst_voltage),
                    "warnings": list(a.warnings),
                    "error": a.error,
                }
                for a in self.assessments
            ],
        }


class _Feasibility(NamedTuple):
    ok: bool
    tick: int  # first violating tick, or the worst-voltage tick when ok
    kinds: tuple[str, ...]  # violation kinds at that tick
    worst_vm: float  # max |V| at that tick


def _eval_physics(spec: ScenarioSpec, bus_j: int, shape: np.ndarray,
                  s_base: np.ndarray, c: float) -> _Feasibility:
    worst_vm, worst_tick = -np.inf, spec.ticks[0]
    for i, tick in enumerate(spec.ticks):
        p = s_base[i].real.copy()
        p[bus_j] += c * shape[i]
        inj = make_injection(spec.net, p, s_base[i].imag,
                             timestamp=spec.truth.start_s + tick * MINUTE_S)
        state = solve_power_flow(spec.net, inj)
        vm_max = float(state.vm.max())
        report = check_limits(spec.net, state, spec.vmin, spec.vmax)
        if not report.ok:
            kinds = tuple(sorted({v.kind for v in report.violations}))
            return _Feasibility(False, tick, kinds, vm_max)
        if vm_max > worst_vm:
            worst_vm, worst_tick = vm_max, tick
    return _Feasibility(True, worst_tick, (), worst_vm)


def _eval_ddpf(spec: ScenarioSpec, bus_j: int, shape: np.ndarray,
               s_base: np.ndarray, c: float) -> _Feasibility:
    net, model = spec.net, spec.ddpf_model
    P = s_base.real.copy()
    P[:, bus_j] += c * shape
    Q = s_base.imag
    vm = predict_voltages(model, np.hstack([P, Q]))

    # Lossless downstream sums give line loadings a voltage-only model
    # cannot: the apparent power into each subtree is the flow on the line
    # feeding it.
    tree = _tree_structure(net, net.default_state())
    acc = np.zeros((len(spec.ticks), len(net.bus_ids)), dtype=complex)
    load_idx = [net.bus_index(b) for b in net.load_bus_ids]
    acc[:, load_idx] = P + 1j * Q
    for level in reversed(tree.levels):
        for i in level:
            acc[:, tree.parent[i]] += acc[:, i]
    line_load = {}
    for i in range(len(net.bus_ids)):
        li = tree.parent_line[i]
        if li >= 0:
            line_load[li] = np.abs(acc[:, i])

    worst_vm, worst_tick = -np.inf, spec.ticks[0]
    for t, tick in enumerate(spec.ticks):
        kinds = set()
        if np.any(vm[t] > spec.vmax):
            kinds.add("overvoltage")
        if np.any(vm[t] < spec.vmin):
            kinds.add("undervoltage")
        for li, mags in line_load.items():
            if mags[t] > net.lines[li].limit:
                kinds.add("thermal")
                break
        vm_max = float(vm[t].max())
        if kinds:
            return _Feasibility(False, tick, tuple(sorted(kinds)), vm_max)
        if vm_max > worst_vm:
            worst_vm, worst_tick = vm_max, tick
    return _Feasibility(True, worst_tick, (), worst_vm)


_EVALS: dict[str, Callable[..., _Feasibility]] = {
    "physics": _eval_physics,
    "ddpf": _eval_ddpf,
}


def _binding_from(kinds: Sequence[str]) -> str:
    if "overvoltage" in kinds or "undervoltage" in kinds:
        return "overvoltage"
    return "thermal"


def hosting_capacity(spec: ScenarioSpec, bus: str) -> SiteAssessment:
    """Largest PV capacity at ``bus`` that passes limits at every tick.

    Binary search over the capacity grid; added PV injects real power
    ``c * irradiance`` (unity power factor) on top of the base scenario.
    Raises ValueError if the base case (c = 0) already violates limits.
    """
    if bus not in spec.net.load_bus_ids:
        raise ValueError(f"candidate {bus!r} is not a load bus")
    if bus not in spec.truth.region_of:
        raise ValueError(f"no irradiance region mapped to bus {bus!r}")
    ticks = np.asarray(spec.ticks)
    s_base = spec.truth.net_injection(ticks)
    shape = spec.truth.irradiance[ticks, spec.truth.region_of[bus]]
    bus_j = spec.truth.bus_ids.index(bus)
    grid = spec.capacity_grid
    evaluate = _EVALS[spec.engine]

    results: dict[int, _Feasibility] = {}

    def at(k: int) -> _Feasibility:
        if k not in results:
            results[k] = evaluate(spec, bus_j, shape, s_base, float(grid[k]))
        return results[k]

    base = at(0)
    if not base.ok:
        raise ValueError(
            f"base case violates limits at minute {base.tick} with no added PV: "
            f"{', '.join(base.kinds)}"
        )

    top = len(grid) - 1
    warnings: tuple[str, ...] = ()
    if at(top).ok:
        capacity, binding, ref = float(grid[top]), "none-at-upper-bound", at(top)
    else:
        lo, hi = 0, top
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if at(mid).ok:
                lo = mid
            else:
                hi = mid
        capacity, binding, ref = float(grid[lo]), _binding_from(at(hi).kinds), at(hi)

    if spec.verify_grid:
        feasible = [at(k).ok for k in range(len(grid))]
        first_bad = feasible.index(False) if False in feasible else len(grid)
        refeasible = [k for k in range(first_bad, len(grid)) if feasible[k]]
        if refeasible:
            warnings = (
                "feasibility is not monotone on the capacity grid "
                f"(feasible again at steps {refeasible})",
            )

    return SiteAssessment(
        bus_id=bus,
        capacity=capacity,
        binding=binding,
        binding_tick=ref.tick,
        worst_voltage=ref.worst_vm,
        warnings=warnings,
    )


def rank_sites(
    spec: ScenarioSpec,
    *,
    artifacts: Optional[Mapping[str, str]] = None,
    benefit: Optional[Callable[[SiteAssessment], float]] = None,
) -> SiteRanking:
    """Assess every candidate and rank descending by hosting capacity.

    ``benefit`` is a scoring hook over assessments (default: the hosting
    capacity itself); ties break by bus id.  Per-site failures become
    error entries at the bottom of the ranking instead of aborting it.
    """
    if not spec.candidates:
        raise ValueError("at least one candidate bus required")
    score = benefit if benefit is not None else (lambda a: a.capacity)
    scored: list[SiteAssessment] = []
    failed: list[SiteAssessment] = []
    for bus in spec.candidates:
        try:
            scored.append(hosting_capacity(spec, bus))
        except (ValueError, NetworkValidationError, PowerFlowError) as exc:
            failed.append(
                SiteAssessment(
                    bus_id=bus,
                    capacity=float("nan"),
                    binding="error",
                    binding_tick=-1,
                    worst_voltage=float("nan"),
                    error=str(exc),
                )
            )
    scored.sort(key=lambda a: (-score(a), a.bus_id))
    failed.sort(key=lambda a: a.bus_id)
    return SiteRanking(
        assessments=tuple(scored + failed),
        engine=spec.engine,
        artifacts=dict(artifacts or {}),
    )
