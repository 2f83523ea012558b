"""Shared test helpers: independent reference implementations and builders.

The Newton solver here is deliberately a separate code path from the
package's sweep solver (dense Ybus, polar mismatch equations, full
Jacobian) so the two can cross-check each other.
"""

from __future__ import annotations

import numpy as np

from gridscope.grid_model import FeederNetwork, build_network


# ---------------------------------------------------------------------------
# network builders
# ---------------------------------------------------------------------------


def two_bus_net(r=0.01, x=0.02, limit=2.0) -> FeederNetwork:
    return build_network(
        {
            "buses": [
                {"id": "sub", "kind": "slack", "phase": "A"},
                {"id": "b1", "kind": "load", "phase": "A"},
            ],
            "lines": [
                {"id": "l1", "from": "sub", "to": "b1", "r": r, "x": x, "limit": limit}
            ],
        }
    )


def chain_net(n_bus: int, r=0.004, x=0.006, limit=3.0) -> FeederNetwork:
    """Uniform chain: sub -> b1 -> b2 -> ... -> b{n-1}."""
    buses = [{"id": "sub", "kind": "slack", "phase": "A"}]
    lines = []
    prev = "sub"
    for i in range(1, n_bus):
        bid = f"b{i}"
        buses.append({"id": bid, "kind": "load", "phase": "A"})
        lines.append(
            {"id": f"l{i}", "from": prev, "to": bid, "r": r, "x": x, "limit": limit}
        )
        prev = bid
    return build_network({"buses": buses, "lines": lines})


# ---------------------------------------------------------------------------
# dense Newton-Raphson reference solver
# ---------------------------------------------------------------------------


def newton_reference(net, s_load, w=None, tol=1e-12, max_iter=50):
    """Full-Newton power flow on the dense Ybus of the closed-line graph.

    Parameters
    ----------
    s_load : complex array over net.load_bus_ids (consumption negative).

    Returns
    -------
    dict with keys "vm", "va" (arrays over net.bus_ids) and "s_slack"
    (total complex slack injection).
    """
    if w is None:
        w = net.default_state()
    n = len(net.buses)
    mask = net.closed_line_mask(tuple(w))
    ybus = np.zeros((n, n), dtype=complex)
    for li, ln in enumerate(net.lines):
        if not mask[li]:
            continue
        a, b = net.bus_index(ln.from_bus), net.bus_index(ln.to_bus)
        y = 1.0 / complex(ln.r, ln.x)
        ybus[a, a] += y
        ybus[b, b] += y
        ybus[a, b] -= y
        ybus[b, a] -= y

    slack = [i for i, b in enumerate(net.buses) if b.kind == "slack"]
    pq = [i for i, b in enumerate(net.buses) if b.kind != "slack"]
    load_idx = {net.bus_index(b): k for k, b in enumerate(net.load_bus_ids)}

    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    for i in pq:
        p_spec[i] = np.real(s_load[load_idx[i]])
        q_spec[i] = np.imag(s_load[load_idx[i]])

    vm = np.array([b.vset for b in net.buses], dtype=float)
    va = np.zeros(n)

    g, bsus = ybus.real, ybus.imag
    for _ in range(max_iter):
        vc = vm * np.exp(1j * va)
        s_calc = vc * np.conj(ybus @ vc)
        dp = p_spec[pq] - s_calc.real[pq]
        dq = q_spec[pq] - s_calc.imag[pq]
        mismatch = np.concatenate([dp, dq])
        if np.max(np.abs(mismatch)) < tol:
            break

        # polar Jacobian blocks
        npq = len(pq)
        j11 = np.zeros((npq, npq))  # dP/dtheta
        j12 = np.zeros((npq, npq))  # dP/dV
        j21 = np.zeros((npq, npq))  # dQ/dtheta
        j22 = np.zeros((npq, npq))  # dQ/dV
        for a_, i in enumerate(pq):
            for b_, j in enumerate(pq):
                if i == j:
                    j11[a_, b_] = -s_calc.imag[i] - bsus[i, i] * vm[i] ** 2
                    j12[a_, b_] = s_calc.real[i] / vm[i] + g[i, i] * vm[i]
                    j21[a_, b_] = s_calc.real[i] - g[i, i] * vm[i] ** 2
                    j22[a_, b_] = s_calc.imag[i] / vm[i] - bsus[i, i] * vm[i]
                else:
                    tij = va[i] - va[j]
                    gij, bij = g[i, j], bsus[i, j]
                    j11[a_, b_] = vm[i] * vm[j] * (gij * np.sin(tij) - bij * np.cos(tij))
                    j12[a_, b_] = vm[i] * (gij * np.cos(tij) + bij * np.sin(tij))
                    j21[a_, b_] = -vm[i] * vm[j] * (gij * np.cos(tij) + bij * np.sin(tij))
                    j22[a_, b_] = vm[i] * (gij * np.sin(tij) - bij * np.cos(tij))
        jac = np.block([[j11, j12], [j21, j22]])
        delta = np.linalg.solve(jac, mismatch)
        va[pq] += delta[:npq]
        vm[pq] += delta[npq:]
    else:
        raise RuntimeError("Newton reference did not converge")

    vc = vm * np.exp(1j * va)
    s_calc = vc * np.conj(ybus @ vc)
    return {"vm": vm, "va": va, "s_slack": complex(s_calc[slack].sum())}


def power_balance_residual(net, state, s_load):
    """|slack + sum(injections) - sum(line losses)| for a solved state."""
    from gridscope.grid_model import line_flows

    tree_flows = line_flows(net, state)
    v = state.v
    loss = 0j
    mask = net.closed_line_mask(state.w)
    for li, ln in enumerate(net.lines):
        if not mask[li]:
            continue
        a, b = net.bus_index(ln.from_bus), net.bus_index(ln.to_bus)
        current = (v[a] - v[b]) / ln.z
        loss += abs(current) ** 2 * ln.z
    total = complex(state.slack_p, state.slack_q) + np.sum(s_load) - loss
    del tree_flows
    return abs(total)
