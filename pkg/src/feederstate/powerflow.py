"""Forward unbalanced power flow for a fixed, known topology.

Produces ground-truth complex voltages, line currents, and device
injections that the measurement synthesizer samples from and the
estimator is scored against.

Line model (per line, restricted to its closed present phases S): each
end carries its own sending-end current into the line,

    I_fwd[S] = inv(Z[S,S]) @ (V_f[S] - V_t[S]) + 1/2 Y[S,S] @ V_f[S]
    I_rev[S] = inv(Z[S,S]) @ (V_t[S] - V_f[S]) + 1/2 Y[S,S] @ V_t[S]

equivalently V_f - V_t = Z (I_fwd - 1/2 Y V_f), the symmetric pi model
with half the shunt charged at each end.  A bus injection is the plain
sum of the currents leaving the bus into its incident lines, so power
is conserved exactly (shunts are pure susceptance).

The solver is a fixed-point current-injection iteration: the nodal
admittance system is factorized once and device currents conj(S/V) are
re-evaluated each sweep.  Devices are constant-PQ (wye); transformer
no-load loss is a constant real sink.  De-energized bus-phases take
V = 0, I = 0 by convention, and devices sitting on them are zeroed with
a warning.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import PHASES, Network, islands, phase_closed

V_TOL = 1e-10
MAX_SWEEPS = 200


class NonConvergence(RuntimeError):
    """Fixed-point sweep failed to reach the voltage tolerance."""


class OpenPhase(ValueError):
    """Residual queried on an open or absent line phase."""


@dataclass
class StateTruth:
    """Converged network state for one topology/injection snapshot."""

    v: dict[str, np.ndarray]            # bus id -> (3,) complex voltage
    i_line: dict[str, np.ndarray]       # line id -> (3,) complex from-end current
    i_line_rev: dict[str, np.ndarray]   # line id -> (3,) complex to-end current
    i_inj: dict[str, np.ndarray]        # bus id -> (3,) complex injection current
    device_s: dict[str, np.ndarray]     # device id -> (3,) complex injection (network sign)
    labels: dict[tuple[str, int], str]  # island labels used
    status: dict[str, tuple]            # switch statuses the state was solved under
    warnings: list[str] = field(default_factory=list)
    sweeps: int = 0

    def energized(self, bus: str, phase: int) -> bool:
        return self.labels.get((bus, phase)) == "energized"

    def to_json(self) -> str:
        def cvec(a):
            return [[x.real, x.imag] for x in a]
        doc = {
            "v": {b: cvec(a) for b, a in self.v.items()},
            "i_line": {l: cvec(a) for l, a in self.i_line.items()},
            "i_line_rev": {l: cvec(a) for l, a in self.i_line_rev.items()},
            "i_inj": {b: cvec(a) for b, a in self.i_inj.items()},
            "device_s": {d: cvec(a) for d, a in self.device_s.items()},
            "labels": {f"{b}:{PHASES[i]}": lab for (b, i), lab in sorted(self.labels.items())},
            "status": {l: list(s) for l, s in self.status.items()},
            "warnings": self.warnings,
            "sweeps": self.sweeps,
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def flat_phases() -> np.ndarray:
    """Canonical balanced set 1<0, 1<-120, 1<+120 degrees."""
    return np.array([1.0 + 0.0j,
                     complex(-0.5, -np.sqrt(3.0) / 2.0),
                     complex(-0.5, np.sqrt(3.0) / 2.0)])


def closed_phases(line, status) -> list[int]:
    return [i for i in range(3) if phase_closed(line, status, i)]


def device_injection(dev, override=None) -> np.ndarray:
    """Complex power injected into the network by a device (load negative)."""
    p, q = (dev.p, dev.q) if override is None else override
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    s = np.zeros(3, dtype=complex)
    for i in range(3):
        if not dev.phases[i]:
            continue
        if dev.kind == "load":
            s[i] = -(p[i] + 1j * q[i])
        elif dev.kind == "der":
            s[i] = p[i] + 1j * q[i]
        elif dev.kind == "capacitor":
            s[i] = 1j * q[i]
        elif dev.kind == "transformer":
            s[i] = -dev.nl[i]
    return s


def solve_powerflow(net: Network, status: dict, injections: dict | None = None) -> StateTruth:
    """Solve the feeder to the 1e-10 fixed-point tolerance.

    status maps line id to per-phase closed booleans (consulted on switched
    phases only); injections optionally overrides device (p, q) setpoints.
    """
    labels = islands(net, status)
    energized = {n for n, lab in labels.items() if lab == "energized"}
    if not any(b == net.slack for b, _ in energized):
        raise NonConvergence("slack bus has no energized phase")

    notes: list[str] = []
    dev_s: dict[str, np.ndarray] = {}
    for did in net.device_order:
        dev = net.devices[did]
        s = device_injection(dev, None if injections is None else injections.get(did))
        for i in range(3):
            if dev.phases[i] and (dev.bus, i) not in energized and s[i] != 0:
                notes.append(f"device {did} phase {PHASES[i]} islanded; injection zeroed")
                s[i] = 0.0
        dev_s[did] = s

    nodes = [n for n in net.bus_phases() if n in energized]
    idx = {n: k for k, n in enumerate(nodes)}
    nn = len(nodes)

    rows, cols, vals = [], [], []

    def stamp(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for lid in net.line_order:
        ln = net.lines[lid]
        cc = closed_phases(ln, status)
        if not cc or (ln.from_bus, cc[0]) not in idx:
            continue
        A = np.linalg.inv(ln.z.sub(cc))
        B = 0.5 * ln.y.sub(cc)
        for a, pa in enumerate(cc):
            rf, rt = idx[(ln.from_bus, pa)], idx[(ln.to_bus, pa)]
            for b, pb in enumerate(cc):
                cf, ct = idx[(ln.from_bus, pb)], idx[(ln.to_bus, pb)]
                stamp(rf, cf, A[a, b] + B[a, b])
                stamp(rf, ct, -A[a, b])
                stamp(rt, ct, A[a, b] + B[a, b])
                stamp(rt, cf, -A[a, b])

    Y = sp.coo_matrix((vals, (rows, cols)), shape=(nn, nn), dtype=complex).tocsc()

    flat = flat_phases()
    slack_idx = [idx[(net.slack, i)] for i in range(3) if (net.slack, i) in idx]
    slack_v = np.array([flat[i] for i in range(3) if (net.slack, i) in idx])
    red = np.array([k for k in range(nn) if k not in set(slack_idx)], dtype=int)

    v = np.array([flat[i] for (_, i) in nodes], dtype=complex)
    s_node = np.zeros(nn, dtype=complex)
    for did, s in dev_s.items():
        dev = net.devices[did]
        for i in range(3):
            if dev.phases[i] and (dev.bus, i) in idx:
                s_node[idx[(dev.bus, i)]] += s[i]

    sweeps = 0
    if len(red):
        Yrr = Y[np.ix_(red, red)].tocsc()
        Yrs = Y[np.ix_(red, np.array(slack_idx, dtype=int))].tocsc()
        lu = spla.splu(Yrr)
        for sweeps in range(1, MAX_SWEEPS + 1):
            i_dev = np.conj(s_node[red] / v[red])
            v_new = lu.solve(i_dev - Yrs @ slack_v)
            delta = float(np.max(np.abs(v_new - v[red])))
            v[red] = v_new
            if delta < V_TOL:
                break
        else:
            raise NonConvergence(f"no convergence after {MAX_SWEEPS} sweeps")

    v_bus = {b: np.zeros(3, dtype=complex) for b in net.bus_order}
    for (b, i), k in idx.items():
        v_bus[b][i] = v[k]

    i_line = {}
    i_line_rev = {}
    for lid in net.line_order:
        ln = net.lines[lid]
        fwd = np.zeros(3, dtype=complex)
        rev = np.zeros(3, dtype=complex)
        cc = closed_phases(ln, status)
        if cc and (ln.from_bus, cc[0]) in idx:
            A = np.linalg.inv(ln.z.sub(cc))
            B = 0.5 * ln.y.sub(cc)
            vf = v_bus[ln.from_bus][cc]
            vt = v_bus[ln.to_bus][cc]
            fwd[cc] = A @ (vf - vt) + B @ vf
            rev[cc] = A @ (vt - vf) + B @ vt
        i_line[lid] = fwd
        i_line_rev[lid] = rev

    i_inj = {b: np.zeros(3, dtype=complex) for b in net.bus_order}
    full = Y @ v
    for (b, i), k in idx.items():
        i_inj[b][i] = full[k]

    for note in notes:
        warnings.warn(note, stacklevel=2)

    return StateTruth(v=v_bus, i_line=i_line, i_line_rev=i_line_rev, i_inj=i_inj,
                      device_s=dev_s, labels=labels,
                      status={l: tuple(s) for l, s in status.items()},
                      warnings=notes, sweeps=sweeps)


def kvl_residual(net: Network, state: StateTruth, line_id: str, phase: int,
                 reverse: bool = False) -> complex:
    """Residual of the line-current definition on one closed phase.

    Returns ([Z(I - 1/2 Y V_send)] - (V_send - V_recv))[phase] / Z[phase, phase],
    which is zero exactly when the directional line equation holds.
    """
    ln = net.lines[line_id]
    cc = closed_phases(ln, state.status)
    if phase not in cc:
        raise OpenPhase(f"line {line_id} phase {PHASES[phase]} is open or absent")
    Z = ln.z.sub(cc)
    Yh = 0.5 * ln.y.sub(cc)
    if reverse:
        vs, vr = state.v[ln.to_bus][cc], state.v[ln.from_bus][cc]
        cur = state.i_line_rev[line_id][cc]
    else:
        vs, vr = state.v[ln.from_bus][cc], state.v[ln.to_bus][cc]
        cur = state.i_line[line_id][cc]
    res = Z @ (cur - Yh @ vs) - (vs - vr)
    k = cc.index(phase)
    return complex(res[k] / Z[k, k])


def bus_injection_sum(net: Network, state: StateTruth, bus: str, phase: int) -> complex:
    """Sum of currents leaving the bus into its incident closed line phases."""
    total = 0.0 + 0.0j
    for ln in net.lines_at(bus):
        if not phase_closed(ln, state.status, phase):
            continue
        cur = state.i_line[ln.id] if ln.from_bus == bus else state.i_line_rev[ln.id]
        total += cur[phase]
    return total


def injection_residual(net: Network, state: StateTruth, bus: str, phase: int) -> complex:
    """Power-balance residual at a bus-phase (P residual + j Q residual).

    The injection current is taken from the line-current sum so this
    residual checks the current-sum and power-balance equations at once
    against the device injections.
    """
    if state.labels.get((bus, phase)) is None:
        raise OpenPhase(f"bus {bus} has no phase {PHASES[phase]}")
    i_n = bus_injection_sum(net, state, bus, phase)
    s_net = state.v[bus][phase] * np.conj(i_n)
    s_dev = sum((state.device_s[did][phase] for did in net.buses[bus].devices),
                start=0.0 + 0.0j)
    return complex(s_dev - s_net)


def total_power_report(net: Network, state: StateTruth) -> dict:
    """Aggregate generation, load, and losses for conservation checks."""
    gen = load = nl = 0.0
    for did, s in state.device_s.items():
        kind = net.devices[did].kind
        if kind == "der":
            gen += s.real.sum()
        elif kind == "load":
            load += -s.real.sum()
        elif kind == "transformer":
            nl += -s.real.sum()
    slack_import = sum(
        (state.v[net.slack][i] * np.conj(state.i_inj[net.slack][i])).real
        for i in range(3) if net.buses[net.slack].phases[i])
    series_loss = 0.0
    for lid in net.line_order:
        ln = net.lines[lid]
        cc = closed_phases(ln, state.status)
        if not cc:
            continue
        vf = state.v[ln.from_bus][cc]
        vt = state.v[ln.to_bus][cc]
        Yh = 0.5 * ln.y.sub(cc)
        i_ser = state.i_line[lid][cc] - Yh @ vf
        series_loss += float(np.real(np.vdot(i_ser, vf - vt)))
    return {"generation": gen, "load": load, "no_load_loss": nl,
            "slack_import": slack_import, "series_loss": series_loss}
