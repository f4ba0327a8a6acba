"""Joint switch-status / outage / voltage estimation outer loop.

One call to :func:`estimate` takes a network and one measurement
snapshot and returns integral per-phase switch statuses, the energized /
islanded partition they imply, and complex bus voltages for every
energized bus-phase.  Internally each outer iteration assembles the
mixed-integer model linearized at the previous iterate, solves it, and
re-linearizes at the solved voltages and injection currents until the
state stops moving.

Islanded bus-phases have no observable voltage; they are reported as
``"not-observable"``, never as numbers.

Switch phases whose status leaves no trace in any measurement are listed
as undetectable: phases estimated open whose current estimate is below
the dead-band in both directions and whose closure would not energize
any device-bearing bus-phase (a de-energized island interior, or a stub
with no load behind it).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .formulation import (BigMConfig, LinearizationPoint, build_iteration_model,
                          flat_linearization, resolve_status)
from .measurements import SIGMA_FLOOR, MeasurementSet
from .network import PHASES, Network, energized_set, islands
from .solver import SolverError, solve_miqp


class EstimationError(RuntimeError):
    """Estimation failed; `iteration` is the outer iteration index."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


def flat_start(net: Network) -> LinearizationPoint:
    """Nominal balanced-voltage, zero-current linearization point."""
    return flat_linearization(net)


def substitute_missing(current: MeasurementSet, previous: MeasurementSet,
                       interval_sigma: float = 0.10) -> MeasurementSet:
    """Fill missing smart-meter channels from the previous interval.

    A missing channel takes the previous interval's value; its sigma
    combines the previous channel's own uncertainty with the
    interval-to-interval variation (relative `interval_sigma` of the
    substituted value), since both errors are independent.
    """
    prev = {c.device_key: c for c in previous if not c.missing}
    out = current.copy()
    for c in out:
        if not c.missing:
            continue
        p = prev.get(c.device_key)
        if p is None:
            raise EstimationError(
                f"missing channel {c.device_key} has no previous-interval value")
        c.value = p.value
        c.sigma = max(math.hypot(p.sigma, interval_sigma * abs(p.value)),
                      SIGMA_FLOOR)
        c.missing = False
    return out


@dataclass(frozen=True)
class EstimatorOptions:
    max_iter: int = 20
    state_tol: float = 1e-6
    outage_detection: bool = True
    bigm: BigMConfig = field(default_factory=BigMConfig)
    node_limit: int = 1          # root relaxation + status search per iteration
    status_margin: float = 5.0
    gap: float = 1e-6
    time_limit: float | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.state_tol <= 0:
            raise ValueError("state_tol must be > 0")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    state_delta: float      # inf on the first iteration
    nodes: int
    gap: float
    wall_time: float


@dataclass
class EstimationResult:
    statuses: dict[str, tuple[bool, bool, bool]]
    energized: dict[tuple[str, int], bool]
    island_labels: dict[tuple[str, int], str]
    v: dict[tuple[str, int], complex | None]   # None where not observable
    undetectable: list[tuple[str, int]]
    trace: list[IterationRecord]
    converged: bool
    iterations: int
    objective: float
    final_gap: float
    solver_status: str
    wall_time: float
    # (device id, phase) -> (P, Q) estimates; loads in consumption sign
    device_power: dict[tuple[str, int], tuple[float, float]] = field(
        default_factory=dict)

    def voltage(self, bus: str, phase: int) -> complex | None:
        return self.v[(bus, phase)]

    def to_json(self) -> str:
        """Canonical JSON; byte-identical for identical inputs."""
        buses: dict[str, dict] = {}
        for (bus, ph), volt in sorted(self.v.items()):
            entry = buses.setdefault(bus, {})
            if volt is None:
                entry[PHASES[ph]] = {"energized": False,
                                     "voltage": "not-observable"}
            else:
                entry[PHASES[ph]] = {
                    "energized": True,
                    "re": volt.real, "im": volt.imag,
                    "magnitude": abs(volt),
                    "angle_rad": math.atan2(volt.imag, volt.real),
                }
        doc = {
            "converged": self.converged,
            "iterations": self.iterations,
            "objective": self.objective,
            "final_gap": self.final_gap,
            "solver_status": self.solver_status,
            "statuses": {lid: list(st) for lid, st in sorted(self.statuses.items())},
            "undetectable": [[lid, PHASES[ph]]
                             for lid, ph in sorted(self.undetectable)],
            "islands": {f"{b}:{PHASES[p]}": lab
                        for (b, p), lab in sorted(self.island_labels.items())},
            "device_power": {f"{did}:{PHASES[ph]}": [p, q]
                             for (did, ph), (p, q)
                             in sorted(self.device_power.items())},
            "buses": buses,
            "trace": [{"iteration": r.iteration, "objective": r.objective,
                       "state_delta": (r.state_delta
                                       if math.isfinite(r.state_delta) else None),
                       "nodes": r.nodes, "gap": r.gap}
                      for r in self.trace],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EstimationResult":
        doc = json.loads(text)
        phase_index = {ph: i for i, ph in enumerate(PHASES)}
        v: dict[tuple[str, int], complex | None] = {}
        energized: dict[tuple[str, int], bool] = {}
        for bus, entry in doc["buses"].items():
            for ph, rec in entry.items():
                node = (bus, phase_index[ph])
                energized[node] = bool(rec["energized"])
                v[node] = (complex(rec["re"], rec["im"])
                           if rec["energized"] else None)
        labels = {}
        for key, lab in doc["islands"].items():
            bus, ph = key.rsplit(":", 1)
            labels[(bus, phase_index[ph])] = lab
        device_power = {}
        for key, (p, q) in doc.get("device_power", {}).items():
            did, ph = key.rsplit(":", 1)
            device_power[(did, phase_index[ph])] = (float(p), float(q))
        trace = [IterationRecord(r["iteration"], r["objective"],
                                 (math.inf if r["state_delta"] is None
                                  else r["state_delta"]),
                                 r["nodes"], r["gap"], 0.0)
                 for r in doc["trace"]]
        return cls(
            statuses={lid: tuple(bool(b) for b in st)
                      for lid, st in doc["statuses"].items()},
            energized=energized,
            island_labels=labels,
            v=v,
            undetectable=[(lid, phase_index[ph])
                          for lid, ph in doc["undetectable"]],
            trace=trace,
            converged=bool(doc["converged"]),
            iterations=int(doc["iterations"]),
            objective=float(doc["objective"]),
            final_gap=float(doc["final_gap"]),
            solver_status=doc["solver_status"],
            wall_time=0.0,
            device_power=device_power,
        )


def classify_undetectable(net: Network, statuses: dict,
                          switch_currents: dict[tuple[str, int], float],
                          theta: float) -> list[tuple[str, int]]:
    """Switch phases whose status no snapshot measurement can reveal.

    A phase qualifies when it is estimated open, its current estimate is
    below the dead-band in both directions, at least one of its
    endpoints is de-energized on that phase, and closing it (alone)
    would not energize any bus-phase carrying a device.  Interior
    switches of a de-energized island and switches feeding device-free
    stubs qualify; the boundary switch whose opening caused an island
    does not (closing it would re-energize load), and an open tie
    between two energized buses does not (closing it would drive loop
    current above the dead-band).
    """
    ene = energized_set(net, statuses)
    out = []
    for (lid, ph), imax in sorted(switch_currents.items()):
        if statuses[lid][ph] or imax >= theta:
            continue
        ln = net.lines[lid]
        if (ln.from_bus, ph) in ene and (ln.to_bus, ph) in ene:
            continue
        closed_here = {k: list(v) for k, v in statuses.items()}
        closed_here[lid][ph] = True
        newly = energized_set(net, closed_here) - ene
        if any(dev.phases[p] for b, p in newly for dev in net.devices_at(b)):
            continue
        out.append((lid, ph))
    return out


def _state_vector(model, x: np.ndarray, nodes) -> np.ndarray:
    vt = model.variables
    return np.array([[x[vt[("vr", b, p)]], x[vt[("vi", b, p)]]]
                     for b, p in nodes])


def estimate(net: Network, ms: MeasurementSet,
             opts: EstimatorOptions | None = None) -> EstimationResult:
    """Run the iteratively re-linearized estimator on one snapshot."""
    opts = opts or EstimatorOptions()
    t0 = time.monotonic()
    lin = flat_start(net)
    nodes = net.bus_phases()
    seeds: list[dict] = []
    trace: list[IterationRecord] = []
    prev_state: np.ndarray | None = None
    prev_status: dict | None = None
    converged = False
    res = model = None
    status = resolve_status(net, {})

    for it in range(opts.max_iter):
        model = build_iteration_model(net, ms, lin, opts.bigm,
                                      outage_detection=opts.outage_detection,
                                      iteration=it)
        try:
            res = solve_miqp(model, gap=opts.gap, node_limit=opts.node_limit,
                             time_limit=opts.time_limit, status_seeds=seeds,
                             status_margin=opts.status_margin)
        except SolverError as exc:
            raise EstimationError(
                f"solver failed at outer iteration {it}: {exc}", iteration=it)

        vt = model.variables
        x = res.solution.x
        status = res.switch_status if res.switch_status is not None else status
        ene = energized_set(net, status)
        state = _state_vector(model, x, nodes)

        if prev_state is None or status != prev_status:
            delta = math.inf
        else:
            mask = np.array([(b, p) in ene for b, p in nodes])
            delta = float(np.abs(state - prev_state)[mask].max()) if mask.any() else 0.0
        trace.append(IterationRecord(it, res.solution.objective, delta,
                                     res.nodes, res.gap,
                                     time.monotonic() - t0))
        prev_state, prev_status = state, status
        seeds = [status]

        if delta < opts.state_tol:
            converged = True
            break

        # Re-linearize at the solved state.  De-energized bus-phases are
        # unconstrained in the solve (their values are regularization
        # artifacts near zero), and a Taylor point with V ~ 0 degenerates
        # the power-balance rows into a free current sink; keep the
        # nominal flat point there instead.
        flat = flat_start(net)
        lin = LinearizationPoint(vr={}, vi={}, inr={}, ini={})
        for b, p in nodes:
            if (b, p) in ene:
                lin.vr[(b, p)] = float(x[vt[("vr", b, p)]])
                lin.vi[(b, p)] = float(x[vt[("vi", b, p)]])
                lin.inr[(b, p)] = float(x[vt[("inr", b, p)]])
                lin.ini[(b, p)] = float(x[vt[("ini", b, p)]])
            else:
                lin.vr[(b, p)] = flat.vr[(b, p)]
                lin.vi[(b, p)] = flat.vi[(b, p)]
                lin.inr[(b, p)] = 0.0
                lin.ini[(b, p)] = 0.0

    vt = model.variables
    x = res.solution.x
    ene = energized_set(net, status)
    labels = islands(net, status)
    v: dict[tuple[str, int], complex | None] = {}
    for b, p in nodes:
        v[(b, p)] = (complex(float(x[vt[("vr", b, p)]]),
                             float(x[vt[("vi", b, p)]]))
                     if (b, p) in ene else None)

    switch_currents = {
        (lid, ph): max(math.hypot(x[i0r], x[i0i]), math.hypot(x[i1r], x[i1i]))
        for lid, ph, _, i0r, i0i, i1r, i1i in model.meta["switch_phases"]}
    und = classify_undetectable(net, status, switch_currents, opts.bigm.theta)

    pq_keys = {"load": ("dp", "dq"), "der": ("pg", "qg"),
               "capacitor": (None, "qc")}
    device_power: dict[tuple[str, int], tuple[float, float]] = {}
    for did in net.device_order:
        dev = net.devices[did]
        keys = pq_keys.get(dev.kind)
        if keys is None:
            continue
        for ph in range(3):
            if dev.phases[ph]:
                p = float(x[vt[(keys[0], did, ph)]]) if keys[0] else 0.0
                q = float(x[vt[(keys[1], did, ph)]])
                device_power[(did, ph)] = (p, q)

    return EstimationResult(
        statuses=dict(sorted(status.items())),
        energized={n: n in ene for n in nodes},
        island_labels=labels,
        v=v,
        undetectable=und,
        trace=trace,
        converged=converged,
        iterations=len(trace),
        objective=res.solution.objective,
        final_gap=res.gap,
        solver_status=res.status,
        wall_time=time.monotonic() - t0,
        device_power=device_power,
    )
