"""Immutable unbalanced-feeder data model.

A feeder is a graph of buses and three-phase line segments.  Every line
carries full 3x3 series-impedance and shunt-susceptance blocks so that
mutual coupling between phases is retained; absent phases are kept as
zero rows/columns under a per-phase presence mask, which keeps matrix
indexing uniform for single-, two-, and three-phase laterals.

All quantities are per-unit on the single system base recorded in the
network document.  Shunt blocks must be purely susceptive (zero
conductance); series blocks must have positive resistance on the
diagonal of every present phase.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PHASES = ("a", "b", "c")
PHASE_INDEX = {"a": 0, "b": 1, "c": 2}


class NetworkError(ValueError):
    """Malformed network document or violated model invariant."""


class UnknownBus(NetworkError):
    def __init__(self, bus_id: str, context: str = ""):
        super().__init__(f"unknown bus {bus_id!r}" + (f" referenced by {context}" if context else ""))
        self.bus_id = bus_id


class DuplicateId(NetworkError):
    def __init__(self, element_id: str):
        super().__init__(f"duplicate element id {element_id!r}")
        self.element_id = element_id


class AsymmetricBlock(NetworkError):
    def __init__(self, line_id: str, which: str):
        super().__init__(f"line {line_id!r}: {which} block is not symmetric")
        self.line_id = line_id


class NonPositiveResistance(NetworkError):
    def __init__(self, line_id: str, phase: str):
        super().__init__(f"line {line_id!r}: non-positive series resistance on present phase {phase}")
        self.line_id = line_id
        self.phase = phase


class ShuntConductance(NetworkError):
    def __init__(self, line_id: str):
        super().__init__(f"line {line_id!r}: shunt block has nonzero conductance (only jB supported)")
        self.line_id = line_id


@dataclass(frozen=True)
class PhaseBlock:
    """3x3 complex parameter block with a per-phase presence mask."""

    entries: np.ndarray          # (3, 3) complex
    mask: tuple[bool, bool, bool]

    def validate(self, line_id: str, which: str, positive_diag: bool) -> None:
        z = self.entries
        if not np.all(np.isfinite(z.view(np.float64))):
            raise NetworkError(f"line {line_id!r}: non-finite {which} entry")
        if not np.array_equal(z, z.T):
            raise AsymmetricBlock(line_id, which)
        for i in range(3):
            for j in range(3):
                if not (self.mask[i] and self.mask[j]) and z[i, j] != 0:
                    raise NetworkError(
                        f"line {line_id!r}: {which} block nonzero on masked phase pair "
                        f"({PHASES[i]},{PHASES[j]})")
        if positive_diag:
            for i in range(3):
                if self.mask[i] and z[i, i].real <= 0:
                    raise NonPositiveResistance(line_id, PHASES[i])

    def sub(self, phases: list[int]) -> np.ndarray:
        """Dense submatrix on the given phase indices."""
        return self.entries[np.ix_(phases, phases)]


@dataclass(frozen=True)
class Device:
    id: str
    kind: str                    # load | der | capacitor | transformer
    bus: str
    phases: tuple[bool, bool, bool]
    p: np.ndarray                # (3,) active power setpoint, p.u.
    q: np.ndarray                # (3,) reactive power setpoint, p.u.
    nl: np.ndarray               # (3,) transformer no-load loss, p.u.
    pf_min: float = 0.9
    pf_max: float = 0.99


@dataclass(frozen=True)
class LineSegment:
    id: str
    from_bus: str
    to_bus: str
    phases: tuple[bool, bool, bool]
    z: PhaseBlock
    y: PhaseBlock
    switch: tuple[bool, bool, bool]   # per-phase switch present
    nos: bool = False                 # normally-open tie
    true_status: tuple[bool, bool, bool] = (True, True, True)  # harness-only ground truth

    @property
    def has_switch(self) -> bool:
        return any(self.switch)

    def present(self) -> list[int]:
        return [i for i in range(3) if self.phases[i]]


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[bool, bool, bool]
    devices: tuple[str, ...] = ()
    lines: tuple[str, ...] = ()


@dataclass(frozen=True)
class Network:
    buses: dict[str, Bus]
    lines: dict[str, LineSegment]
    devices: dict[str, Device]
    slack: str
    base_kv: float
    base_kva: float
    bus_order: tuple[str, ...] = field(default=())
    line_order: tuple[str, ...] = field(default=())
    device_order: tuple[str, ...] = field(default=())

    def lines_at(self, bus_id: str) -> list[LineSegment]:
        return [self.lines[lid] for lid in self.buses[bus_id].lines]

    def devices_at(self, bus_id: str) -> list[Device]:
        return [self.devices[did] for did in self.buses[bus_id].devices]

    def bus_phases(self) -> list[tuple[str, int]]:
        """All present (bus id, phase index) pairs in document order."""
        return [(b, i) for b in self.bus_order for i in range(3) if self.buses[b].phases[i]]


def _mask(seq) -> tuple[bool, bool, bool]:
    vals = tuple(bool(v) for v in seq)
    if len(vals) != 3:
        raise NetworkError(f"expected 3 per-phase booleans, got {seq!r}")
    return vals


def _block(raw, mask, line_id: str, which: str, positive_diag: bool) -> PhaseBlock:
    arr = np.array([[complex(c[0], c[1]) for c in row] for row in raw], dtype=complex)
    if arr.shape != (3, 3):
        raise NetworkError(f"line {line_id!r}: {which} block must be 3x3")
    arr.setflags(write=False)
    blk = PhaseBlock(arr, mask)
    blk.validate(line_id, which, positive_diag)
    return blk


def _vec3(raw, default=0.0) -> np.ndarray:
    arr = np.asarray([float(v) for v in raw] if raw is not None else [default] * 3, dtype=float)
    if arr.shape != (3,):
        raise NetworkError(f"expected 3 per-phase values, got {raw!r}")
    arr.setflags(write=False)
    return arr


def load_network(doc: dict) -> Network:
    """Build and validate a Network from a parsed JSON document."""
    base = doc.get("base", {})
    base_kv = float(base.get("kv", 1.0))
    base_kva = float(base.get("kva", 1.0))

    buses: dict[str, Bus] = {}
    bus_devs: dict[str, list[str]] = {}
    bus_lines: dict[str, list[str]] = {}
    for b in doc["buses"]:
        bid = str(b["id"])
        if bid in buses:
            raise DuplicateId(bid)
        buses[bid] = Bus(bid, _mask(b["phases"]))
        bus_devs[bid] = []
        bus_lines[bid] = []

    lines: dict[str, LineSegment] = {}
    for ln in doc["lines"]:
        lid = str(ln["id"])
        if lid in lines:
            raise DuplicateId(lid)
        phases = _mask(ln["phases"])
        for end in ("from", "to"):
            if ln[end] not in buses:
                raise UnknownBus(str(ln[end]), f"line {lid!r}")
        z = _block(ln["z"], phases, lid, "series", positive_diag=True)
        y = _block(ln["y"], phases, lid, "shunt", positive_diag=False)
        if np.any(y.entries.real != 0):
            raise ShuntConductance(lid)
        switch = _mask(ln.get("switch", [False] * 3))
        for i in range(3):
            if switch[i] and not phases[i]:
                raise NetworkError(f"line {lid!r}: switch on absent phase {PHASES[i]}")
            if phases[i] and not (buses[ln["from"]].phases[i] and buses[ln["to"]].phases[i]):
                raise NetworkError(f"line {lid!r}: phase {PHASES[i]} absent at an endpoint bus")
        lines[lid] = LineSegment(
            id=lid, from_bus=str(ln["from"]), to_bus=str(ln["to"]), phases=phases,
            z=z, y=y, switch=switch, nos=bool(ln.get("nos", False)),
            true_status=_mask(ln.get("true_status", [True] * 3)))
        bus_lines[ln["from"]].append(lid)
        bus_lines[ln["to"]].append(lid)

    devices: dict[str, Device] = {}
    for dv in doc.get("devices", []):
        did = str(dv["id"])
        if did in devices or did in lines:
            raise DuplicateId(did)
        bid = str(dv["bus"])
        if bid not in buses:
            raise UnknownBus(bid, f"device {did!r}")
        phases = _mask(dv["phases"])
        for i in range(3):
            if phases[i] and not buses[bid].phases[i]:
                raise NetworkError(f"device {did!r}: phase {PHASES[i]} absent at bus {bid!r}")
        kind = str(dv["kind"])
        if kind not in ("load", "der", "capacitor", "transformer"):
            raise NetworkError(f"device {did!r}: unknown kind {kind!r}")
        pf_min = float(dv.get("pf_min", 0.9))
        pf_max = float(dv.get("pf_max", 0.99))
        if not (0.0 < pf_min <= pf_max <= 1.0):
            raise NetworkError(f"device {did!r}: power factor bounds out of range")
        nl = _vec3(dv.get("nl"))
        if np.any(nl < 0):
            raise NetworkError(f"device {did!r}: negative no-load loss")
        devices[did] = Device(
            id=did, kind=kind, bus=bid, phases=phases,
            p=_vec3(dv.get("p")), q=_vec3(dv.get("q")), nl=nl,
            pf_min=pf_min, pf_max=pf_max)
        bus_devs[bid].append(did)

    slack = str(doc["slack"])
    if slack not in buses:
        raise UnknownBus(slack, "slack designation")

    buses = {bid: Bus(bid, b.phases, tuple(bus_devs[bid]), tuple(bus_lines[bid]))
             for bid, b in buses.items()}
    net = Network(
        buses=buses, lines=lines, devices=devices, slack=slack,
        base_kv=base_kv, base_kva=base_kva,
        bus_order=tuple(buses), line_order=tuple(lines), device_order=tuple(devices))

    labels = islands(net, {lid: ln.phases for lid, ln in lines.items()})
    if any(lab != "energized" for lab in labels.values()):
        raise NetworkError("network is not connected with all switches closed")
    return net


def load_network_file(path) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        return load_network(json.load(fh))


def serialize(net: Network) -> dict:
    """Inverse of load_network; round-trips field-for-field."""
    def pairs(block: PhaseBlock):
        return [[[c.real, c.imag] for c in row] for row in block.entries]

    return {
        "base": {"kv": net.base_kv, "kva": net.base_kva},
        "slack": net.slack,
        "buses": [{"id": b, "phases": list(net.buses[b].phases)} for b in net.bus_order],
        "lines": [{
            "id": lid, "from": ln.from_bus, "to": ln.to_bus,
            "phases": list(ln.phases), "z": pairs(ln.z), "y": pairs(ln.y),
            "switch": list(ln.switch), "nos": ln.nos,
            "true_status": list(ln.true_status),
        } for lid, ln in ((lid, net.lines[lid]) for lid in net.line_order)],
        "devices": [{
            "id": did, "kind": d.kind, "bus": d.bus, "phases": list(d.phases),
            "p": list(d.p), "q": list(d.q), "nl": list(d.nl),
            "pf_min": d.pf_min, "pf_max": d.pf_max,
        } for did, d in ((did, net.devices[did]) for did in net.device_order)],
    }


def classify_lines(net: Network) -> tuple[list[LineSegment], list[LineSegment]]:
    """Partition lines into (no switch, any per-phase switch)."""
    plain = [net.lines[lid] for lid in net.line_order if not net.lines[lid].has_switch]
    switched = [net.lines[lid] for lid in net.line_order if net.lines[lid].has_switch]
    return plain, switched


def phase_closed(line: LineSegment, status, phase: int) -> bool:
    """Whether a present phase conducts under the given switch status.

    Non-switched phases are always closed; switched phases consult the
    status entry for this line.
    """
    if not line.phases[phase]:
        return False
    if not line.switch[phase]:
        return True
    return bool(status[line.id][phase])


def islands(net: Network, status: dict) -> dict[tuple[str, int], str]:
    """Label every present bus-phase by connectivity under switch statuses.

    Two bus-phases share a label iff joined by a path of closed phases of
    the same phase index.  The component containing the slack is labeled
    "energized"; every other component is labeled by its lexicographically
    smallest (bus, phase) member, so the partition is invariant under line
    reordering.
    """
    parent: dict[tuple[str, int], tuple[str, int]] = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for node in net.bus_phases():
        parent[node] = node
    for lid in net.line_order:
        ln = net.lines[lid]
        for i in range(3):
            if phase_closed(ln, status, i):
                union((ln.from_bus, i), (ln.to_bus, i))

    members: dict[tuple[str, int], list[tuple[str, int]]] = {}
    for node in parent:
        members.setdefault(find(node), []).append(node)
    labels: dict[tuple[str, int], str] = {}
    for root, nodes in members.items():
        slack_here = any(b == net.slack for b, _ in nodes)
        if slack_here:
            name = "energized"
        else:
            b, i = min(nodes)
            name = f"island:{b}:{PHASES[i]}"
        for node in nodes:
            labels[node] = name
    return labels


def energized_set(net: Network, status: dict) -> set[tuple[str, int]]:
    return {node for node, lab in islands(net, status).items() if lab == "energized"}
