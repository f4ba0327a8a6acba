"""Measurement synthesis: noise, aggregation, bad data, missing data.

Builds the weighted channel vector the estimator consumes from a
ground-truth state.  Channel kinds:

    pmu_v   bus voltage phasor (re/im channel pair)
    pmu_i   line from-end current phasor (re/im channel pair)
    sm_p    aggregated smart-meter active power of a load, per phase
    sm_q    aggregated smart-meter reactive power of a load, per phase
    pv_p    PV active power, pv_q PV reactive power
    cap_q   capacitor bank reactive power
    sub_p   substation (slack) active injection, sub_q reactive

Power channels get multiplicative Gaussian noise value = truth(1 + eps)
with the per-kind relative sigma; their reported sigma is the implied
absolute value, floored at 1e-6 so weights stay finite on zero-truth
channels.  PMU channels get additive re/im Gaussian noise with
sigma = tve * ref / 3, rejection-resampled until the realized vector
error stays within tve * ref.

The `bad` flag and the `truth` value on each channel are harness-private
scoring aids; the CSV interchange format and hence the estimator never
see them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .network import PHASES, PHASE_INDEX, Network
from .powerflow import StateTruth
from .rng import Rng

SIGMA_FLOOR = 1e-6
PMU_I_REF_FLOOR = 0.05   # instrument range floor for current-channel noise, p.u.

POWER_KINDS = ("sm_p", "sm_q", "pv_p", "pv_q", "cap_q", "sub_p", "sub_q")
PMU_KINDS = ("pmu_v", "pmu_i")
SM_KINDS = ("sm_p", "sm_q")


class PlacementError(ValueError):
    """Placement references a bus, line, or device the network lacks."""


@dataclass(frozen=True)
class SensorConfig:
    """Per-kind relative noise levels; defaults are the studied values."""

    pmu_tve: float = 0.0005
    smart_meter_sigma: float = 0.10
    pv_sigma: float = 0.10
    capacitor_sigma: float = 0.01
    substation_sigma: float = 0.01
    integration_sigma: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ("pmu_tve", "smart_meter_sigma", "pv_sigma",
                     "capacitor_sigma", "substation_sigma", "integration_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def scaled(self, factor: float) -> "SensorConfig":
        return SensorConfig(
            pmu_tve=self.pmu_tve * factor,
            smart_meter_sigma=self.smart_meter_sigma * factor,
            pv_sigma=self.pv_sigma * factor,
            capacitor_sigma=self.capacitor_sigma * factor,
            substation_sigma=self.substation_sigma * factor,
            integration_sigma=self.integration_sigma * factor,
            seed=self.seed)


@dataclass(frozen=True)
class Placement:
    """Which sensors exist.  Substation metering is always present."""

    pmu_buses: tuple[str, ...] = ()
    pmu_lines: tuple[str, ...] = ()
    load_q: bool = True          # smart meters report Q as well as P
    integration: bool = False    # 15-min-average vs snapshot discrepancy active


@dataclass
class Channel:
    kind: str
    bus: str = ""
    line: str = ""
    phase: int = 0
    part: str = ""               # "re" / "im" for phasor channels
    value: float = 0.0
    sigma: float = SIGMA_FLOOR
    missing: bool = False
    bad: bool = False            # harness-private
    truth: float = 0.0           # harness-private

    @property
    def device_key(self) -> tuple:
        return (self.kind, self.bus, self.line, self.phase, self.part)


@dataclass
class MeasurementSet:
    channels: list[Channel] = field(default_factory=list)

    def __iter__(self):
        return iter(self.channels)

    def __len__(self):
        return len(self.channels)

    def of_kind(self, *kinds: str) -> list[Channel]:
        return [c for c in self.channels if c.kind in kinds]

    def copy(self) -> "MeasurementSet":
        return MeasurementSet([replace(c) for c in self.channels])

    def strip_private(self) -> "MeasurementSet":
        """Estimator-facing view: bad flags and truth values cleared."""
        return MeasurementSet([replace(c, bad=False, truth=0.0) for c in self.channels])

    # -- interchange -----------------------------------------------------

    def to_csv(self) -> str:
        """One row per channel; phasor pairs appear re-then-im."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "bus", "line", "phase", "value", "sigma", "missing"])
        for c in self.channels:
            w.writerow([c.kind, c.bus, c.line, PHASES[c.phase],
                        repr(float(c.value)), repr(float(c.sigma)),
                        int(c.missing)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MeasurementSet":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["kind", "bus", "line", "phase", "value", "sigma", "missing"]:
            raise ValueError("bad measurement CSV header")
        chans = []
        seen_pairs: dict[tuple, int] = {}
        for kind, bus, line, phase, value, sigma, missing in rows[1:]:
            part = ""
            if kind in PMU_KINDS:
                key = (kind, bus, line, phase)
                n = seen_pairs.get(key, 0)
                seen_pairs[key] = n + 1
                part = "re" if n % 2 == 0 else "im"
            chans.append(Channel(kind=kind, bus=bus, line=line,
                                 phase=PHASE_INDEX[phase], part=part,
                                 value=float(value), sigma=float(sigma),
                                 missing=bool(int(missing))))
        return cls(chans)

    def to_json(self) -> str:
        return json.dumps([c.__dict__ for c in self.channels], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MeasurementSet":
        return cls([Channel(**d) for d in json.loads(text)])


def combined_sigma(device_sigma: float, integration_sigma: float) -> float:
    """Total relative sigma of two independent error sources."""
    if device_sigma < 0 or integration_sigma < 0:
        raise ValueError("sigmas must be >= 0")
    return math.hypot(device_sigma, integration_sigma)


def _power_channel(rng: Rng, kind: str, bus: str, phase: int, truth: float,
                   rel_sigma: float, extra_rel: float = 0.0) -> Channel:
    key = f"{kind}:{bus}:{PHASES[phase]}"
    eps = rel_sigma * float(rng.normal(key)[0])
    if extra_rel > 0:
        eps += extra_rel * float(rng.normal(key + ":int")[0])
    total_rel = combined_sigma(rel_sigma, extra_rel)
    return Channel(kind=kind, bus=bus, phase=phase,
                   value=truth * (1.0 + eps),
                   sigma=max(total_rel * abs(truth), SIGMA_FLOOR),
                   truth=truth)


def _pmu_pair(rng: Rng, kind: str, bus: str, line: str, phase: int,
              truth: complex, tve: float, ref: float) -> list[Channel]:
    key = f"{kind}:{bus}{line}:{PHASES[phase]}"
    sigma = tve * ref / 3.0
    er = ei = 0.0
    if sigma > 0:
        while True:
            draw = rng.normal(key, 2)
            er, ei = sigma * float(draw[0]), sigma * float(draw[1])
            if math.hypot(er, ei) <= tve * ref:
                break
    common = dict(kind=kind, bus=bus, line=line, phase=phase,
                  sigma=max(sigma, SIGMA_FLOOR))
    return [Channel(part="re", value=truth.real + er, truth=truth.real, **common),
            Channel(part="im", value=truth.imag + ei, truth=truth.imag, **common)]


def synthesize(net: Network, truth: StateTruth, cfg: SensorConfig,
               placement: Placement) -> MeasurementSet:
    """Sample one measurement snapshot from a ground-truth state."""
    rng = Rng(cfg.seed)
    chans: list[Channel] = []

    for bus in placement.pmu_buses:
        if bus not in net.buses:
            raise PlacementError(f"PMU bus {bus!r} not in network")
        for i in range(3):
            if not net.buses[bus].phases[i]:
                continue
            v = complex(truth.v[bus][i])
            ref = max(abs(v), 0.5)
            chans.extend(_pmu_pair(rng, "pmu_v", bus, "", i, v, cfg.pmu_tve, ref))

    for lid in placement.pmu_lines:
        if lid not in net.lines:
            raise PlacementError(f"PMU line {lid!r} not in network")
        ln = net.lines[lid]
        for i in range(3):
            if not ln.phases[i]:
                continue
            cur = complex(truth.i_line[lid][i])
            ref = max(abs(cur), PMU_I_REF_FLOOR)
            chans.extend(_pmu_pair(rng, "pmu_i", "", lid, i, cur, cfg.pmu_tve, ref))

    sm_extra = cfg.integration_sigma if placement.integration else 0.0
    for did in net.device_order:
        dev = net.devices[did]
        s = truth.device_s[did]
        for i in range(3):
            if not dev.phases[i]:
                continue
            if dev.kind == "load":
                chans.append(_power_channel(rng, "sm_p", dev.bus, i, -s[i].real,
                                            cfg.smart_meter_sigma, sm_extra))
                if placement.load_q:
                    chans.append(_power_channel(rng, "sm_q", dev.bus, i, -s[i].imag,
                                                cfg.smart_meter_sigma, sm_extra))
            elif dev.kind == "der":
                chans.append(_power_channel(rng, "pv_p", dev.bus, i, s[i].real,
                                            cfg.pv_sigma))
                chans.append(_power_channel(rng, "pv_q", dev.bus, i, s[i].imag,
                                            cfg.pv_sigma))
            elif dev.kind == "capacitor":
                chans.append(_power_channel(rng, "cap_q", dev.bus, i, s[i].imag,
                                            cfg.capacitor_sigma))

    for i in range(3):
        if not net.buses[net.slack].phases[i]:
            continue
        s = truth.v[net.slack][i] * np.conj(truth.i_inj[net.slack][i])
        chans.append(_power_channel(rng, "sub_p", net.slack, i, float(s.real),
                                    cfg.substation_sigma))
        chans.append(_power_channel(rng, "sub_q", net.slack, i, float(s.imag),
                                    cfg.substation_sigma))

    return MeasurementSet(chans)


def apply_bad_data(ms: MeasurementSet, victims: list[int],
                   error_fraction: float = 0.60, seed: int = 0) -> MeasurementSet:
    """Corrupt the given sm_p channels by +/- error_fraction of truth.

    The sign is drawn per channel from the seeded stream; victims are
    flagged bad for scoring, which the estimator never sees.
    """
    out = ms.copy()
    rng = Rng(seed)
    for idx in victims:
        c = out.channels[idx]
        if c.kind != "sm_p":
            raise ValueError(f"bad-data victim {idx} is {c.kind}, not sm_p")
        sign = 1.0 if float(rng.uniform(f"bad:{c.bus}:{PHASES[c.phase]}")[0]) < 0.5 else -1.0
        c.value = c.truth * (1.0 + sign * error_fraction)
        c.bad = True
    return out


def largest_load_victims(net: Network, ms: MeasurementSet, n_loads: int) -> list[int]:
    """Channel indices of all sm_p channels of the n largest loads."""
    loads = [net.devices[d] for d in net.device_order if net.devices[d].kind == "load"]
    loads.sort(key=lambda d: (-float(d.p.sum()), d.id))
    chosen = {d.bus for d in loads[:n_loads]}
    return [i for i, c in enumerate(ms.channels) if c.kind == "sm_p" and c.bus in chosen]


def apply_missing(ms: MeasurementSet, victims: list[int],
                  max_fraction: float = 0.50) -> MeasurementSet:
    """Flag the given smart-meter channels missing and clear their values.

    Per bus, the missing share of that bus's sm_p channels must not
    exceed max_fraction.
    """
    out = ms.copy()
    for idx in victims:
        c = out.channels[idx]
        if c.kind not in SM_KINDS:
            raise ValueError(f"missing-data victim {idx} is {c.kind}, not a smart-meter channel")
        c.missing = True
        c.value = 0.0
    per_bus_total: dict[str, int] = {}
    per_bus_missing: dict[str, int] = {}
    for c in out.channels:
        if c.kind == "sm_p":
            per_bus_total[c.bus] = per_bus_total.get(c.bus, 0) + 1
            if c.missing:
                per_bus_missing[c.bus] = per_bus_missing.get(c.bus, 0) + 1
    for bus, miss in per_bus_missing.items():
        if miss > max_fraction * per_bus_total[bus] + 1e-12:
            raise ValueError(
                f"bus {bus}: {miss}/{per_bus_total[bus]} meters missing exceeds "
                f"max fraction {max_fraction}")
    return out


# -- household aggregation ----------------------------------------------

def household_profile(seed: int, house_key: str, seconds: int,
                      base_p: float, sigma_rel: float) -> np.ndarray:
    """Per-second active-power series base_p * (1 + sigma_rel * g_t)."""
    g = Rng(seed).normal(f"house:{house_key}", seconds)
    return base_p * (1.0 + sigma_rel * g)


def aggregate_smart_meters(household_profiles: dict[str, np.ndarray],
                           groups: dict[str, list[str]],
                           window: tuple[int, int], snapshot: int) -> dict[str, tuple[float, float]]:
    """Per-group (interval-average P, instantaneous P at the snapshot).

    window is the half-open second range [t0, t1) of the averaging
    interval; snapshot must fall inside it.
    """
    t0, t1 = window
    if not (t0 <= snapshot < t1):
        raise ValueError("snapshot time outside averaging window")
    out = {}
    for gid, members in groups.items():
        if not members:
            raise ValueError(f"group {gid!r} is empty")
        total = sum(household_profiles[m] for m in members)
        out[gid] = (float(np.mean(total[t0:t1])), float(total[snapshot]))
    return out


def averaging_deviation_samples(seed: int, houses: int = 7,
                                snapshots: int = 100_000,
                                window_len: int = 900,
                                target_3sigma: float = 0.30) -> np.ndarray:
    """Relative (instantaneous - average)/average samples for a meter group.

    Per-household volatility is calibrated so the summed group's
    instantaneous-vs-average deviation has 3 sigma = target_3sigma:
    the mean of `houses` unit normals has std 1/sqrt(houses), so each
    house gets sigma_rel = (target_3sigma / 3) * sqrt(houses).
    Snapshots slide over one long series with a rolling window, which
    leaves the deviation statistic unchanged (the instantaneous noise
    is independent second to second).
    """
    sigma_h = (target_3sigma / 3.0) * math.sqrt(houses)
    n = snapshots + window_len
    total = np.zeros(n)
    for h in range(houses):
        total += household_profile(seed, f"H{h}", n, base_p=1.0, sigma_rel=sigma_h)
    csum = np.concatenate([[0.0], np.cumsum(total)])
    avg = (csum[window_len:] - csum[:-window_len]) / window_len
    inst = total[window_len - 1:-1]
    avg = avg[:snapshots]
    inst = inst[:snapshots]
    return (inst - avg) / avg
