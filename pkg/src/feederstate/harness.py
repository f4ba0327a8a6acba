"""Scenario harness: truth generation, scenario kinds, and scoring.

A :class:`ScenarioSpec` names a network, a set of truly-open switches,
and a measurement-degradation kind:

    normal      full sensor suite at studied noise levels
    outage      one or more switches truly open (islands form)
    bad_data    gross errors on the smart meters of the largest loads
    practical   no reactive-power metering + interval-average smart
                meters (power-factor band replaces Q channels)
    missing     a share of smart meters absent, previous-interval
                substitution fills them

The harness is the only component allowed to see ground truth: it runs
the power-flow oracle, synthesizes measurements, strips the private
fields, runs the estimator on the public view, and scores the result.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import json
import math
import pathlib
import warnings
from dataclasses import asdict, dataclass, field, replace

from . import load_corpus
from .estimator import (EstimationResult, EstimatorOptions, estimate,
                        substitute_missing)
from .measurements import (MeasurementSet, Placement, SensorConfig,
                           apply_bad_data, apply_missing,
                           largest_load_victims, synthesize)
from .network import (PHASES, Network, classify_lines, energized_set,
                      load_network_file)
from .powerflow import StateTruth, solve_powerflow
from .rng import Rng

KINDS = ("normal", "outage", "bad_data", "practical", "missing")

DEFAULT_PMU_BUSES = ("B01",)
DEFAULT_PMU_LINES = ("T01", "T02", "T03")

# the previous metering interval of a `missing` scenario is an
# independent draw keyed off the scenario seed
PREVIOUS_INTERVAL_SEED_OFFSET = 1_000_003


class HarnessError(ValueError):
    """Scenario specification or scoring precondition violated."""


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    kind: str = "normal"
    seed: int = 0
    network: str = ""                      # path; empty = shipped corpus
    open_switches: tuple[str, ...] = ()    # truly-open lines (all phases)
    noise_scale: float = 1.0
    bad_loads: int = 3
    bad_fraction: float = 0.60
    missing_bus_fraction: float = 0.70
    missing_meter_fraction: float = 0.50
    pmu_buses: tuple[str, ...] = DEFAULT_PMU_BUSES
    pmu_lines: tuple[str, ...] = DEFAULT_PMU_LINES

    def __post_init__(self):
        if self.kind not in KINDS:
            raise HarnessError(f"unknown scenario kind {self.kind!r}")
        if not 0.0 <= self.missing_meter_fraction <= 0.50:
            raise HarnessError("missing_meter_fraction must be in [0, 0.5]")
        if not 0.0 <= self.missing_bus_fraction <= 1.0:
            raise HarnessError("missing_bus_fraction must be in [0, 1]")
        if self.bad_fraction < 0 or self.noise_scale < 0:
            raise HarnessError("fractions must be >= 0")

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("open_switches", "pmu_buses", "pmu_lines"):
            d[k] = list(d[k])
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioSpec":
        d = json.loads(text)
        for k in ("open_switches", "pmu_buses", "pmu_lines"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class MetricsReport:
    name: str
    kind: str
    seed: int
    m1: float
    m2: float
    captured_load_pct: float
    vmag_max_pct: float
    vmag_mean_pct: float
    vang_max_rad: float
    vang_mean_rad: float
    wrong: list[tuple[str, int]]           # mismatched, excluding undetectable
    undetectable: list[tuple[str, int]]
    correct_count: int
    converged: bool
    iterations: int
    objective: float
    wall_time_s: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("wrong", "undetectable"):
            d[key] = [[lid, PHASES[ph]] for lid, ph in sorted(getattr(self, key))]
        d["wrong_count"] = len(self.wrong)
        d["undetectable_count"] = len(self.undetectable)
        return json.dumps(d, indent=1, sort_keys=True)

    CSV_FIELDS = ("name", "kind", "seed", "m1", "m2", "captured_load_pct",
                  "vmag_max_pct", "vmag_mean_pct", "vang_max_rad",
                  "vang_mean_rad", "wrong_count", "undetectable_count",
                  "correct_count", "converged", "iterations", "objective")

    def csv_row(self) -> list:
        return [self.name, self.kind, self.seed,
                repr(self.m1), repr(self.m2), repr(self.captured_load_pct),
                repr(self.vmag_max_pct), repr(self.vmag_mean_pct),
                repr(self.vang_max_rad), repr(self.vang_mean_rad),
                len(self.wrong), len(self.undetectable),
                self.correct_count, int(self.converged),
                self.iterations, repr(self.objective)]


# -- truth construction --------------------------------------------------

def load_scenario_network(spec: ScenarioSpec) -> Network:
    if spec.network:
        return load_network_file(spec.network)
    return load_corpus()


def true_statuses(net: Network, spec: ScenarioSpec) -> dict[str, tuple[bool, bool, bool]]:
    """Per-line truth statuses: nominal truth plus the spec's opened lines."""
    out = {ln.id: ln.true_status for ln in classify_lines(net)[1]}
    for lid in spec.open_switches:
        if lid not in out:
            raise HarnessError(f"open_switches entry {lid!r} is not a switched line")
        out[lid] = (False, False, False)
    return out


def no_load_region_switches(net: Network) -> set[tuple[str, int]]:
    """Switch phases feeding a region with no device of any kind.

    The region behind a switch phase is the connected component, on that
    phase with every other line conducting, that does not contain the
    slack once the switch's line is removed.  If both endpoints still
    reach the slack (the switch sits in a loop or on a tie) there is no
    region behind it.
    """
    out: set[tuple[str, int]] = set()
    for ln in classify_lines(net)[1]:
        for ph in ln.present():
            if not ln.switch[ph]:
                continue
            parent = {b: b for b in net.bus_order}

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            for other in net.lines.values():
                if other.id != ln.id and other.phases[ph]:
                    parent[find(other.from_bus)] = find(other.to_bus)
            slack_root = find(net.slack)
            for end in (ln.from_bus, ln.to_bus):
                if find(end) == slack_root:
                    continue
                region = [b for b in net.bus_order if find(b) == find(end)]
                if not any(dev.phases[ph]
                           for b in region for dev in net.devices_at(b)):
                    out.add((ln.id, ph))
    return out


# -- metrics ---------------------------------------------------------------

def _switch_phases(net: Network) -> list[tuple[str, int]]:
    return [(ln.id, ph) for ln in classify_lines(net)[1]
            for ph in ln.present() if ln.switch[ph]]


def metric_m1(net: Network, true_st: dict, est_st: dict) -> float:
    """Status accuracy over operationally decidable switch phases.

    Excludes normally-open ties and switches feeding device-free
    regions: their open status carries no current signature, so scoring
    them would measure the tie-breaking convention, not the estimator.
    """
    skip = no_load_region_switches(net)
    nos = {ln.id for ln in classify_lines(net)[1] if ln.nos}
    scored = [(lid, ph) for lid, ph in _switch_phases(net)
              if lid not in nos and (lid, ph) not in skip]
    if not scored:
        raise HarnessError("no scorable switch phases for M1")
    wrong = sum(bool(true_st[lid][ph]) != bool(est_st[lid][ph])
                for lid, ph in scored)
    return 100.0 * (1.0 - wrong / len(scored))


def metric_m2(net: Network, true_st: dict, est_st: dict,
              exclude: set[tuple[str, int]] | None = None) -> float:
    """Status accuracy over all switch phases, minus an explicit exclusion."""
    exclude = exclude or set()
    scored = [sp for sp in _switch_phases(net) if sp not in exclude]
    if not scored:
        raise HarnessError("no scorable switch phases for M2")
    wrong = sum(bool(true_st[lid][ph]) != bool(est_st[lid][ph])
                for lid, ph in scored)
    return 100.0 * (1.0 - wrong / len(scored))


def captured_load(net: Network, true_st: dict, est_st: dict) -> float:
    """Share of truly energized load P on bus-phases both sides energize."""
    true_ene = energized_set(net, true_st)
    est_ene = energized_set(net, est_st)
    num = den = 0.0
    for dev in net.devices.values():
        if dev.kind != "load":
            continue
        for ph in range(3):
            if not dev.phases[ph]:
                continue
            node = (dev.bus, ph)
            if node in true_ene:
                den += float(dev.p[ph])
                if node in est_ene:
                    num += float(dev.p[ph])
    if den <= 0.0:
        raise HarnessError("no truly energized load; captured load undefined")
    return min(100.0, 100.0 * num / den)


def node_error_rows(net: Network, truth: StateTruth,
                    result: EstimationResult) -> list[list]:
    """Per bus-phase voltage error rows (or the observability label)."""
    rows = []
    for bus, ph in net.bus_phases():
        est = result.v[(bus, ph)]
        if est is None or not truth.energized(bus, ph):
            rows.append([bus, PHASES[ph], "not-observable", "not-observable"])
            continue
        tv = complex(truth.v[bus][ph])
        mag_pct = abs(abs(est) - abs(tv)) / abs(tv) * 100.0
        dang = math.atan2(est.imag, est.real) - math.atan2(tv.imag, tv.real)
        dang = abs(math.remainder(dang, 2.0 * math.pi))
        rows.append([bus, PHASES[ph], repr(mag_pct), repr(dang)])
    return rows


def voltage_errors(net: Network, truth: StateTruth, result: EstimationResult
                   ) -> tuple[float, float, float, float]:
    """(max, mean) of |V| error % and of angle error rad over the
    commonly energized bus-phases."""
    mags, angs = [], []
    for row in node_error_rows(net, truth, result):
        if row[2] == "not-observable":
            continue
        mags.append(float(row[2]))
        angs.append(float(row[3]))
    if not mags:
        return 0.0, 0.0, 0.0, 0.0
    return (max(mags), sum(mags) / len(mags),
            max(angs), sum(angs) / len(angs))


def score(net: Network, tstat: dict, truth, result: EstimationResult,
          name: str = "", kind: str = "", seed: int = 0) -> MetricsReport:
    """Score an estimation result against truth (oracle or fixture view)."""
    vmax, vmean, amax, amean = voltage_errors(net, truth, result)
    undet = set(result.undetectable)
    wrong = [(lid, ph) for lid, ph in _switch_phases(net)
             if (lid, ph) not in undet
             and bool(tstat[lid][ph]) != bool(result.statuses[lid][ph])]
    total = len(_switch_phases(net))
    return MetricsReport(
        name=name, kind=kind, seed=seed,
        m1=metric_m1(net, tstat, result.statuses),
        m2=metric_m2(net, tstat, result.statuses),
        captured_load_pct=captured_load(net, tstat, result.statuses),
        vmag_max_pct=vmax, vmag_mean_pct=vmean,
        vang_max_rad=amax, vang_mean_rad=amean,
        wrong=wrong,
        undetectable=list(result.undetectable),
        correct_count=total - len(wrong) - len(undet),
        converged=result.converged,
        iterations=result.iterations,
        objective=result.objective,
        wall_time_s=result.wall_time,
    )


class TruthView:
    """StateTruth-like interface over a truth fixture document."""

    def __init__(self, doc: dict):
        self.v: dict[str, list[complex]] = {}
        self._energized: set[tuple[str, int]] = set()
        phase_index = {ph: i for i, ph in enumerate(PHASES)}
        for bus, entry in doc["buses"].items():
            vs = [complex(0.0)] * 3
            for ph, rec in entry.items():
                i = phase_index[ph]
                vs[i] = complex(rec["re"], rec["im"])
                if rec["energized"]:
                    self._energized.add((bus, i))
            self.v[bus] = vs

    def energized(self, bus: str, phase: int) -> bool:
        return (bus, phase) in self._energized


def load_truth_fixture(text: str) -> tuple[dict, TruthView]:
    """Parse a truth fixture into (per-line statuses, voltage view)."""
    doc = json.loads(text)
    tstat = {lid: tuple(bool(b) for b in st)
             for lid, st in doc["statuses"].items()}
    return tstat, TruthView(doc)


# -- scenario execution ------------------------------------------------------

def build_measurements(net: Network, truth: StateTruth, spec: ScenarioSpec
                       ) -> tuple[MeasurementSet, MeasurementSet | None]:
    """Synthesize the snapshot (and previous interval for `missing`)."""
    cfg = SensorConfig(seed=spec.seed).scaled(spec.noise_scale)
    cfg = replace(cfg, seed=spec.seed)
    placement = Placement(pmu_buses=spec.pmu_buses, pmu_lines=spec.pmu_lines)
    if spec.kind == "practical":
        placement = replace(placement, load_q=False, integration=True)
    ms = synthesize(net, truth, cfg, placement)

    if spec.kind == "bad_data":
        victims = largest_load_victims(net, ms, spec.bad_loads)
        ms = apply_bad_data(ms, victims, spec.bad_fraction, seed=spec.seed)
        return ms, None

    if spec.kind == "missing":
        prev_cfg = replace(cfg, seed=spec.seed + PREVIOUS_INTERVAL_SEED_OFFSET)
        previous = synthesize(net, truth, prev_cfg, placement)
        rng = Rng(spec.seed)
        load_buses = sorted({c.bus for c in ms if c.kind == "sm_p"})
        ranked = sorted(load_buses,
                        key=lambda b: float(rng.uniform(f"missing:{b}")[0]))
        n_buses = math.ceil(spec.missing_bus_fraction * len(load_buses))
        victims: list[int] = []
        for bus in ranked[:n_buses]:
            idx = [i for i, c in enumerate(ms.channels)
                   if c.kind == "sm_p" and c.bus == bus]
            take = int(spec.missing_meter_fraction * len(idx) + 1e-12)
            order = sorted(idx, key=lambda i: float(
                rng.uniform(f"missing:{bus}:{PHASES[ms.channels[i].phase]}")[0]))
            for i in order[:take]:
                victims.append(i)
                ph = ms.channels[i].phase
                victims.extend(j for j, c in enumerate(ms.channels)
                               if c.kind == "sm_q" and c.bus == bus
                               and c.phase == ph)
        ms = apply_missing(ms, victims, spec.missing_meter_fraction)
        return ms, previous

    return ms, None


def synth_fixtures(spec: ScenarioSpec, out_dir) -> pathlib.Path:
    """Write a self-contained fixture set (no estimator run).

    `measurements.csv` is estimator-ready: private fields are stripped
    and, for the `missing` kind, previous-interval substitution is
    already applied (`previous.csv` keeps the raw interval for
    reference).
    """
    from .network import serialize

    net = load_scenario_network(spec)
    tstat = true_statuses(net, spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        truth = solve_powerflow(net, tstat)
    ms, previous = build_measurements(net, truth, spec)
    public = ms.strip_private()
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if previous is not None:
        (out / "previous.csv").write_text(previous.strip_private().to_csv())
        public = substitute_missing(public, previous.strip_private())
    (out / "network.json").write_text(
        json.dumps(serialize(net), indent=1, sort_keys=True) + "\n")
    (out / "scenario.json").write_text(spec.to_json() + "\n")
    (out / "truth.json").write_text(_truth_json(net, tstat, truth) + "\n")
    (out / "measurements.csv").write_text(public.to_csv())
    return out


def run_scenario(spec: ScenarioSpec, out_dir=None,
                 opts: EstimatorOptions | None = None
                 ) -> tuple[EstimationResult, MetricsReport]:
    net = load_scenario_network(spec)
    tstat = true_statuses(net, spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")   # islanded-device zeroing notices
        truth = solve_powerflow(net, tstat)
    ms, previous = build_measurements(net, truth, spec)

    public = ms.strip_private()
    if previous is not None:
        public = substitute_missing(public, previous.strip_private())

    result = estimate(net, public, opts)
    report = score(net, tstat, truth, result,
                   name=spec.name, kind=spec.kind, seed=spec.seed)

    if out_dir is not None:
        out = pathlib.Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scenario.json").write_text(spec.to_json() + "\n")
        (out / "truth.json").write_text(_truth_json(net, tstat, truth) + "\n")
        (out / "measurements.csv").write_text(public.to_csv())
        (out / "result.json").write_text(result.to_json() + "\n")
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "node_errors.csv").write_text(
            _node_error_csv(net, truth, result))
    return result, report


def _truth_json(net: Network, tstat: dict, truth: StateTruth) -> str:
    doc = {
        "statuses": {lid: list(st) for lid, st in sorted(tstat.items())},
        "buses": {},
    }
    for bus, ph in net.bus_phases():
        entry = doc["buses"].setdefault(bus, {})
        v = complex(truth.v[bus][ph])
        entry[PHASES[ph]] = {"energized": truth.energized(bus, ph),
                             "re": v.real, "im": v.imag}
    return json.dumps(doc, indent=1, sort_keys=True)


def _node_error_csv(net: Network, truth: StateTruth,
                    result: EstimationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", "phase", "vmag_err_pct", "vang_err_rad"])
    for row in node_error_rows(net, truth, result):
        w.writerow(row)
    return buf.getvalue()


def default_cases() -> list[ScenarioSpec]:
    """The studied scenario suite on the shipped corpus."""
    return [
        ScenarioSpec(name="normal", kind="normal"),
        ScenarioSpec(name="outage-o1", kind="outage", open_switches=("S02",)),
        ScenarioSpec(name="outage-o2", kind="outage", open_switches=("S08",)),
        ScenarioSpec(name="bad-data", kind="bad_data"),
        ScenarioSpec(name="practical", kind="practical"),
        ScenarioSpec(name="missing", kind="missing"),
    ]


def _sweep_worker(args: tuple[str, str | None]) -> str:
    spec_json, out_dir = args
    _, report = run_scenario(ScenarioSpec.from_json(spec_json), out_dir)
    return report.to_json()


def sweep(cases: list[ScenarioSpec], seeds: list[int], out_dir=None,
          workers: int = 1) -> tuple[list[MetricsReport], str]:
    """Run cases x seeds; aggregate CSV is independent of worker count."""
    instances = [replace(spec, seed=seed, name=f"{spec.name}-s{seed}")
                 for spec in cases for seed in seeds]
    jobs = []
    base = pathlib.Path(out_dir) if out_dir is not None else None
    for inst in instances:
        sub = str(base / inst.name) if base is not None else None
        jobs.append((inst.to_json(), sub))

    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            raw = list(ex.map(_sweep_worker, jobs))
    else:
        raw = [_sweep_worker(j) for j in jobs]

    reports = []
    for text in raw:
        d = json.loads(text)
        d.pop("wrong_count", None)
        d.pop("undetectable_count", None)
        for key in ("wrong", "undetectable"):
            d[key] = [(lid, PHASES.index(ph)) for lid, ph in d[key]]
        reports.append(MetricsReport(**d))
    reports.sort(key=lambda r: (r.kind, r.name, r.seed))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsReport.CSV_FIELDS)
    for r in reports:
        w.writerow(r.csv_row())
    agg = buf.getvalue()
    if base is not None:
        base.mkdir(parents=True, exist_ok=True)
        (base / "aggregate.csv").write_text(agg)
    return reports, agg
