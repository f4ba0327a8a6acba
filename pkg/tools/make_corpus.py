"""Generate the shipped 25-bus synthetic feeder corpus.

Writes src/feederstate/data/feeder25.json: 25 buses, 40 line segments
(30 plain + 10 switched, all switched lines three-phase), mixed
single/two/three-phase laterals, 18 loads, 4 PV units, one capacitor
bank, 4 service transformers (no-load loss only), one normally-open tie
(S6), and one no-load stub behind S5.

The file is a fixed artifact: values below are hand-chosen tables, and
regenerating the file is byte-stable.
"""

import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parents[1] / "src" / "feederstate" / "data" / "feeder25.json"

THREE = [True, True, True]

BUS_PHASES = {
    "B10": [True, True, False],
    "B11": [True, True, False],
    "B23": [True, True, False],
    "B12": [False, False, True],
    "B18": [True, False, False],
    "B24": [True, False, False],
    "B19": [False, True, True],
}


def zy(phases, scale, charging=True):
    """Series and shunt 3x3 blocks for a segment of the given length scale."""
    z_self = complex(0.0060, 0.0140) * scale
    z_mut = complex(0.0020, 0.0055) * scale
    b_self = 3.0e-4 * scale
    b_mut = -0.6e-4 * scale
    z = [[[0.0, 0.0] for _ in range(3)] for _ in range(3)]
    y = [[[0.0, 0.0] for _ in range(3)] for _ in range(3)]
    for i in range(3):
        for j in range(3):
            if not (phases[i] and phases[j]):
                continue
            zij = z_self if i == j else z_mut
            # mild per-phase asymmetry so phases are distinguishable
            if i == j:
                zij *= 1.0 + 0.03 * i
            z[i][j] = [zij.real, zij.imag]
            if charging:
                bij = b_self * (1.0 + 0.02 * i) if i == j else b_mut
                y[i][j] = [0.0, bij]
    return z, y


# id, from, to, phases, scale, switch?, nos?, charging?
LINES = [
    ("T01", "B01", "B02", THREE, 1.0), ("T02", "B01", "B02", THREE, 1.0),
    ("T03", "B01", "B02", THREE, 1.1),
    ("T04", "B02", "B03", THREE, 1.0), ("T05", "B02", "B03", THREE, 1.0),
    ("T06", "B02", "B03", THREE, 1.1),
    ("T07", "B03", "B04", THREE, 1.0), ("T08", "B03", "B04", THREE, 1.0),
    ("T09", "B03", "B04", THREE, 1.1),
    ("T10", "B04", "B05", THREE, 1.0), ("T11", "B04", "B05", THREE, 1.0),
    ("T12", "B04", "B05", THREE, 1.1),
    ("T13", "B05", "B06", THREE, 1.0), ("T14", "B05", "B06", THREE, 1.0),
    ("T15", "B05", "B06", THREE, 1.1),
    ("T16", "B02", "B06", THREE, 3.5),
    ("T17", "B02", "B04", THREE, 2.2),
    ("T18", "B03", "B05", THREE, 2.2),
    ("T19", "B08", "B09", THREE, 1.4), ("T20", "B08", "B09", THREE, 1.5),
    ("T21", "B04", "B10", BUS_PHASES["B10"], 1.8),
    ("T22", "B10", "B11", BUS_PHASES["B10"], 1.6),
    ("T23", "B11", "B23", BUS_PHASES["B23"], 1.2),
    ("T24", "B05", "B12", BUS_PHASES["B12"], 2.0),
    ("T25", "B08", "B18", BUS_PHASES["B18"], 1.5),
    ("T26", "B18", "B24", BUS_PHASES["B24"], 1.3),
    ("T27", "B14", "B19", BUS_PHASES["B19"], 1.4),
    ("T28", "B16", "B17", THREE, 1.6),
    ("T29", "B22", "B25", THREE, 1.2), ("T30", "B22", "B25", THREE, 1.3),
]

# switched lines: (id, from, to, scale, nos, charging, true_status)
SWITCHED = [
    ("S01", "B03", "B07", 1.5, False, True, [True, True, True]),
    ("S02", "B06", "B13", 1.8, False, True, [True, True, True]),
    ("S03", "B13", "B14", 1.4, False, True, [True, True, True]),
    ("S04", "B02", "B16", 1.7, False, True, [True, True, True]),
    ("S05", "B09", "B21", 1.6, False, False, [True, True, True]),   # no-load stub
    ("S06", "B15", "B20", 2.4, True, False, [False, False, False]),  # NOS tie
    ("S07", "B07", "B08", 1.3, False, True, [True, True, True]),
    ("S08", "B20", "B22", 1.4, False, True, [True, True, True]),
    ("S09", "B17", "B20", 1.5, False, True, [True, True, True]),
    ("S10", "B14", "B15", 1.3, False, True, [True, True, True]),
]

# loads: bus -> (per-phase P list, power factor)
LOADS = {
    "B03": ([0.030, 0.028, 0.032], 0.95),
    "B06": ([0.026, 0.030, 0.024], 0.94),
    "B08": ([0.052, 0.048, 0.050], 0.93),   # largest load
    "B09": ([0.022, 0.020, 0.024], 0.95),
    "B10": ([0.028, 0.026, 0.0], 0.96),
    "B11": ([0.020, 0.022, 0.0], 0.95),
    "B12": ([0.0, 0.0, 0.034], 0.94),
    "B13": ([0.030, 0.032, 0.028], 0.95),
    "B14": ([0.024, 0.026, 0.022], 0.96),
    "B15": ([0.026, 0.024, 0.028], 0.95),
    "B16": ([0.046, 0.050, 0.044], 0.94),   # second largest
    "B17": ([0.028, 0.026, 0.030], 0.95),
    "B19": ([0.0, 0.026, 0.024], 0.95),
    "B20": ([0.030, 0.028, 0.026], 0.96),
    "B22": ([0.044, 0.046, 0.042], 0.93),   # third largest
    "B23": ([0.018, 0.020, 0.0], 0.95),
    "B24": ([0.022, 0.0, 0.0], 0.96),
    "B25": ([0.026, 0.024, 0.028], 0.95),
}

# PV units: bus -> per-phase P (Q = 0 setpoint)
PV = {
    "B08": [0.015, 0.015, 0.015],
    "B11": [0.010, 0.010, 0.0],
    "B17": [0.012, 0.012, 0.012],
    "B20": [0.010, 0.010, 0.010],
}

CAPACITOR = {"B14": [0.020, 0.020, 0.020]}

# service transformers sit on trunk buses that stay energized under any
# switch scenario, so their constant no-load loss never lands in an island
TRANSFORMER_NL = {
    "B02": [0.0006, 0.0006, 0.0006],
    "B03": [0.0005, 0.0005, 0.0005],
    "B04": [0.0005, 0.0005, 0.0005],
    "B06": [0.0006, 0.0006, 0.0006],
}


def main():
    buses = [{"id": f"B{n:02d}", "phases": BUS_PHASES.get(f"B{n:02d}", THREE)}
             for n in range(1, 26)]

    lines = []
    for lid, f, t, phases, scale in LINES:
        z, y = zy(phases, scale)
        lines.append({"id": lid, "from": f, "to": t, "phases": phases,
                      "z": z, "y": y, "switch": [False] * 3, "nos": False,
                      "true_status": [True] * 3})
    for lid, f, t, scale, nos, charging, true_status in SWITCHED:
        z, y = zy(THREE, scale, charging=charging)
        lines.append({"id": lid, "from": f, "to": t, "phases": THREE,
                      "z": z, "y": y, "switch": [True] * 3, "nos": nos,
                      "true_status": true_status})

    devices = []
    for bus, (p, pf) in sorted(LOADS.items()):
        tan = (1.0 / pf ** 2 - 1.0) ** 0.5
        q = [round(v * tan, 6) for v in p]
        phases = [v > 0 for v in p]
        devices.append({"id": f"LD_{bus}", "kind": "load", "bus": bus,
                        "phases": phases, "p": p, "q": q, "nl": [0.0] * 3,
                        "pf_min": 0.9, "pf_max": 0.99})
    for bus, p in sorted(PV.items()):
        phases = [v > 0 for v in p]
        devices.append({"id": f"PV_{bus}", "kind": "der", "bus": bus,
                        "phases": phases, "p": p, "q": [0.0] * 3, "nl": [0.0] * 3,
                        "pf_min": 0.9, "pf_max": 0.99})
    for bus, q in sorted(CAPACITOR.items()):
        devices.append({"id": f"CAP_{bus}", "kind": "capacitor", "bus": bus,
                        "phases": [True] * 3, "p": [0.0] * 3, "q": q, "nl": [0.0] * 3,
                        "pf_min": 0.9, "pf_max": 0.99})
    for bus, nl in sorted(TRANSFORMER_NL.items()):
        devices.append({"id": f"TR_{bus}", "kind": "transformer", "bus": bus,
                        "phases": [True] * 3, "p": [0.0] * 3, "q": [0.0] * 3, "nl": nl,
                        "pf_min": 0.9, "pf_max": 0.99})

    doc = {
        "base": {"kv": 12.47, "kva": 5000.0},
        "slack": "B01",
        "buses": buses,
        "lines": lines,
        "devices": devices,
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {OUT} ({len(buses)} buses, {len(lines)} lines, {len(devices)} devices)")


if __name__ == "__main__":
    main()
