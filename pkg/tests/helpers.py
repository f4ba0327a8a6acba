"""Shared test utilities: corpus editing and tiny hand-built models."""

import json

import numpy as np

import feederstate as fs
from feederstate import measurements as mm
from feederstate import powerflow as pf
from feederstate.formulation import QPModel, VariableTable

import scipy.sparse as sp


def corpus_variant(keep_switched, single_phase=None):
    """Corpus copy with most switches hard-wired closed.

    ``keep_switched`` lists the line ids that keep their switches; every
    other switched line becomes plain wire (the normally-open tie S06 is
    deleted when not kept, since a hard-wired tie would close a loop).
    ``single_phase`` optionally maps a kept line id to the single phase
    index that stays switched.
    """
    doc = json.loads(fs.corpus_path().read_text())
    lines = []
    for ln in doc["lines"]:
        if ln["id"] == "S06" and "S06" not in keep_switched:
            continue
        if any(ln["switch"]) and ln["id"] not in keep_switched:
            ln = dict(ln, switch=[False] * 3)
        if single_phase and ln["id"] in single_phase:
            ph = single_phase[ln["id"]]
            ln = dict(ln, switch=[i == ph for i in range(3)])
        lines.append(ln)
    return fs.load_network(dict(doc, lines=lines))


def public_snapshot(net, seed, noise_scale=1.0, open_lines=()):
    """Estimator-facing measurement set for a network truth state."""
    full = {ln.id: ln.true_status for ln in fs.classify_lines(net)[1]}
    for lid in open_lines:
        full[lid] = (False, False, False)
    state = pf.solve_powerflow(net, full)
    cfg = mm.SensorConfig(seed=seed).scaled(noise_scale)
    ms = mm.synthesize(net, state, cfg,
                       mm.Placement(pmu_buses=("B01",),
                                    pmu_lines=("T01", "T02", "T03")))
    return state, ms.strip_private()


def tiny_network_doc():
    """Minimal valid 2-bus 3-phase document with a single load."""
    z = [[[0.01, 0.02] if i == j else [0.0, 0.0] for j in range(3)]
         for i in range(3)]
    y = [[[0.0, 0.0] for _ in range(3)] for _ in range(3)]
    return {
        "base": {"kv": 12.47, "kva": 1000.0},
        "slack": "A",
        "buses": [{"id": "A", "phases": [True, True, True]},
                  {"id": "B", "phases": [True, True, True]}],
        "lines": [{"id": "L1", "from": "A", "to": "B",
                   "phases": [True, True, True], "z": z, "y": y}],
        "devices": [{"id": "D1", "kind": "load", "bus": "B",
                     "phases": [True, True, True],
                     "p": [0.01, 0.01, 0.01], "q": [0.003, 0.003, 0.003]}],
    }


def make_qp(p_diag, q, rows, binaries=()):
    """Hand-built QPModel: rows is a list of (coeff dict, l, u, tag)."""
    n = len(p_diag)
    vt = VariableTable()
    for j in range(n):
        vt.add(("x", j), -1e4, 1e4, binary=j in set(binaries))
    if binaries:
        for j in binaries:
            vt.lb[j], vt.ub[j] = 0.0, 1.0
    m = len(rows)
    A = sp.lil_matrix((m, n))
    row_l = np.zeros(m)
    row_u = np.zeros(m)
    tags = []
    for i, (coeffs, l, u, tag) in enumerate(rows):
        for j, c in coeffs.items():
            A[i, j] = c
        row_l[i], row_u[i] = l, u
        tags.append(tag)
    return QPModel(variables=vt, A=A.tocsc(), row_l=row_l, row_u=row_u,
                   row_tags=tags, p_diag=np.asarray(p_diag, float),
                   q=np.asarray(q, float), const=0.0,
                   binary_idx=tuple(sorted(binaries)), meta={})
