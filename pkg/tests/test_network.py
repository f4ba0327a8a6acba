"""Network model: validation errors, islanding, serialization."""

import copy
import json

import pytest

import feederstate as fs
from feederstate import network as nw

from helpers import tiny_network_doc


def test_load_tiny_document():
    net = nw.load_network(tiny_network_doc())
    assert net.bus_order == ("A", "B")
    assert net.slack == "A"
    assert net.lines["L1"].present() == [0, 1, 2]
    assert net.devices["D1"].kind == "load"


def test_duplicate_bus_id():
    doc = tiny_network_doc()
    doc["buses"].append({"id": "A", "phases": [True] * 3})
    with pytest.raises(nw.DuplicateId):
        nw.load_network(doc)


def test_unknown_bus_reference():
    doc = tiny_network_doc()
    doc["lines"][0]["to"] = "ZZ"
    with pytest.raises(nw.UnknownBus):
        nw.load_network(doc)


def test_asymmetric_series_block():
    doc = tiny_network_doc()
    doc["lines"][0]["z"][0][1] = [0.001, 0.0]
    with pytest.raises(nw.AsymmetricBlock):
        nw.load_network(doc)


def test_non_positive_resistance():
    doc = tiny_network_doc()
    doc["lines"][0]["z"][1][1] = [0.0, 0.02]
    with pytest.raises(nw.NonPositiveResistance):
        nw.load_network(doc)


def test_shunt_conductance_rejected():
    doc = tiny_network_doc()
    doc["lines"][0]["y"][0][0] = [0.001, 0.0]
    with pytest.raises(nw.ShuntConductance):
        nw.load_network(doc)


def test_switch_on_absent_phase():
    doc = tiny_network_doc()
    doc["lines"][0]["phases"] = [True, True, False]
    for i in range(3):
        doc["lines"][0]["z"][i][2] = [0.0, 0.0]
        doc["lines"][0]["z"][2][i] = [0.0, 0.0]
    doc["lines"][0]["switch"] = [False, False, True]
    with pytest.raises(nw.NetworkError):
        nw.load_network(doc)


def test_disconnected_network_rejected():
    doc = tiny_network_doc()
    doc["buses"].append({"id": "C", "phases": [True] * 3})
    with pytest.raises(nw.NetworkError, match="not connected"):
        nw.load_network(doc)


def test_unknown_device_kind():
    doc = tiny_network_doc()
    doc["devices"][0]["kind"] = "widget"
    with pytest.raises(nw.NetworkError, match="unknown kind"):
        nw.load_network(doc)


def test_serialize_round_trip(corpus):
    doc = nw.serialize(corpus)
    again = nw.load_network(copy.deepcopy(doc))
    assert nw.serialize(again) == doc
    assert again.bus_order == corpus.bus_order
    assert again.line_order == corpus.line_order
    for lid in corpus.line_order:
        a, b = corpus.lines[lid], again.lines[lid]
        assert (a.z.entries == b.z.entries).all()
        assert a.switch == b.switch and a.nos == b.nos


def test_islands_all_closed(corpus):
    status = {ln.id: ln.phases for ln in corpus.lines.values()}
    labels = nw.islands(corpus, status)
    assert set(labels.values()) == {"energized"}


def test_islands_open_switch_forms_island(corpus):
    status = {ln.id: (True, True, True) for ln in fs.classify_lines(corpus)[1]}
    status["S06"] = (False, False, False)   # tie stays open
    status["S02"] = (False, False, False)
    labels = nw.islands(corpus, status)
    names = {lab for lab in labels.values() if lab != "energized"}
    assert names, "opening S02 must island something"
    for name in names:
        assert name.startswith("island:")
    # labels are named by their smallest member, so they are stable
    # under line reordering
    doc = nw.serialize(corpus)
    doc["lines"] = list(reversed(doc["lines"]))
    net2 = nw.load_network(doc)
    assert nw.islands(net2, status) == labels


def test_energized_set_matches_labels(corpus):
    status = {ln.id: (True, True, True) for ln in fs.classify_lines(corpus)[1]}
    status["S06"] = (False, False, False)
    status["S08"] = (False, False, False)
    labels = nw.islands(corpus, status)
    ene = nw.energized_set(corpus, status)
    assert ene == {n for n, lab in labels.items() if lab == "energized"}
    assert all((corpus.slack, p) in ene
               for p in range(3) if corpus.buses[corpus.slack].phases[p])


def test_phase_closed_rules(corpus):
    sw = fs.classify_lines(corpus)[1][0]
    closed = {sw.id: (False, False, False)}
    for ph in sw.present():
        assert not nw.phase_closed(sw, closed, ph)
    plain = fs.classify_lines(corpus)[0][0]
    for ph in plain.present():
        assert nw.phase_closed(plain, {}, ph)


def test_corpus_composition(corpus):
    """The shipped corpus matches its documented shape."""
    assert len(corpus.bus_order) == 25
    plain, switched = fs.classify_lines(corpus)
    assert len(switched) == 10
    assert sum(1 for ln in switched if ln.nos) == 1
    kinds = {d.kind for d in corpus.devices.values()}
    assert kinds == {"load", "der", "capacitor", "transformer"}
