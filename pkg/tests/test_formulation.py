"""MIQP construction: binaries, pins, status handling, fixed models."""

import numpy as np
import pytest

import feederstate as fs
from feederstate import formulation as fm
from feederstate import measurements as mm


@pytest.fixture(scope="module")
def lin(corpus):
    return fm.flat_linearization(corpus)


@pytest.fixture(scope="module")
def public(corpus_snapshot):
    return corpus_snapshot.strip_private()


def test_binary_count(corpus, lin, public):
    assert fm.binary_count(corpus) == 180
    assert fm.binary_count(corpus, outage_detection=False) == 60
    cfg = fm.BigMConfig()
    model = fm.build_iteration_model(corpus, public, lin, cfg)
    assert len(model.binary_idx) == 180
    model60 = fm.build_iteration_model(corpus, public, lin, cfg,
                                       outage_detection=False)
    assert len(model60.binary_idx) == 60


def test_bigm_config_validation():
    fm.BigMConfig()          # defaults are valid
    with pytest.raises(ValueError):
        fm.BigMConfig(M=0.0)
    with pytest.raises(ValueError):
        fm.BigMConfig(theta=-1.0)
    with pytest.raises(ValueError):
        fm.BigMConfig(lam=0.0)


def test_resolve_status_defaults(corpus):
    st = fm.resolve_status(corpus, None)
    assert set(st) == {ln.id for ln in fs.classify_lines(corpus)[1]}
    assert st["S06"] == (False, False, False)   # normally-open tie
    for lid, val in st.items():
        if lid != "S06":
            assert val == (True, True, True)
    given = fm.resolve_status(corpus, {"S02": (False, True, True)})
    assert given["S02"] == (False, True, True)


def test_resolve_status_rejects_unswitched(corpus):
    plain = fs.classify_lines(corpus)[0][0]
    with pytest.raises(fm.FormulationError):
        fm.resolve_status(corpus, {plain.id: (True, True, True)})


def test_exact_rows_track_sigma_floor(corpus, lin, public):
    """A channel is pinned exactly iff its sigma is at the floor."""
    model = fm.build_fixed_model(corpus, public, lin, None)
    pinned = sum(1 for t in model.row_tags if t.startswith("exact:"))
    floored = sum(1 for c in public if c.sigma <= mm.SIGMA_FLOOR
                  and not c.missing)
    assert pinned == floored and pinned > 0
    # noise-free synthesis floors everything, so every channel pins
    zero = public.copy()
    for c in zero:
        c.sigma = mm.SIGMA_FLOOR
    model0 = fm.build_fixed_model(corpus, zero, lin, None)
    # the slack-bus PMU voltage pair is pinned by the dedicated slack
    # reference rows instead of exact: rows
    slack_v = sum(1 for c in zero
                  if c.kind == "pmu_v" and c.bus == corpus.slack)
    n_meas = sum(1 for c in zero if not c.missing) - slack_v
    assert sum(1 for t in model0.row_tags
               if t.startswith("exact:")) == n_meas


def test_zero_injection_rows(corpus, lin, public):
    """Device-free non-slack bus-phases carry hard zero-injection rows."""
    model = fm.build_fixed_model(corpus, public, lin, None)
    zinj = {tuple(t.split(":")[1:]) for t in model.row_tags
            if t.startswith(("zinj_r:", "zinj_i:"))}
    expect = {(bus, str(ph))
              for bus in corpus.bus_order
              if bus != corpus.slack and not corpus.buses[bus].devices
              for ph in range(3) if corpus.buses[bus].phases[ph]}
    assert zinj == expect
    assert any(b == "B05" for b, _ in zinj)
    assert any(b == "B07" for b, _ in zinj)


def test_fixed_model_open_switch_zeroes_current(corpus, lin, public):
    status = {"S02": (False, False, False)}
    model = fm.build_fixed_model(corpus, public, lin, status)
    open_rows = [i for i, t in enumerate(model.row_tags)
                 if t.startswith(("open_r:S02", "open_i:S02"))]
    assert len(open_rows) >= 6   # both directions, re and im, dead phases
    for i in open_rows:
        assert model.row_l[i] == 0.0 and model.row_u[i] == 0.0


def test_fixed_model_has_no_binaries(corpus, lin, public):
    model = fm.build_fixed_model(corpus, public, lin, None)
    assert model.binary_idx == ()


def test_linearization_point_check_finite(corpus, lin):
    lin.check_finite()
    import copy
    bad = copy.deepcopy(lin)
    bad.vr[next(iter(bad.vr))] = float("nan")
    with pytest.raises(fm.FormulationError):
        bad.check_finite()


def test_iteration_model_metadata(corpus, lin, public):
    model = fm.build_iteration_model(corpus, public, lin, fm.BigMConfig())
    assert "switch_phases" in model.meta
    sw = model.meta["switch_phases"]
    assert len(sw) == 30   # 10 switched lines, 3 phases each
    assert {(e[0], e[1]) for e in sw} == {
        (ln.id, ph) for ln in fs.classify_lines(corpus)[1]
        for ph in range(3)}


def test_missing_channels_excluded(corpus, lin, public):
    """A missing pinned channel loses its equality row."""
    holed = public.copy()
    victims = [i for i, c in enumerate(holed.channels)
               if c.sigma <= mm.SIGMA_FLOOR][:2]
    assert victims, "expected some floored channels in the snapshot"
    for i in victims:
        holed.channels[i].missing = True
    base = fm.build_fixed_model(corpus, public, lin, None)
    less = fm.build_fixed_model(corpus, holed, lin, None)
    n_base = sum(1 for t in base.row_tags if t.startswith("exact:"))
    n_less = sum(1 for t in less.row_tags if t.startswith("exact:"))
    assert n_base - n_less == len(victims)
