"""Measurement harness: synthesis, interchange, bad/missing data."""

import math

import numpy as np
import pytest

from feederstate import measurements as mm


def test_synthesis_is_deterministic(corpus, corpus_truth, default_placement):
    cfg = mm.SensorConfig(seed=3)
    a = mm.synthesize(corpus, corpus_truth, cfg, default_placement)
    b = mm.synthesize(corpus, corpus_truth, cfg, default_placement)
    assert [c.value for c in a] == [c.value for c in b]
    c = mm.synthesize(corpus, corpus_truth,
                      mm.SensorConfig(seed=4), default_placement)
    assert [x.value for x in a] != [x.value for x in c]


def test_placement_does_not_perturb_other_streams(corpus, corpus_truth,
                                                 corpus_snapshot):
    """Adding PMUs must not change any smart-meter draw."""
    wider = mm.Placement(pmu_buses=("B01", "B05"),
                         pmu_lines=("T01", "T02", "T03"))
    other = mm.synthesize(corpus, corpus_truth, mm.SensorConfig(seed=3), wider)
    base_sm = {(c.bus, c.phase, c.kind): c.value
               for c in corpus_snapshot.of_kind("sm_p", "sm_q")}
    for c in other.of_kind("sm_p", "sm_q"):
        assert base_sm[(c.bus, c.phase, c.kind)] == c.value


def test_pmu_tve_rejection_bound(corpus_snapshot):
    """Every PMU pair's complex error stays inside the vector-error cap."""
    tve = mm.SensorConfig().pmu_tve
    chans = corpus_snapshot.of_kind("pmu_v", "pmu_i")
    assert chans and len(chans) % 2 == 0
    for re, im in zip(chans[::2], chans[1::2]):
        assert re.part == "re" and im.part == "im"
        assert (re.kind, re.bus, re.line, re.phase) == \
               (im.kind, im.bus, im.line, im.phase)
        err = math.hypot(re.value - re.truth, im.value - im.truth)
        truth_mag = math.hypot(re.truth, im.truth)
        ref = truth_mag if re.kind == "pmu_v" else \
            max(truth_mag, mm.PMU_I_REF_FLOOR)
        assert err <= tve * ref + 1e-15
        assert re.sigma == pytest.approx(tve * ref / 3.0, rel=1e-12)


def test_sigma_floor(corpus, corpus_truth, default_placement):
    noise_free = mm.synthesize(corpus, corpus_truth,
                               mm.SensorConfig(seed=1).scaled(0.0),
                               default_placement)
    for c in noise_free:
        assert c.sigma == mm.SIGMA_FLOOR
        assert c.value == c.truth


def test_combined_sigma():
    assert mm.combined_sigma(0.1, 0.1) == pytest.approx(math.hypot(0.1, 0.1))
    assert mm.combined_sigma(0.3, 0.0) == 0.3
    with pytest.raises(ValueError):
        mm.combined_sigma(-0.1, 0.1)


def test_csv_round_trip(corpus_snapshot):
    public = corpus_snapshot.strip_private()
    text = public.to_csv()
    back = mm.MeasurementSet.from_csv(text)
    assert len(back) == len(public)
    for a, b in zip(public, back):
        assert (a.kind, a.bus, a.line, a.phase, a.part) == \
               (b.kind, b.bus, b.line, b.phase, b.part)
        assert a.value == b.value and a.sigma == b.sigma
        assert a.missing == b.missing
    assert mm.MeasurementSet.from_csv(back.to_csv()).to_csv() == text


def test_json_round_trip(corpus_snapshot):
    public = corpus_snapshot.strip_private()
    back = mm.MeasurementSet.from_json(public.to_json())
    assert back.to_json() == public.to_json()


def test_strip_private_clears_truth_and_bad(corpus_snapshot):
    dirty = corpus_snapshot.copy()
    victims = [i for i, c in enumerate(dirty.channels)
               if c.kind == "sm_p"][:2]
    dirty = mm.apply_bad_data(dirty, victims)
    public = dirty.strip_private()
    assert all(c.truth == 0.0 and not c.bad for c in public)
    # the corrupted values themselves survive stripping
    for i in victims:
        assert public.channels[i].value == dirty.channels[i].value


def test_largest_load_victims(corpus, corpus_snapshot):
    victims = mm.largest_load_victims(corpus, corpus_snapshot, 3)
    buses = {corpus_snapshot.channels[i].bus for i in victims}
    assert buses == {"B08", "B16", "B22"}
    assert all(corpus_snapshot.channels[i].kind == "sm_p" for i in victims)


def test_apply_bad_data(corpus, corpus_snapshot):
    victims = mm.largest_load_victims(corpus, corpus_snapshot, 1)
    out = mm.apply_bad_data(corpus_snapshot, victims, error_fraction=0.6,
                            seed=9)
    for i in victims:
        c = out.channels[i]
        assert c.bad
        assert abs(c.value - c.truth) == pytest.approx(0.6 * abs(c.truth))
    # untouched channels stay identical
    for i, (a, b) in enumerate(zip(corpus_snapshot, out)):
        if i not in victims:
            assert a.value == b.value and not b.bad
    pmu_idx = next(i for i, c in enumerate(corpus_snapshot.channels)
                   if c.kind == "pmu_v")
    with pytest.raises(ValueError):
        mm.apply_bad_data(corpus_snapshot, [pmu_idx])


def test_apply_missing_caps_per_bus(corpus_snapshot):
    by_bus = {}
    for i, c in enumerate(corpus_snapshot.channels):
        if c.kind == "sm_p":
            by_bus.setdefault(c.bus, []).append(i)
    bus, idxs = max(by_bus.items(), key=lambda kv: len(kv[1]))
    half = idxs[: len(idxs) // 2]
    out = mm.apply_missing(corpus_snapshot, half)
    for i in half:
        assert out.channels[i].missing and out.channels[i].value == 0.0
    if len(idxs) > 1:
        with pytest.raises(ValueError):
            mm.apply_missing(corpus_snapshot, idxs)


def test_household_profile_determinism():
    a = mm.household_profile(5, "H1", 100, base_p=1.0, sigma_rel=0.2)
    b = mm.household_profile(5, "H1", 100, base_p=1.0, sigma_rel=0.2)
    assert np.array_equal(a, b)
    assert a.shape == (100,)
    assert not np.array_equal(a, mm.household_profile(5, "H2", 100,
                                                      base_p=1.0,
                                                      sigma_rel=0.2))


def test_averaging_deviation_scale():
    """Group deviation is calibrated to the target 3-sigma spread."""
    dev = mm.averaging_deviation_samples(2, snapshots=20_000)
    assert 0.25 < 3.0 * float(dev.std()) < 0.35


def test_aggregate_smart_meters():
    profiles = {f"H{i}": mm.household_profile(1, f"H{i}", 2000, 1.0, 0.1)
                for i in range(3)}
    groups = {"B": ["H0", "H1", "H2"]}
    got = mm.aggregate_smart_meters(profiles, groups, (0, 900), 500)
    avg, inst = got["B"]
    total = sum(profiles.values())
    assert inst == pytest.approx(float(total[500]))
    assert avg == pytest.approx(float(total[0:900].mean()))
    with pytest.raises(ValueError):
        mm.aggregate_smart_meters(profiles, groups, (0, 900), 1500)
