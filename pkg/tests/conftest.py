import warnings

import pytest

import feederstate as fs
from feederstate import measurements as mm
from feederstate import powerflow as pf


@pytest.fixture(scope="session")
def corpus():
    return fs.load_corpus()


@pytest.fixture(scope="session")
def corpus_truth(corpus):
    """Power-flow truth of the corpus under its nominal statuses."""
    full = {ln.id: ln.true_status for ln in fs.classify_lines(corpus)[1]}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return pf.solve_powerflow(corpus, full)


@pytest.fixture(scope="session")
def default_placement():
    return mm.Placement(pmu_buses=("B01",), pmu_lines=("T01", "T02", "T03"))


@pytest.fixture(scope="session")
def corpus_snapshot(corpus, corpus_truth, default_placement):
    """One noisy public measurement snapshot (seed 3)."""
    cfg = mm.SensorConfig(seed=3)
    return mm.synthesize(corpus, corpus_truth, cfg, default_placement)
