import time

import pytest

from stylemetry import arnet
from stylemetry.experiments.benchmarks import split_trips
from stylemetry.experiments.synth import generate_synthetic
from stylemetry.featurize import featurize_trips

# desk-scale synthetic study shared by the end-to-end acceptance checks
N_DRIVERS, N_TRIPS, TRIP_SECONDS, DATA_SEED = 10, 40, 600, 1
POOL_TRIPS = 10
MAX_EPOCHS = 50


class Corpus:
    """Training drivers' trips split 80/20 into train and test. For
    identification the test trips stay unseen and the train part gives up
    1/8 of its trips (10% of the total) for early stopping. Estimation
    scores unseen drivers only, so its models fit on the 80% and stop early
    on the 20%. Two disjoint pools of unseen drivers serve preference
    tuning and estimation."""

    def __init__(self):
        self.matrices = featurize_trips(generate_synthetic(N_DRIVERS, N_TRIPS, TRIP_SECONDS, seed=DATA_SEED))
        self.train, self.test = split_trips(self.matrices, 0.2, seed=DATA_SEED)
        self.fit, self.val = split_trips(self.train, 0.125, seed=DATA_SEED + 1)
        self.tune_pool = self._pool(N_DRIVERS)
        self.eval_pool = self._pool(2 * N_DRIVERS)

    @staticmethod
    def _pool(first):
        return featurize_trips(generate_synthetic(N_DRIVERS, POOL_TRIPS, TRIP_SECONDS, seed=DATA_SEED, first_driver=first))


class Zoo:
    """Trains each (mode, lam) desk-preset model once per session."""

    def __init__(self, corpus):
        self.corpus = corpus
        self._models = {}

    def get(self, mode="arnet", lam=1e-5, protocol="estimate"):
        key = (mode, lam, protocol)
        if key not in self._models:
            c = self.corpus
            fit, val = {"identify": (c.fit, c.val), "estimate": (c.train, c.test)}[protocol]
            cfg = arnet.ArnetConfig(**arnet.DESK_PRESET, mode=mode, lam=lam, max_epochs=MAX_EPOCHS, seed=0)
            start = time.perf_counter()
            model, history = arnet.fit(fit, val, cfg)
            self._models[key] = (model, history, time.perf_counter() - start)
        return self._models[key]


@pytest.fixture(scope="session")
def corpus():
    return Corpus()


@pytest.fixture(scope="session")
def zoo(corpus):
    return Zoo(corpus)


# -- one line per acceptance criterion ----------------------------------------------

_criteria = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _criteria.append((report.nodeid.split("::")[-1], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _criteria:
        number = int(name.split("_")[2])
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {verdict}  {name}  {detail}".rstrip())
