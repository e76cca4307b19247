import numpy as np
import pytest

from samplerank.data_model import FeatureSchema, Session, SessionDataset
from samplerank.synth import SynthConfig, generate

# lines recorded by test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(items_per_session, n_features=2, goal=(0, 1), seed=0, customers=None):
    """Random dataset: one entry per session giving its item count; positive is item 0."""
    rng = np.random.default_rng(seed)
    names = [f"f{j}" for j in range(n_features)]
    schema = FeatureSchema.from_names(names, [names[j] for j in goal])
    sessions = []
    for i, m in enumerate(items_per_session):
        labels = np.zeros(m, dtype=np.int64)
        labels[0] = 1
        cid = f"c{i}" if customers is None else customers[i]
        sessions.append(Session(f"s{i}", cid, rng.normal(size=(m, n_features)), labels))
    return SessionDataset(schema, tuple(sessions))


def one_d_dataset(positives, negatives_per_session=1, seed=0):
    """Sessions whose single goal feature has the given positive values."""
    rng = np.random.default_rng(seed)
    schema = FeatureSchema.from_names(["x"], ["x"])
    sessions = []
    for i, x in enumerate(positives):
        feats = np.concatenate([[x], rng.normal(size=negatives_per_session)]).reshape(-1, 1)
        labels = np.zeros(feats.shape[0], dtype=np.int64)
        labels[0] = 1
        sessions.append(Session(f"s{i:06d}", f"c{i:06d}", feats, labels))
    return SessionDataset(schema, tuple(sessions))


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(n_customers=120, seed=11))


@pytest.fixture
def toy_dataset():
    return make_dataset([3, 3, 4, 2, 5], n_features=3, goal=(0, 2))
