from pathlib import Path

import pytest

from pupet import ingest

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(__file__).parent / "data"
ADULT = ROOT / "data" / "adult"
MNIST = ROOT / "data" / "mnist5k"


def pytest_configure(config):
    config.addinivalue_line("markers", "desk: desk-scale reproduction runs (minutes to hours)")


@pytest.fixture(scope="session")
def toy_paths():
    return DATA / "toy.csv", DATA / "toy_schema.json"


@pytest.fixture(scope="session")
def toy(toy_paths):
    csv_path, schema = toy_paths
    return ingest.load_tabular_csv(csv_path, schema, ingest.SplitSpec(train_fraction=0.8, seed=0))


@pytest.fixture(scope="session")
def adult():
    if not (ADULT / "adult.data").exists():
        pytest.skip("UCI Adult not materialised; run scripts/fetch_data.py")
    return ingest.load_adult(ADULT / "adult.data", ADULT / "adult.test")


# criterion number -> (status, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status:4s}  {detail}")
