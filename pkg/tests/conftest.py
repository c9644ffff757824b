import numpy as np
import pytest

from tcqa import KgeConfig, build_base_matrix, build_type_graphs, train_kge
from tcqa.synthetic import make_typed_kg


@pytest.fixture(scope="session")
def typed_kg():
    return make_typed_kg(n_entities=40, n_relations=3, n_types=3, n_communities=2,
                         test_fraction=0.1, valid_fraction=0.05, seed=11)


@pytest.fixture(scope="session")
def graphs(typed_kg):
    kg, types = typed_kg
    return build_type_graphs(kg, types)


@pytest.fixture(scope="session")
def model(typed_kg):
    kg, _ = typed_kg
    return train_kge(kg, KgeConfig(dim=8, epochs=40, seed=3))


@pytest.fixture(scope="session")
def matrix(typed_kg, graphs, model):
    kg, _ = typed_kg
    return build_base_matrix(model, kg, graphs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
